"""Field CSV, JSON report and PGM raster writers."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Grid, ScalarField

_FMT = "%.17g"  # enough digits for an exact float64 round trip


def write_field_csv(path, fld: ScalarField) -> None:
    grid = fld.grid
    names = ["x", "y"][: grid.dim] + ["u"]
    table = np.column_stack([grid.points(), fld.values.ravel()])
    np.savetxt(path, table, fmt=_FMT, delimiter=",", header=",".join(names), comments="")


def read_field_csv(path) -> ScalarField:
    """Inverse of :func:`write_field_csv`; rows must be the C-order node list."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header not in (["x", "u"], ["x", "y", "u"]):
        raise ValueError(f"unexpected CSV header {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    dim = len(header) - 1
    coords = [np.unique(data[:, k]) for k in range(dim)]
    n = tuple(len(c) for c in coords)
    if int(np.prod(n)) != len(data):
        raise ValueError("CSV rows do not form a tensor grid")
    grid = Grid(dim, tuple(float(c[0]) for c in coords), tuple(float(c[-1] - c[0]) for c in coords), n)
    return ScalarField(grid, data[:, -1])


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def _raster(values: np.ndarray) -> np.ndarray:
    # node arrays are [ix, iy]; images are rows from top (largest y) down
    return np.flipud(values.T)


def write_field_pgm(path, fld: ScalarField) -> None:
    """Grayscale heatmap, min mapped to black and max to white (2D only)."""
    if fld.grid.dim != 2:
        raise ValueError("PGM output needs a 2D field")
    u = fld.values
    lo, hi = float(u.min()), float(u.max())
    scaled = np.zeros_like(u) if hi == lo else (u - lo) / (hi - lo)
    _pgm(path, np.round(255 * _raster(scaled)))


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Binary mask, members white."""
    if np.ndim(mask) != 2:
        raise ValueError("PGM output needs a 2D mask")
    _pgm(path, 255 * _raster(np.asarray(mask, dtype=np.uint8)))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
