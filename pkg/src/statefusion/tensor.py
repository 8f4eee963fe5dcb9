"""Dense-array substrate: scan-order flattening and delimited I/O.

Every value in this package is a C-contiguous float64 numpy array.
2D feature grids are laid out [H, W, C] (channel innermost); flattened
sequences are [L, C] with L = H * W and position t = h * W + w.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Array rank or extent does not match the operation's contract."""


class DomainError(ValueError):
    """Value outside the mathematical domain of the operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


def tensor(data, shape=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def require_finite(arr: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def flatten_scan_order(grid: np.ndarray) -> np.ndarray:
    """[H, W, C] -> [H*W, C], row-major sweep: position t = h*W + w."""
    if grid.ndim != 3:
        raise ShapeError(f"expected rank-3 grid [H,W,C], got shape {grid.shape}")
    h, w, c = grid.shape
    return np.ascontiguousarray(grid).reshape(h * w, c)


def unflatten_scan_order(seq: np.ndarray, height: int, width: int) -> np.ndarray:
    """[L, C] -> [H, W, C]; exact inverse of :func:`flatten_scan_order`."""
    if seq.ndim != 2:
        raise ShapeError(f"expected rank-2 sequence [L,C], got shape {seq.shape}")
    if seq.shape[0] != height * width:
        raise ShapeError(
            f"sequence length {seq.shape[0]} != {height}*{width}"
        )
    return np.ascontiguousarray(seq).reshape(height, width, seq.shape[1])


def write_csv(path, mat: np.ndarray) -> None:
    """Write a 2D array as comma-separated rows, '.' decimal, no header."""
    m = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeError(f"CSV export expects a 2D array, got shape {mat.shape}")
    with open(path, "w", newline="\n") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_csv(path) -> np.ndarray:
    """Read a 2D array written by :func:`write_csv`."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeError(f"ragged CSV rows in {path}")
    return np.array(rows, dtype=np.float64)
