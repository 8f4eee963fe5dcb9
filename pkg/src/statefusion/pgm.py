"""ASCII netpbm I/O: P2 graymaps out, P2/P3 images in.

Only the ASCII variants are supported, deliberately: no codec dependencies,
and the files stay diffable in tests.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


class ImageReadError(OSError):
    """Input image file is missing, truncated, or not ASCII netpbm."""


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write a [H, W] array of values in [0, 1] as an ASCII P2 graymap."""
    if values.ndim != 2:
        raise ShapeError(f"P2 graymap needs a 2D array, got {values.shape}")
    levels = np.clip(np.rint(values * maxval), 0, maxval).astype(int)
    height, width = levels.shape
    with open(path, "w", newline="\n") as fh:
        fh.write("P2\n")
        fh.write(f"{width} {height}\n")
        fh.write(f"{maxval}\n")
        for row in levels:
            fh.write(" ".join(str(v) for v in row))
            fh.write("\n")


def _read_tokens(path):
    tokens = []
    with open(path) as fh:
        for line in fh:
            hash_at = line.find("#")
            if hash_at >= 0:
                line = line[:hash_at]
            tokens.extend(line.split())
    return tokens


def read_image(path) -> np.ndarray:
    """Read an ASCII P2 (gray) or P3 (color) file into [H, W, 3] in [0, 1].

    Grayscale input is replicated across the three output channels.
    """
    tokens = _read_tokens(path)
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise ImageReadError(f"{path}: expected an ASCII P2/P3 netpbm file")
    magic = tokens[0]
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        values = np.array([float(t) for t in tokens[4:]])
    except (IndexError, ValueError) as exc:
        raise ImageReadError(f"{path}: malformed netpbm header or payload") from exc
    per_pixel = 1 if magic == "P2" else 3
    expected = width * height * per_pixel
    if values.size != expected:
        raise ImageReadError(
            f"{path}: expected {expected} samples, found {values.size}"
        )
    values = values.reshape(height, width, per_pixel) / float(maxval)
    if per_pixel == 1:
        values = np.repeat(values, 3, axis=2)
    return values
