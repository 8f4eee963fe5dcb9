"""Structure-aware state fusion: multi-scale dilated depthwise re-weighting
of a 2D state grid, merged-kernel re-parameterization, and the equivalent
adjacency matrix on the flattened sequence.

Each dilation d contributes the neighbor set {(i*d, j*d) | i, j in {-1, 0, 1}}
with a free 3x3 weight per channel. Out-of-bounds neighbors contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .oracle import StructuredMatrix
from .tensor import ShapeError

DEFAULT_DILATIONS = (1, 3, 5)


@dataclass
class FusionKernel:
    """Per-channel 3x3 taps at each dilation; weights shape [D, C, 3, 3].

    weights[di, c, i+1, j+1] is the tap at spatial offset (i*d, j*d) for
    dilation d = dilations[di]. Weights are unconstrained.
    """

    dilations: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if any(d <= 0 for d in self.dilations):
            raise ValueError(f"dilations must be positive, got {self.dilations}")
        if self.weights.shape[0] != len(self.dilations) or self.weights.shape[2:] != (3, 3):
            raise ShapeError(
                f"weights must be [n_dilations, C, 3, 3], got {self.weights.shape}"
            )

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    def repeat_lanes(self, n: int) -> "FusionKernel":
        """Share each channel's taps across n sub-lanes (C -> C*n channels)."""
        if n == 1:
            return self
        return FusionKernel(self.dilations, np.repeat(self.weights, n, axis=1))

    def offsets(self) -> list[tuple[int, int]]:
        """All (dh, dw) neighbor offsets, dilations ascending, row-major taps."""
        return [
            (i * d, j * d)
            for d in self.dilations
            for i in (-1, 0, 1)
            for j in (-1, 0, 1)
        ]

    def tap_weights(self) -> np.ndarray:
        """Weights aligned with :meth:`offsets`, shape [n_taps, C]."""
        return self.weights.transpose(0, 2, 3, 1).reshape(-1, self.channels)


def identity_kernel(channels: int, dilations=DEFAULT_DILATIONS) -> FusionKernel:
    """Center tap 1 at the smallest dilation: fusion becomes a no-op."""
    w = np.zeros((len(dilations), channels, 3, 3))
    w[0, :, 1, 1] = 1.0
    return FusionKernel(tuple(dilations), w)


def random_kernel(channels: int, dilations=DEFAULT_DILATIONS, rng=None, scale: float = 0.5) -> FusionKernel:
    rng = np.random.default_rng(rng)
    w = rng.normal(0.0, scale, size=(len(dilations), channels, 3, 3))
    return FusionKernel(tuple(dilations), w)


def _overlap(extent: int, shift: int) -> tuple[slice, slice] | None:
    """(dst, src) slices so dst[k] maps to src[k + shift]; None if empty."""
    lo = max(0, -shift)
    hi = min(extent, extent - shift)
    if hi <= lo:
        return None
    return slice(lo, hi), slice(lo + shift, hi + shift)


def tap_correlate(x: np.ndarray, offsets, weights: np.ndarray) -> np.ndarray:
    """out(p)[c] = sum_k weights[k, c] * x(p + offsets[k])[c], zero padded.

    x: [H, W, C]; weights: [n_taps, C]. All-zero taps are skipped.
    """
    height, width, _ = x.shape
    out = np.zeros_like(x)
    active = np.flatnonzero(np.any(weights != 0.0, axis=1))
    for k in active:
        dh, dw = offsets[k]
        rows = _overlap(height, dh)
        cols = _overlap(width, dw)
        if rows is None or cols is None:
            continue
        out[rows[0], cols[0]] += weights[k] * x[rows[1], cols[1]]
    return out


def tap_weight_grads(x: np.ndarray, upstream: np.ndarray, offsets) -> np.ndarray:
    """d(loss)/d(weights[k, c]) = sum_p upstream(p)[c] * x(p + offsets[k])[c]."""
    height, width, lanes = x.shape
    grads = np.zeros((len(offsets), lanes))
    for k, (dh, dw) in enumerate(offsets):
        rows = _overlap(height, dh)
        cols = _overlap(width, dw)
        if rows is None or cols is None:
            continue
        grads[k] = np.einsum(
            "hwc,hwc->c", upstream[rows[0], cols[0]], x[rows[1], cols[1]]
        )
    return grads


def sasf_apply(x: np.ndarray, kernel: FusionKernel) -> np.ndarray:
    """Fuse each grid state with its dilated neighbors, depthwise.

    x: [H, W, K] state grid with K = kernel.channels lanes; no cross-lane
    mixing. Out-of-bounds neighbors are dropped (zero padding).
    """
    if x.ndim != 3:
        raise ShapeError(f"expected [H,W,C] grid, got {x.shape}")
    if x.shape[2] != kernel.channels:
        raise ShapeError(
            f"kernel has {kernel.channels} channels, grid has {x.shape[2]} lanes"
        )
    return tap_correlate(x, kernel.offsets(), kernel.tap_weights())


def sasf_input_grad(upstream: np.ndarray, kernel: FusionKernel) -> np.ndarray:
    """Adjoint of :func:`sasf_apply` wrt the state grid (F^T on flat lanes)."""
    offsets = [(-dh, -dw) for dh, dw in kernel.offsets()]
    return tap_correlate(upstream, offsets, kernel.tap_weights())


def sasf_kernel_grad(x: np.ndarray, upstream: np.ndarray, kernel: FusionKernel) -> np.ndarray:
    """Adjoint of :func:`sasf_apply` wrt the taps; returns [D, C, 3, 3]."""
    flat = tap_weight_grads(x, upstream, kernel.offsets())
    return flat.reshape(len(kernel.dilations), 3, 3, kernel.channels).transpose(0, 3, 1, 2)


@dataclass
class MergedKernel:
    """Single dense kernel equivalent to summing all dilated applications.

    weights: [C, S, S] with S = 2*max(dilation)+1; overlapping taps (the
    shared centers in particular) are summed into one coefficient.
    """

    reach: int
    weights: np.ndarray

    @property
    def channels(self) -> int:
        return self.weights.shape[0]


def merge_dilated_kernels(kernel: FusionKernel) -> MergedKernel:
    """Collapse the dilated taps into one (2*d_max+1)^2 kernel per channel."""
    if list(kernel.dilations) != sorted(kernel.dilations):
        raise ValueError("dilations must be sorted ascending")
    reach = max(kernel.dilations)
    size = 2 * reach + 1
    merged = np.zeros((kernel.channels, size, size))
    for di, d in enumerate(kernel.dilations):
        for i in (-1, 0, 1):
            for j in (-1, 0, 1):
                merged[:, i * d + reach, j * d + reach] += kernel.weights[di, :, i + 1, j + 1]
    return MergedKernel(reach, merged)


def apply_merged(x: np.ndarray, merged: MergedKernel) -> np.ndarray:
    """Depthwise application of a merged kernel, zero padded."""
    if x.ndim != 3 or x.shape[2] != merged.channels:
        raise ShapeError(f"grid {x.shape} does not match {merged.channels} channels")
    reach = merged.reach
    offsets = [
        (dh, dw)
        for dh in range(-reach, reach + 1)
        for dw in range(-reach, reach + 1)
    ]
    weights = merged.weights.transpose(1, 2, 0).reshape(-1, merged.channels)
    return tap_correlate(x, offsets, weights)


def fusion_adjacency(kernel: FusionKernel, height: int, width: int, channel: int = 0) -> StructuredMatrix:
    """The L x L linear map F with F @ flatten(x) == flatten(sasf_apply(x))
    for one channel; rho_k(t) = t + i*d*width + j*d for in-bounds neighbors.
    """
    length = height * width
    entries = np.zeros((length, length))
    bounds = np.zeros(length, dtype=np.int64)
    hh, ww = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    t_flat = (hh * width + ww).ravel()
    for (dh, dw), w in zip(kernel.offsets(), kernel.tap_weights()[:, channel]):
        nh = (hh + dh).ravel()
        nw = (ww + dw).ravel()
        ok = (nh >= 0) & (nh < height) & (nw >= 0) & (nw < width)
        neighbor = nh[ok] * width + nw[ok]
        np.add.at(entries, (t_flat[ok], neighbor), w)
        np.maximum.at(bounds, t_flat[ok], neighbor)
    return StructuredMatrix(size=length, entries=entries, structure="adjacency", row_bounds=bounds)


def save_kernel_csv(path, kernel: FusionKernel) -> None:
    """One row per tap: dilation, i, j, channel, weight."""
    with open(path, "w", newline="\n") as fh:
        for di, d in enumerate(kernel.dilations):
            for i in (-1, 0, 1):
                for j in (-1, 0, 1):
                    for c in range(kernel.channels):
                        w = kernel.weights[di, c, i + 1, j + 1]
                        fh.write(f"{d},{i},{j},{c},{w!r}\n")


def load_kernel_csv(path) -> FusionKernel:
    taps = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d, i, j, c, w = line.split(",")
            taps.append((int(d), int(i), int(j), int(c), float(w)))
    if not taps:
        raise ValueError(f"no taps in {path}")
    dilations = tuple(sorted({t[0] for t in taps}))
    channels = max(t[3] for t in taps) + 1
    weights = np.zeros((len(dilations), channels, 3, 3))
    index = {d: k for k, d in enumerate(dilations)}
    for d, i, j, c, w in taps:
        weights[index[d], c, i + 1, j + 1] = w
    return FusionKernel(dilations, weights)
