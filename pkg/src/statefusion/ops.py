"""Forward/backward pairs for the network primitives.

Every op returns (output, cache); the matching *_bwd consumes the cache and
the upstream gradient and returns exact analytic gradients of the float64
forward as implemented (the GELU backward differentiates the tanh
approximation used in the forward, not the erf definition).
"""

from __future__ import annotations

import numpy as np

from .fusion import tap_correlate, tap_weight_grads
from .tensor import ShapeError

BN_EPS = 1e-5
LN_EPS = 1e-5

DW_OFFSETS = [(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)]


# ---------------------------------------------------------------- linear

def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: [..., Cin] @ w: [Cin, Cout] + b."""
    y = x @ w + b
    return y, (x, w)


def linear_bwd(cache, g: np.ndarray):
    x, w = cache
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, gw, gb


# ------------------------------------------------------- 3x3 convolutions

def _im2col(x: np.ndarray, stride: int):
    """Zero-pad by 1 and gather 3x3 patches; returns [Ho, Wo, 9, Cin]."""
    height, width, cin = x.shape
    out_h = (height + 2 - 3) // stride + 1
    out_w = (width + 2 - 3) // stride + 1
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((out_h, out_w, 9, cin))
    for k, (i, j) in enumerate(DW_OFFSETS):
        cols[:, :, k] = xp[
            i + 1 : i + 1 + stride * out_h : stride,
            j + 1 : j + 1 + stride * out_w : stride,
        ]
    return cols, (height, width)


def conv3x3_fwd(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 1):
    """Dense 3x3 convolution, zero padding 1. k: [3, 3, Cin, Cout]."""
    if x.ndim != 3 or x.shape[2] != k.shape[2]:
        raise ShapeError(f"conv input {x.shape} does not match kernel {k.shape}")
    cols, spatial = _im2col(x, stride)
    kmat = k.reshape(9 * k.shape[2], k.shape[3])
    out_h, out_w = cols.shape[:2]
    y = cols.reshape(out_h * out_w, -1) @ kmat + b
    y = y.reshape(out_h, out_w, k.shape[3])
    return y, (cols, spatial, k, stride)


def conv3x3_bwd(cache, g: np.ndarray):
    cols, (height, width), k, stride = cache
    out_h, out_w, cout = g.shape
    gmat = g.reshape(-1, cout)
    kmat = k.reshape(9 * k.shape[2], cout)
    gk = (cols.reshape(-1, 9 * k.shape[2]).T @ gmat).reshape(k.shape)
    gb = gmat.sum(axis=0)
    gcols = (gmat @ kmat.T).reshape(out_h, out_w, 9, k.shape[2])
    gxp = np.zeros((height + 2, width + 2, k.shape[2]))
    for idx, (i, j) in enumerate(DW_OFFSETS):
        gxp[
            i + 1 : i + 1 + stride * out_h : stride,
            j + 1 : j + 1 + stride * out_w : stride,
        ] += gcols[:, :, idx]
    return gxp[1:-1, 1:-1], gk, gb


def depthwise3x3_fwd(x: np.ndarray, k: np.ndarray):
    """Per-channel 3x3 correlation, zero padding. k: [C, 3, 3]."""
    if x.shape[2] != k.shape[0]:
        raise ShapeError(f"depthwise kernel {k.shape} vs input {x.shape}")
    weights = k.reshape(k.shape[0], 9).T  # [9, C] aligned with DW_OFFSETS
    y = tap_correlate(x, DW_OFFSETS, weights)
    return y, (x, weights)


def depthwise3x3_bwd(cache, g: np.ndarray):
    x, weights = cache
    neg = [(-i, -j) for i, j in DW_OFFSETS]
    gx = tap_correlate(g, neg, weights)
    gk = tap_weight_grads(x, g, DW_OFFSETS).T.reshape(-1, 3, 3)
    return gx, gk


# ----------------------------------------------------------- normalization

def batchnorm_fwd(x, gamma, beta, running_mean, running_var, training, momentum=0.1):
    """Channel statistics over the spatial extent of the current batch.

    Returns (y, cache, new_running_mean, new_running_var); running stats are
    returned rather than mutated so the caller owns the state update.
    """
    if training:
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma, x.shape[0] * x.shape[1], training), new_mean, new_var


def batchnorm_bwd(cache, g):
    xhat, inv, gamma, count, training = cache
    ggamma = (g * xhat).sum(axis=(0, 1))
    gbeta = g.sum(axis=(0, 1))
    gxhat = g * gamma
    if training:
        # statistics depend on x; fold their gradient contributions in
        gx = (inv / count) * (
            count * gxhat
            - gxhat.sum(axis=(0, 1))
            - xhat * (gxhat * xhat).sum(axis=(0, 1))
        )
    else:
        gx = gxhat * inv
    return gx, ggamma, gbeta


def layernorm_fwd(x, gamma, beta):
    """Normalize across the channel axis at every position."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma)


def layernorm_bwd(cache, g):
    xhat, inv, gamma = cache
    width = xhat.shape[-1]
    ggamma = (g * xhat).reshape(-1, width).sum(axis=0)
    gbeta = g.reshape(-1, width).sum(axis=0)
    gxhat = g * gamma
    gx = (inv / width) * (
        width * gxhat
        - gxhat.sum(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggamma, gbeta


# ------------------------------------------------------------- activations

SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
GELU_CUBIC = 0.044715


def gelu_fwd(x):
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    return y, (x, t)


def gelu_bwd(cache, g):
    x, t = cache
    dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return g * dy


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_fwd(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_bwd(cache, g):
    x, s = cache
    return g * s * (1.0 + x * (1.0 - s))


# ------------------------------------------------------------ pool & loss

def global_avgpool_fwd(x):
    y = x.mean(axis=(0, 1))
    return y, x.shape[:2]


def global_avgpool_bwd(cache, g):
    height, width = cache
    return np.broadcast_to(g / (height * width), (height, width, g.shape[0])).copy()


def softmax_xent_fwd(logits: np.ndarray, label: int):
    shifted = logits - logits.max()
    expv = np.exp(shifted)
    probs = expv / expv.sum()
    loss = -np.log(probs[label])
    return loss, (probs, label)


def softmax_xent_bwd(cache, g: float = 1.0):
    probs, label = cache
    grad = probs.copy()
    grad[label] -= 1.0
    return g * grad
