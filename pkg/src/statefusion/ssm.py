"""Selective state space pipeline: parameter projection, zero-order-hold
discretization, the sequential state scan, and the observation step.

The pipeline is split so the raw post-scan states stay visible: callers can
reshape them to the 2D grid, fuse neighboring states, and only then apply
the observation step. With an identity fusion kernel the split pipeline is
numerically identical to a plain selective scan.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DomainError,
    ShapeError,
    flatten_scan_order,
    require_finite,
    unflatten_scan_order,
)

# Below this |delta * a| the closed form (e^z - 1)/z is replaced by its
# series; removes the singularity of the exact discretization at delta = 0.
ZOH_SERIES_SWITCH = 1e-4


@dataclass
class SsmParams:
    """Learnable parameters of one selective scan layer.

    a_log: [C, N], transition rates A = -exp(a_log) (strictly negative).
    d_skip: [C], residual weight on the raw input.
    w_delta: [C, C] + b_delta: [C], step size Delta = softplus(u @ w_delta + b_delta).
    w_b: [C, N] and w_c: [C, N], input/output projections shared across channels.
    """

    n_state: int
    channels: int
    a_log: np.ndarray
    d_skip: np.ndarray
    w_delta: np.ndarray
    b_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray

    def a(self) -> np.ndarray:
        """Continuous transition rates, strictly negative by construction."""
        return -np.exp(self.a_log)


@dataclass
class DiscreteSeq:
    """Per-step discretized parameters for a length-L sequence.

    a_bar:   [L, C, N]  transition factors e^{Delta A}, each in (0, 1].
    b_bar:   [L, C, N]  discretized input matrix (without the input factor).
    b_bar_u: [L, C, N]  b_bar * u, the forcing term consumed by the scan.
    c:       [L, N]     observation projection per step.
    delta:   [L, C]     positive step sizes.
    """

    a_bar: np.ndarray
    b_bar: np.ndarray
    b_bar_u: np.ndarray
    c: np.ndarray
    delta: np.ndarray

    @property
    def length(self) -> int:
        return self.a_bar.shape[0]

    @property
    def channels(self) -> int:
        return self.a_bar.shape[1]

    @property
    def n_state(self) -> int:
        return self.a_bar.shape[2]


def init_ssm_params(channels: int, n_state: int = 1, rng=None, init_std: float = 0.02) -> SsmParams:
    """Fresh layer parameters.

    a_log starts at zero (A = -1); the step-size bias is set so the initial
    Delta lands in [0.001, 0.1] regardless of the projection weights.
    """
    rng = np.random.default_rng(rng)
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    # inverse softplus so softplus(b_delta) == dt at u = 0
    b_delta = np.log(np.expm1(dt))
    return SsmParams(
        n_state=n_state,
        channels=channels,
        a_log=np.zeros((channels, n_state)),
        d_skip=np.ones(channels),
        w_delta=rng.normal(0.0, init_std, size=(channels, channels)),
        b_delta=b_delta,
        w_b=rng.normal(0.0, init_std, size=(channels, n_state)),
        w_c=rng.normal(0.0, init_std, size=(channels, n_state)),
    )


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def project_selective_params(u: np.ndarray, p: SsmParams):
    """Input-dependent (delta, b, c) for every step of u: [L, C].

    delta: [L, C] strictly positive; b, c: [L, N] linear in u_t and shared
    across channels within a step.
    """
    require_finite(u, "scan input")
    if u.ndim != 2 or u.shape[1] != p.channels:
        raise ShapeError(f"expected [L,{p.channels}] input, got {u.shape}")
    delta = softplus(u @ p.w_delta + p.b_delta)
    b = u @ p.w_b
    c = u @ p.w_c
    return delta, b, c


def _zoh_phi(z: np.ndarray) -> np.ndarray:
    """phi(z) = (e^z - 1)/z with series 1 + z/2 + z^2/6 near zero."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < ZOH_SERIES_SWITCH
    # guard the division; the masked lanes are overwritten by the series
    safe = np.where(small, 1.0, z)
    closed = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, closed)


def zoh_discretize(a, b, delta):
    """Zero-order-hold discretization of diagonal dynamics.

    a_bar = e^{delta a};  b_bar = ((e^{delta a} - 1)/a) b = delta * phi(delta a) * b.
    Broadcasts over arrays. Requires a < 0 (stability) and delta >= 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(a >= 0):
        raise DomainError("transition rate a must be strictly negative")
    if np.any(delta < 0):
        raise DomainError("step size delta must be nonnegative")
    z = delta * a
    a_bar = np.exp(z)
    b_bar = delta * _zoh_phi(z) * b
    return a_bar, b_bar


def _discretize_full(u: np.ndarray, p: SsmParams):
    """All intermediates of projection + ZOH; shared by the forward-only and
    gradient-tracking paths so the two can never drift apart."""
    require_finite(u, "scan input")
    if u.ndim != 2 or u.shape[1] != p.channels:
        raise ShapeError(f"expected [L,{p.channels}] input, got {u.shape}")
    pre_delta = u @ p.w_delta + p.b_delta
    delta = softplus(pre_delta)
    b = u @ p.w_b
    c = u @ p.w_c
    a = p.a()  # [C, N]
    z = delta[:, :, None] * a[None, :, :]  # [L, C, N]
    a_bar = np.exp(z)
    phi = _zoh_phi(z)
    b_bar = delta[:, :, None] * phi * b[:, None, :]
    b_bar_u = b_bar * u[:, :, None]
    return pre_delta, delta, b, c, a, z, a_bar, phi, b_bar, b_bar_u


def discretize(u: np.ndarray, p: SsmParams) -> DiscreteSeq:
    """Project selective parameters from u and apply the ZOH rule per step."""
    _, delta, _, c, _, _, a_bar, _, b_bar, b_bar_u = _discretize_full(u, p)
    return DiscreteSeq(a_bar=a_bar, b_bar=b_bar, b_bar_u=b_bar_u, c=c, delta=delta)


def _scan_lanes(a_bar: np.ndarray, b_bar_u: np.ndarray, out: np.ndarray) -> None:
    # strictly sequential in t; lanes (trailing axes) advance together
    state = np.zeros(a_bar.shape[1:])
    for t in range(a_bar.shape[0]):
        state = a_bar[t] * state + b_bar_u[t]
        out[t] = state


def scan_states(seq: DiscreteSeq, threads: int = 1) -> np.ndarray:
    """Run x_t = a_bar_t * x_{t-1} + b_bar_u_t from x_0 = 0; returns [L, C, N].

    Distinct (channel, state) lanes are independent; threads > 1 splits the
    channel axis across a thread pool with identical numerical results.
    """
    x = np.empty_like(seq.a_bar)
    n_ch = seq.channels
    if threads <= 1 or n_ch == 1:
        _scan_lanes(seq.a_bar, seq.b_bar_u, x)
        return x
    bounds = np.linspace(0, n_ch, min(threads, n_ch) + 1, dtype=int)
    with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
        futures = [
            pool.submit(
                _scan_lanes,
                seq.a_bar[:, lo:hi],
                seq.b_bar_u[:, lo:hi],
                x[:, lo:hi],
            )
            for lo, hi in zip(bounds[:-1], bounds[1:])
            if hi > lo
        ]
        for f in futures:
            f.result()
    return x


def scan_backward(a_bar: np.ndarray, x: np.ndarray, g_x: np.ndarray):
    """Adjoint of :func:`scan_states`: reverse-time recursion
    lambda_t = g_x[t] + a_bar[t+1] * lambda_{t+1}.

    Returns (g_a_bar, g_b_bar_u); g_b_bar_u[t] is lambda_t itself and
    g_a_bar[t] = lambda_t * x_{t-1} with x_{-1} = 0.
    """
    length = a_bar.shape[0]
    g_a_bar = np.zeros_like(a_bar)
    g_b_bar_u = np.empty_like(a_bar)
    lam = np.zeros(a_bar.shape[1:])
    for t in range(length - 1, -1, -1):
        if t == length - 1:
            lam = g_x[t].copy()
        else:
            lam = g_x[t] + a_bar[t + 1] * lam
        g_b_bar_u[t] = lam
        if t > 0:
            g_a_bar[t] = lam * x[t - 1]
    return g_a_bar, g_b_bar_u


def observe(h: np.ndarray, c: np.ndarray, d_skip: np.ndarray, u: np.ndarray) -> np.ndarray:
    """y_t[ch] = sum_n c[t,n] * h[t,ch,n] + d_skip[ch] * u[t,ch]."""
    if h.ndim != 3 or c.ndim != 2 or h.shape[0] != c.shape[0] or h.shape[2] != c.shape[1]:
        raise ShapeError(f"observe shape mismatch: h {h.shape}, c {c.shape}")
    if u.shape != h.shape[:2] or d_skip.shape != (h.shape[1],):
        raise ShapeError(f"observe shape mismatch: u {u.shape}, d {d_skip.shape}")
    return np.einsum("tcn,tn->tc", h, c) + d_skip * u


def observe_backward(h: np.ndarray, c: np.ndarray, d_skip: np.ndarray, u: np.ndarray, g_y: np.ndarray):
    """Adjoint of :func:`observe`; returns (g_h, g_c, g_d_skip, g_u)."""
    g_h = g_y[:, :, None] * c[:, None, :]
    g_c = np.einsum("tc,tcn->tn", g_y, h)
    g_d = np.einsum("tc,tc->c", g_y, u)
    g_u = g_y * d_skip
    return g_h, g_c, g_d, g_u


def ssm_forward(u: np.ndarray, p: SsmParams, kernel=None, grid=None, threads: int = 1) -> np.ndarray:
    """Full pipeline: project -> ZOH -> scan -> spatial state fusion -> observe.

    u: [L, C] with L = H * W for grid = (H, W). kernel is a
    :class:`~statefusion.fusion.FusionKernel` over the C channels (its taps
    are shared across the N state lanes of a channel), or None to skip the
    fusion stage entirely.
    """
    y, _ = ssm_layer_forward(u, p, kernel, grid, threads=threads)
    return y


def _zoh_phi_prime(z: np.ndarray) -> np.ndarray:
    """Derivative of the phi actually computed by the forward: the series
    branch differentiates the truncated polynomial, the closed branch the
    exact expression (e^z (z - 1) + 1) / z^2."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < ZOH_SERIES_SWITCH
    safe = np.where(small, 1.0, z)
    closed = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + z / 3.0
    return np.where(small, series, closed)


@dataclass
class SsmGrads:
    """Parameter gradients of one scan layer, mirroring SsmParams shapes.

    kernel_taps is None when the layer ran without a fusion kernel.
    """

    a_log: np.ndarray
    d_skip: np.ndarray
    w_delta: np.ndarray
    b_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    kernel_taps: np.ndarray | None


def ssm_layer_forward(u: np.ndarray, p: SsmParams, kernel=None, grid=None, threads: int = 1):
    """Forward pass keeping every intermediate needed by the adjoint.

    Returns (y, cache); feed the cache to :func:`ssm_layer_backward`.
    """
    pre_delta, delta, b, c, a, z, a_bar, phi, b_bar, b_bar_u = _discretize_full(u, p)
    seq = DiscreteSeq(a_bar=a_bar, b_bar=b_bar, b_bar_u=b_bar_u, c=c, delta=delta)
    x = scan_states(seq, threads=threads)

    lane_kernel = None
    if kernel is not None:
        if grid is None:
            raise ShapeError("grid (H, W) is required when a fusion kernel is given")
        height, width = grid
        if height * width != u.shape[0]:
            raise ShapeError(f"grid {height}x{width} does not match L={u.shape[0]}")
        from .fusion import sasf_apply  # local import to avoid a cycle

        lanes = x.reshape(u.shape[0], p.channels * p.n_state)
        lane_kernel = kernel.repeat_lanes(p.n_state)
        fused = sasf_apply(unflatten_scan_order(lanes, height, width), lane_kernel)
        h = flatten_scan_order(fused).reshape(x.shape)
    else:
        h = x
    y = observe(h, c, p.d_skip, u)
    cache = (u, p, pre_delta, delta, b, c, a, z, a_bar, phi, b_bar, x, h, lane_kernel, grid)
    return y, cache


def ssm_layer_backward(cache, g_y: np.ndarray):
    """Adjoint of :func:`ssm_layer_forward`; returns (g_u, SsmGrads)."""
    (u, p, pre_delta, delta, b, c, a, z, a_bar, phi, b_bar, x, h, lane_kernel, grid) = cache
    length = u.shape[0]

    g_h, g_c, g_d_skip, g_u = observe_backward(h, c, p.d_skip, u, g_y)

    if lane_kernel is not None:
        from .fusion import sasf_input_grad, sasf_kernel_grad

        height, width = grid
        n = p.n_state
        lanes_x = unflatten_scan_order(x.reshape(length, -1), height, width)
        lanes_g = unflatten_scan_order(g_h.reshape(length, -1), height, width)
        g_x_grid = sasf_input_grad(lanes_g, lane_kernel)
        g_x = flatten_scan_order(g_x_grid).reshape(x.shape)
        lane_tap_grads = sasf_kernel_grad(lanes_x, lanes_g, lane_kernel)
        # fold the n repeated sub-lanes of each channel back onto its taps
        n_dil = lane_tap_grads.shape[0]
        g_kernel = lane_tap_grads.reshape(n_dil, p.channels, n, 3, 3).sum(axis=2)
    else:
        g_x = g_h
        g_kernel = None

    g_a_bar, g_b_bar_u = scan_backward(a_bar, x, g_x)

    g_b_bar = g_b_bar_u * u[:, :, None]
    g_u += np.einsum("tcn,tcn->tc", g_b_bar_u, b_bar)

    # b_bar = delta * phi(z) * b ; a_bar = exp(z) ; z = delta * a
    g_delta = np.einsum("tcn,tcn->tc", g_b_bar, phi * b[:, None, :])
    g_phi = g_b_bar * delta[:, :, None] * b[:, None, :]
    g_b = np.einsum("tcn,tc->tn", g_b_bar * phi, delta)
    g_z = g_a_bar * a_bar + g_phi * _zoh_phi_prime(z)
    g_delta += np.einsum("tcn,cn->tc", g_z, a)
    g_a = np.einsum("tcn,tc->cn", g_z, delta)
    g_a_log = g_a * a  # d(-exp(a_log))/d(a_log) = a

    g_pre_delta = g_delta * _sigmoid(pre_delta)
    g_u += g_pre_delta @ p.w_delta.T
    g_u += g_b @ p.w_b.T
    g_u += g_c @ p.w_c.T

    grads = SsmGrads(
        a_log=g_a_log,
        d_skip=g_d_skip,
        w_delta=u.T @ g_pre_delta,
        b_delta=g_pre_delta.sum(axis=0),
        w_b=u.T @ g_b,
        w_c=u.T @ g_c,
        kernel_taps=g_kernel,
    )
    return g_u, grads


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))
