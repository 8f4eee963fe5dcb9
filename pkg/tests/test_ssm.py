import numpy as np
import pytest

from statefusion.fusion import identity_kernel, random_kernel
from statefusion.ssm import (
    DiscreteSeq,
    SsmParams,
    ZOH_SERIES_SWITCH,
    discretize,
    init_ssm_params,
    observe,
    project_selective_params,
    scan_states,
    ssm_forward,
    zoh_discretize,
)
from statefusion.tensor import DomainError, NumericError

# frozen high-precision evaluations of the closed form (30-digit arithmetic)
ZOH_A_BAR_REF = 0.367879441171442321595523770161
ZOH_B_BAR_REF = 0.948180838242836517606714344758
SOFTPLUS_ZERO = 0.693147180559945309417232121458


def _params_with(channels, n_state, **overrides):
    p = init_ssm_params(channels, n_state, rng=0)
    for name, value in overrides.items():
        setattr(p, name, np.asarray(value, dtype=np.float64))
    return p


def _random_case(rng, length, channels, n_state):
    u = rng.normal(size=(length, channels))
    p = init_ssm_params(channels, n_state, rng=rng)
    return u, p, discretize(u, p)


# ------------------------------------------------------------- projections

def test_delta_softplus_at_zero():
    p = _params_with(2, 1, b_delta=np.zeros(2))
    delta, _, _ = project_selective_params(np.zeros((3, 2)), p)
    assert np.allclose(delta, SOFTPLUS_ZERO, atol=1e-12)


def test_b_projection_identity_map():
    p = _params_with(1, 1, w_b=np.ones((1, 1)))
    _, b, _ = project_selective_params(np.array([[3.0]]), p)
    assert b[0, 0] == 3.0


def test_projections_match_naive_matvec():
    rng = np.random.default_rng(5)
    u = rng.normal(size=(6, 4))
    p = init_ssm_params(4, 3, rng=rng)
    delta, b, c = project_selective_params(u, p)
    for t in range(6):
        for n in range(3):
            want_b = sum(u[t, ch] * p.w_b[ch, n] for ch in range(4))
            want_c = sum(u[t, ch] * p.w_c[ch, n] for ch in range(4))
            assert abs(b[t, n] - want_b) <= 1e-12
            assert abs(c[t, n] - want_c) <= 1e-12
        for ch in range(4):
            pre = sum(u[t, j] * p.w_delta[j, ch] for j in range(4)) + p.b_delta[ch]
            assert abs(delta[t, ch] - np.logaddexp(0.0, pre)) <= 1e-12


def test_delta_always_positive():
    rng = np.random.default_rng(6)
    u = 50.0 * rng.normal(size=(20, 3))
    p = init_ssm_params(3, 1, rng=rng)
    delta, _, _ = project_selective_params(u, p)
    assert np.all(delta > 0)


def test_non_finite_input_rejected():
    p = init_ssm_params(2, 1, rng=0)
    bad = np.zeros((3, 2))
    bad[1, 0] = np.nan
    with pytest.raises(NumericError):
        project_selective_params(bad, p)


# ----------------------------------------------------------------- ZOH rule

def test_zoh_closed_form_log2():
    a_bar, b_bar = zoh_discretize(-1.0, 1.0, np.log(2.0))
    assert abs(a_bar - 0.5) <= 1e-12
    assert abs(b_bar - 0.5) <= 1e-12


def test_zoh_zero_interval():
    for a, b in ((-1.0, 1.0), (-3.5, -2.0), (-0.01, 7.0)):
        a_bar, b_bar = zoh_discretize(a, b, 0.0)
        assert a_bar == 1.0
        assert b_bar == 0.0


def test_zoh_frozen_high_precision_case():
    a_bar, b_bar = zoh_discretize(-2.0, 3.0, 0.5)
    assert abs(a_bar - ZOH_A_BAR_REF) <= 1e-12
    assert abs(b_bar - ZOH_B_BAR_REF) <= 1e-12


def test_zoh_series_branch_continuity():
    # the closed form just above the switch and the series just below it
    # must agree at the boundary
    for a in (-1.0, -0.5, -4.0):
        z = ZOH_SERIES_SWITCH
        delta_below = z / abs(a) * (1 - 1e-12)
        delta_above = z / abs(a) * (1 + 1e-12)
        _, b_below = zoh_discretize(a, 1.0, delta_below)
        _, b_above = zoh_discretize(a, 1.0, delta_above)
        assert abs(b_below - b_above) <= 1e-12


def test_zoh_series_limit_is_delta_b():
    _, b_bar = zoh_discretize(-1.0, 2.0, 1e-9)
    assert abs(b_bar - 2e-9) <= 1e-21


def test_zoh_rejects_nonnegative_a():
    with pytest.raises(DomainError):
        zoh_discretize(0.0, 1.0, 0.1)
    with pytest.raises(DomainError):
        zoh_discretize(1.0, 1.0, 0.1)
    with pytest.raises(DomainError):
        zoh_discretize(-1.0, 1.0, -0.1)


def test_discretize_a_bar_in_unit_interval():
    rng = np.random.default_rng(7)
    _, _, seq = _random_case(rng, 40, 3, 2)
    assert np.all(seq.a_bar > 0)
    assert np.all(seq.a_bar <= 1.0)
    assert np.all(seq.delta > 0)


# --------------------------------------------------------------------- scan

def test_scan_cumulative_sum():
    a_bar = np.ones((3, 1, 1))
    b_bar_u = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    seq = DiscreteSeq(a_bar, b_bar_u.copy(), b_bar_u, np.ones((3, 1)), np.ones((3, 1)))
    x = scan_states(seq)
    assert np.array_equal(x[:, 0, 0], [1.0, 3.0, 6.0])


def test_scan_forced_recurrence():
    a_bar = np.full((3, 1, 1), 0.5)
    b_bar_u = np.ones((3, 1, 1))
    seq = DiscreteSeq(a_bar, b_bar_u.copy(), b_bar_u, np.ones((3, 1)), np.ones((3, 1)))
    x = scan_states(seq)
    assert np.allclose(x[:, 0, 0], [1.0, 1.5, 1.75], atol=1e-15)


def test_scan_matches_unrolled_product_sum():
    # brute-force O(L^2) expansion with explicit transition products
    rng = np.random.default_rng(8)
    _, _, seq = _random_case(rng, 32, 2, 2)
    x = scan_states(seq)
    worst = 0.0
    for t in range(32):
        acc = np.zeros((2, 2))
        for s in range(t + 1):
            prod = np.ones((2, 2))
            for i in range(s + 1, t + 1):
                prod = prod * seq.a_bar[i]
            acc += prod * seq.b_bar_u[s]
        worst = max(worst, float(np.max(np.abs(acc - x[t]))))
    assert worst <= 1e-10


def test_scan_threads_match_single():
    rng = np.random.default_rng(9)
    _, _, seq = _random_case(rng, 64, 8, 2)
    assert np.array_equal(scan_states(seq), scan_states(seq, threads=4))


def test_scan_causality_exact():
    rng = np.random.default_rng(10)
    u, p, _ = _random_case(rng, 20, 3, 1)
    x = scan_states(discretize(u, p))
    u2 = u.copy()
    u2[12:] += rng.normal(size=(8, 3))  # perturb strictly after t = 11
    x2 = scan_states(discretize(u2, p))
    assert np.array_equal(x[:12], x2[:12])
    assert not np.array_equal(x[12:], x2[12:])


def test_scan_stability_bound():
    rng = np.random.default_rng(11)
    length = 64
    u, p, seq = _random_case(rng, length, 4, 1)
    x = scan_states(seq)
    bound = np.max(np.abs(seq.b_bar_u)) * length
    assert np.max(np.abs(x)) <= bound


def test_zero_selective_weights_time_invariant():
    # with all selective projections zeroed the system collapses to the
    # fixed filter y = D u: parameters constant in t and shift equivariant
    p = _params_with(
        2, 1,
        w_delta=np.zeros((2, 2)),
        w_b=np.zeros((2, 1)),
        w_c=np.zeros((2, 1)),
    )
    rng = np.random.default_rng(12)
    u = rng.normal(size=(10, 2))
    delta, b, c = project_selective_params(u, p)
    assert np.all(delta == delta[0])
    assert np.all(b == 0) and np.all(c == 0)
    y = ssm_forward(u, p)
    assert np.allclose(y, p.d_skip * u, atol=1e-15)
    shifted = np.roll(u, 3, axis=0)
    assert np.allclose(ssm_forward(shifted, p), np.roll(y, 3, axis=0), atol=1e-15)


# ------------------------------------------------------------------ observe

def test_observe_pure_residual():
    rng = np.random.default_rng(13)
    h = rng.normal(size=(5, 3, 2))
    u = rng.normal(size=(5, 3))
    d = rng.normal(size=3)
    y = observe(h, np.zeros((5, 2)), d, u)
    assert np.array_equal(y, d * u)


def test_observe_identity_readout():
    rng = np.random.default_rng(14)
    h = rng.normal(size=(5, 3, 1))
    y = observe(h, np.ones((5, 1)), np.zeros(3), np.zeros((5, 3)))
    assert np.array_equal(y, h[:, :, 0])


def test_observe_matches_elementwise_loop():
    rng = np.random.default_rng(15)
    h = rng.normal(size=(6, 4, 3))
    c = rng.normal(size=(6, 3))
    d = rng.normal(size=4)
    u = rng.normal(size=(6, 4))
    y = observe(h, c, d, u)
    for t in range(6):
        for ch in range(4):
            want = sum(c[t, n] * h[t, ch, n] for n in range(3)) + d[ch] * u[t, ch]
            assert abs(y[t, ch] - want) <= 1e-12


# ----------------------------------------------------------- full pipeline

def test_identity_kernel_equals_plain_pipeline():
    rng = np.random.default_rng(16)
    u, p, seq = _random_case(rng, 24, 4, 2)
    plain = observe(scan_states(seq), seq.c, p.d_skip, u)
    fused = ssm_forward(u, p, identity_kernel(4), (4, 6))
    assert np.max(np.abs(plain - fused)) <= 1e-12


def test_single_pixel_grid_center_tap_scaling():
    rng = np.random.default_rng(17)
    u, p, seq = _random_case(rng, 1, 3, 1)
    kernel = identity_kernel(3)
    kernel.weights[:, :, 1, 1] = 0.0
    kernel.weights[0, :, 1, 1] = 0.7  # only in-bounds tap on a 1x1 grid
    x = scan_states(seq)
    want = observe(0.7 * x, seq.c, p.d_skip, u)
    got = ssm_forward(u, p, kernel, (1, 1))
    assert np.max(np.abs(got - want)) <= 1e-12


def test_pipeline_equals_matrix_oracle_on_grid():
    from statefusion.fusion import fusion_adjacency
    from statefusion.oracle import spatial_matrix

    rng = np.random.default_rng(18)
    u, p, seq = _random_case(rng, 16, 2, 1)
    kernel = random_kernel(2, (1, 3), rng=rng)
    y = ssm_forward(u, p, kernel, (4, 4))
    for ch in range(2):
        f = fusion_adjacency(kernel, 4, 4, channel=ch)
        m = spatial_matrix(seq, f, channel=ch)
        want = m.apply(u[:, ch]) + p.d_skip[ch] * u[:, ch]
        assert np.max(np.abs(want - y[:, ch])) <= 1e-9


def test_selectivity_changes_parameters():
    rng = np.random.default_rng(19)
    u, p, _ = _random_case(rng, 8, 3, 2)
    delta, b, c = project_selective_params(u, p)
    u2 = u.copy()
    u2[4] += 1.0
    d2, b2, c2 = project_selective_params(u2, p)
    assert not np.array_equal(delta[4], d2[4])
    assert not np.array_equal(b[4], b2[4])
    assert not np.array_equal(c[4], c2[4])
    # untouched steps are untouched
    assert np.array_equal(delta[:4], d2[:4])


def test_grid_mismatch_rejected():
    rng = np.random.default_rng(20)
    u, p, _ = _random_case(rng, 16, 2, 1)
    from statefusion.tensor import ShapeError

    with pytest.raises(ShapeError):
        ssm_forward(u, p, identity_kernel(2), (3, 4))
