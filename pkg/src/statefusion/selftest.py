"""Named invariant checks runnable without pytest (the CLI `selftest`).

Each check raises CheckFailure with a diagnostic on violation. The corrupt
hook exists so the negative path (a check that must fail and be named) can
be exercised end to end.
"""

from __future__ import annotations

import numpy as np

from . import fusion, model, oracle, ssm, train
from .tensor import flatten_scan_order, unflatten_scan_order


class CheckFailure(AssertionError):
    pass


def _require(cond: bool, detail: str) -> None:
    if not cond:
        raise CheckFailure(detail)


def _random_seq(rng, length, channels, n_state):
    u = rng.normal(0.0, 1.0, size=(length, channels))
    params = ssm.init_ssm_params(channels, n_state, rng=rng)
    return u, params, ssm.discretize(u, params)


def check_tensor_roundtrip(_):
    rng = np.random.default_rng(7)
    grid = rng.normal(size=(3, 4, 2))
    back = unflatten_scan_order(flatten_scan_order(grid), 3, 4)
    _require(np.array_equal(back, grid), "flatten/unflatten round trip not exact")


def check_zoh_closed_form(_):
    a_bar, b_bar = ssm.zoh_discretize(-1.0, 1.0, np.log(2.0))
    _require(abs(a_bar - 0.5) <= 1e-12 and abs(b_bar - 0.5) <= 1e-12,
             f"closed form off: {a_bar}, {b_bar}")
    a_bar, b_bar = ssm.zoh_discretize(-3.0, 2.0, 0.0)
    _require(a_bar == 1.0 and b_bar == 0.0, "zero-interval limit violated")


def check_zoh_series_continuity(_):
    a = -1.0
    z = ssm.ZOH_SERIES_SWITCH
    _, b_below = ssm.zoh_discretize(a, 1.0, z * (1 - 1e-12))
    _, b_above = ssm.zoh_discretize(a, 1.0, z * (1 + 1e-12))
    _require(abs(b_below - b_above) <= 1e-12,
             f"series switch discontinuity: {abs(b_below - b_above):.3e}")


def check_scan_vs_unrolled(_):
    rng = np.random.default_rng(11)
    _, _, seq = _random_seq(rng, 32, 3, 2)
    x = ssm.scan_states(seq)
    # brute-force unrolled sum with explicit transition products
    worst = 0.0
    for t in range(32):
        total = np.zeros((3, 2))
        for s in range(t + 1):
            prod = np.ones((3, 2))
            for i in range(s + 1, t + 1):
                prod = prod * seq.a_bar[i]
            total += prod * seq.b_bar_u[s]
        worst = max(worst, np.max(np.abs(total - x[t])))
    _require(worst <= 1e-10, f"scan vs unrolled sum deviates by {worst:.3e}")


def check_identity_kernel_reduction(_):
    rng = np.random.default_rng(3)
    u, params, seq = _random_seq(rng, 24, 4, 1)
    plain = ssm.observe(ssm.scan_states(seq), seq.c, params.d_skip, u)
    fused = ssm.ssm_forward(u, params, fusion.identity_kernel(4), (4, 6))
    gap = np.max(np.abs(plain - fused))
    _require(gap <= 1e-12, f"identity fusion changed the output by {gap:.3e}")


def check_sasf_vs_naive(_):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 7, 2))
    kernel = fusion.random_kernel(2, (1, 3), rng=rng)
    got = fusion.sasf_apply(x, kernel)
    want = np.zeros_like(x)
    for h in range(5):
        for w in range(7):
            for di, d in enumerate(kernel.dilations):
                for i in (-1, 0, 1):
                    for j in (-1, 0, 1):
                        hh, ww = h + i * d, w + j * d
                        if 0 <= hh < 5 and 0 <= ww < 7:
                            want[h, w] += kernel.weights[di, :, i + 1, j + 1] * x[hh, ww]
    gap = np.max(np.abs(got - want))
    _require(gap <= 1e-12, f"sasf vs direct loop deviates by {gap:.3e}")


def check_merge_equivalence(corrupt):
    rng = np.random.default_rng(13)
    x = rng.normal(size=(9, 8, 3))
    kernel = fusion.random_kernel(3, (1, 3, 5), rng=rng)
    merged = fusion.merge_dilated_kernels(kernel)
    if corrupt == "merge":
        merged.weights[0, 0, 0] += 1e-3
    gap = np.max(np.abs(fusion.apply_merged(x, merged) - fusion.sasf_apply(x, kernel)))
    _require(gap <= 1e-12, f"merged kernel deviates from separate by {gap:.3e}")


def check_adjacency_vs_direct(_):
    rng = np.random.default_rng(17)
    x = rng.normal(size=(4, 4, 2))
    kernel = fusion.random_kernel(2, (1, 3), rng=rng)
    fused = fusion.sasf_apply(x, kernel)
    for ch in range(2):
        f = fusion.fusion_adjacency(kernel, 4, 4, channel=ch)
        gap = np.max(np.abs(f.apply(x[:, :, ch].reshape(-1)) - fused[:, :, ch].reshape(-1)))
        _require(gap <= 1e-12, f"adjacency matrix deviates on channel {ch} by {gap:.3e}")


def check_attention_prefix_sum(_):
    rng = np.random.default_rng(19)
    v = rng.normal(size=(12, 3))
    seq = oracle.AttentionSeq(q=np.ones((12, 1)), k=np.ones((12, 1)), v=v)
    got = oracle.linear_attention_matrix(seq).apply(v)
    _require(np.array_equal(got, np.cumsum(v, axis=0)),
             "all-ones attention is not exactly a prefix sum")


def check_attention_recurrence(_):
    rng = np.random.default_rng(23)
    seq = oracle.AttentionSeq(
        q=rng.normal(size=(16, 4)), k=rng.normal(size=(16, 4)), v=rng.normal(size=(16, 3))
    )
    gap = np.max(np.abs(oracle.linear_attention_matrix(seq).apply(seq.v)
                        - oracle.linear_attention_recurrent(seq)))
    _require(gap <= 1e-10, f"attention matrix vs recurrence deviates by {gap:.3e}")


def check_mamba_vs_scan(_):
    rng = np.random.default_rng(29)
    u, params, seq = _random_seq(rng, 32, 3, 2)
    y = ssm.observe(ssm.scan_states(seq), seq.c, np.zeros(3), u)
    for ch in range(3):
        got = oracle.mamba_matrix(seq, ch).apply(u[:, ch])
        gap = np.max(np.abs(got - y[:, ch]))
        _require(gap <= 1e-9, f"matrix form deviates from scan on channel {ch}: {gap:.3e}")


def check_spatial_vs_pipeline(_):
    rng = np.random.default_rng(31)
    u, params, seq = _random_seq(rng, 16, 2, 1)
    kernel = fusion.random_kernel(2, (1, 3), rng=rng)
    y = ssm.ssm_forward(u, params, kernel, (4, 4))
    for ch in range(2):
        f = fusion.fusion_adjacency(kernel, 4, 4, channel=ch)
        m = oracle.spatial_matrix(seq, f, ch)
        got = m.apply(u[:, ch]) + params.d_skip[ch] * u[:, ch]
        gap = np.max(np.abs(got - y[:, ch]))
        _require(gap <= 1e-9, f"spatial matrix deviates on channel {ch}: {gap:.3e}")


def check_identity_fusion_collapse(_):
    rng = np.random.default_rng(37)
    _, _, seq = _random_seq(rng, 12, 2, 2)
    ident = fusion.fusion_adjacency(fusion.identity_kernel(2, (1,)), 3, 4, channel=0)
    spatial = oracle.spatial_matrix(seq, ident, 0)
    mamba = oracle.mamba_matrix(seq, 0)
    _require(np.array_equal(spatial.entries, mamba.entries),
             "identity-fusion spatial matrix != plain matrix")


def check_structure_tags(_):
    rng = np.random.default_rng(41)
    u, params, seq = _random_seq(rng, 12, 2, 1)
    m = oracle.mamba_matrix(seq, 0)
    _require(oracle.check_structure(m).ok, "plain matrix failed the triangular check")
    kernel = fusion.identity_kernel(2, (1,))
    kernel.weights[0, :, 1, 2] = 0.5  # right neighbor
    f = fusion.fusion_adjacency(kernel, 3, 4, channel=0)
    sm = oracle.spatial_matrix(seq, f, 0)
    above = np.triu(sm.entries, k=1)
    _require(np.any(above != 0), "right-neighbor fusion produced no forward mixing")
    _require(oracle.check_structure(sm).ok, "spatial matrix failed the adjacency check")
    corrupted = oracle.StructuredMatrix(m.size, m.entries.copy(), oracle.LOWER_TRIANGULAR)
    corrupted.entries[0, m.size - 1] = 1.0
    report = oracle.check_structure(corrupted)
    _require(not report.ok and (0, m.size - 1) in report.violations,
             "planted violation was not reported")


def check_model_shape_chain(_):
    cfg = model.ModelConfig()
    weights = model.init_weights(cfg, seed=0)
    img = np.random.default_rng(43).normal(size=(16, 16, 3))
    logits = model.model_forward(img, cfg, weights)
    _require(logits.shape == (cfg.num_classes,) and np.all(np.isfinite(logits)),
             "model forward produced a bad logits vector")


def check_identity_fusion_block(_):
    cfg = model.BlockConfig(channels=4)
    weights: dict = {}
    model.init_block_weights(weights, "", cfg, np.random.default_rng(47))
    x = np.random.default_rng(48).normal(size=(4, 4, 4))
    with_fusion = model.block_forward(x, weights, cfg, "", use_fusion=True)
    without = model.block_forward(x, weights, cfg, "", use_fusion=False)
    gap = np.max(np.abs(with_fusion - without))
    _require(gap <= 1e-12, f"identity-fusion block deviates from fusion-free by {gap:.3e}")


def check_fd_scan_observe(_):
    rng = np.random.default_rng(53)
    channels, n_state, length = 2, 1, 6
    params = ssm.init_ssm_params(channels, n_state, rng=rng)
    u0 = rng.normal(size=(length, channels))
    probe = rng.normal(size=(length, channels))

    def f(u):
        return float(np.sum(ssm.ssm_forward(u, params) * probe))

    _, cache = ssm.ssm_layer_forward(u0, params)
    g_u, _ = ssm.ssm_layer_backward(cache, probe)
    err = train.fd_check(f, u0, g_u)
    _require(err <= 1e-6, f"scan/observe fd mismatch: rel err {err:.3e}")


def check_sasf_transpose(_):
    rng = np.random.default_rng(59)
    g = rng.normal(size=(4, 5, 1))
    # single tap: one product per entry, so both evaluations are bit-equal
    single = fusion.identity_kernel(1, (1,))
    single.weights[0, :, 1, 1] = 0.0
    single.weights[0, :, 2, 1] = 0.8
    f1 = fusion.fusion_adjacency(single, 4, 5, channel=0)
    direct = fusion.sasf_input_grad(g, single)[:, :, 0].reshape(-1)
    _require(np.array_equal(direct, f1.entries.T @ g[:, :, 0].reshape(-1)),
             "single-tap fusion input gradient is not exactly F^T upstream")
    # dense taps: identical terms, different summation order -> round-off only
    kernel = fusion.random_kernel(1, (1, 3), rng=rng)
    f = fusion.fusion_adjacency(kernel, 4, 5, channel=0)
    direct = fusion.sasf_input_grad(g, kernel)[:, :, 0].reshape(-1)
    gap = np.max(np.abs(direct - f.entries.T @ g[:, :, 0].reshape(-1)))
    _require(gap <= 1e-13, f"fusion input gradient deviates from F^T by {gap:.3e}")


def check_erf_causality(_):
    rng = np.random.default_rng(61)
    img = rng.normal(size=(6, 6, 3))
    layer = train.make_scan_image_layer(channels=4, seed=7, kernel=None)
    emap = train.erf_map(layer, img, center=(2, 3))
    flat = emap.reshape(-1)
    t_center = 2 * 6 + 3
    _require(np.all(flat[t_center + 1 :] == 0.0),
             "fusion-free receptive field leaks past the center in scan order")
    kernel = fusion.identity_kernel(4, (1,))
    kernel.weights[0, :, 1, 2] = 0.7
    layer.kernel = kernel
    emap2 = train.erf_map(layer, img, center=(2, 3))
    _require(np.any(emap2.reshape(-1)[t_center + 1 :] != 0.0),
             "right-neighbor fusion did not extend the receptive field forward")


CHECKS = [
    ("tensor.roundtrip", check_tensor_roundtrip),
    ("ssm.zoh-closed-form", check_zoh_closed_form),
    ("ssm.zoh-series-continuity", check_zoh_series_continuity),
    ("ssm.scan-vs-unrolled", check_scan_vs_unrolled),
    ("ssm.identity-kernel-reduction", check_identity_kernel_reduction),
    ("fusion.sasf-vs-naive", check_sasf_vs_naive),
    ("fusion.merge-equivalence", check_merge_equivalence),
    ("fusion.adjacency-vs-direct", check_adjacency_vs_direct),
    ("oracle.attention-prefix-sum", check_attention_prefix_sum),
    ("oracle.attention-recurrence", check_attention_recurrence),
    ("oracle.mamba-vs-scan", check_mamba_vs_scan),
    ("oracle.spatial-vs-pipeline", check_spatial_vs_pipeline),
    ("oracle.identity-fusion-collapse", check_identity_fusion_collapse),
    ("oracle.structure-tags", check_structure_tags),
    ("model.shape-chain", check_model_shape_chain),
    ("model.identity-fusion-block", check_identity_fusion_block),
    ("train.fd-scan-observe", check_fd_scan_observe),
    ("train.sasf-transpose", check_sasf_transpose),
    ("train.erf-causality", check_erf_causality),
]


def run_checks(name_filter: str | None = None, corrupt: str | None = None,
               emit=print) -> bool:
    """Run all (or filtered) checks; prints one pass/fail line per check."""
    selected = [(n, fn) for n, fn in CHECKS if not name_filter or name_filter in n]
    if not selected:
        emit(f"no checks match filter {name_filter!r}")
        return False
    all_ok = True
    for name, fn in selected:
        try:
            fn(corrupt)
        except CheckFailure as exc:
            emit(f"FAIL {name} ({exc})")
            all_ok = False
        except Exception as exc:  # noqa: BLE001 - a crash is a failure with detail
            emit(f"FAIL {name} (unexpected {type(exc).__name__}: {exc})")
            all_ok = False
        else:
            emit(f"PASS {name}")
    return all_ok
