"""Wall-clock contrast of the O(L) recurrent paths against their O(L^2)
matrix materializations, and of separate vs merged fusion kernels.

Every benchmark first proves the two paths numerically equivalent; a
disagreement aborts before any timing is reported. Timings are medians of
repeated runs with warmup excluded — no absolute-speed assertions, machines
vary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fusion import apply_merged, merge_dilated_kernels, random_kernel, sasf_apply
from .oracle import mamba_matrix
from .ssm import discretize, init_ssm_params, observe, scan_states


class EquivalenceError(ValueError):
    """The two evaluation paths of one benchmark disagree numerically."""


@dataclass
class BenchReport:
    op: str
    size: str
    channels: int
    repetitions: int
    median_ns: int
    throughput: float  # output elements per second

    def row(self) -> list[str]:
        return [
            self.op,
            self.size,
            str(self.channels),
            str(self.repetitions),
            str(self.median_ns),
            f"{self.throughput:.3e}",
        ]


def _time_median_ns(fn, repetitions: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return int(np.median(samples))


def bench_scan_vs_matrix(lengths, channels: int = 4, n_state: int = 1,
                         repetitions: int = 10, warmup: int = 3, seed: int = 42,
                         threads: int = 1, corrupt: bool = False) -> list[BenchReport]:
    """Per length: the sequential scan vs the materialized L x L operator.

    Both evaluate the same input-to-output map (skip term excluded); they
    must agree to 1e-9 before either is timed. threads > 1 adds a row for
    the parallel-lane scan variant.
    """
    if repetitions < 10:
        raise ValueError("repetitions must be at least 10")
    rng = np.random.default_rng(seed)
    reports = []
    for length in lengths:
        u = rng.normal(0.0, 1.0, size=(length, channels))
        params = init_ssm_params(channels, n_state, rng=rng)
        zero_d = np.zeros(channels)

        def scan_path(u=u, params=params, zero_d=zero_d, threads=1):
            seq = discretize(u, params)
            x = scan_states(seq, threads=threads)
            return observe(x, seq.c, zero_d, u)

        def matrix_path(u=u, params=params):
            seq = discretize(u, params)
            out = np.empty_like(u)
            for ch in range(u.shape[1]):
                out[:, ch] = mamba_matrix(seq, ch).apply(u[:, ch])
            return out

        y_scan = scan_path()
        y_matrix = matrix_path()
        if corrupt:
            y_matrix = y_matrix + 1e-3
        gap = np.max(np.abs(y_scan - y_matrix))
        if gap > 1e-9:
            raise EquivalenceError(
                f"scan and matrix paths disagree at L={length}: max abs {gap:.3e}"
            )

        elements = length * channels
        for op, fn in (("scan", scan_path), ("matrix", matrix_path)):
            ns = _time_median_ns(fn, repetitions, warmup)
            reports.append(BenchReport(op, str(length), channels, repetitions, ns,
                                       elements / (ns * 1e-9)))
        if threads > 1:
            fn = lambda: scan_path(threads=threads)  # noqa: E731
            ns = _time_median_ns(fn, repetitions, warmup)
            reports.append(BenchReport(f"scan_threads{threads}", str(length), channels,
                                       repetitions, ns, elements / (ns * 1e-9)))
    return reports


def bench_sasf_merge(grids, channels: int = 8, dilations=(1, 3, 5),
                     repetitions: int = 10, warmup: int = 3, seed: int = 42,
                     identity: bool = False, corrupt: bool = False) -> list[BenchReport]:
    """Separate dilated applications vs the single merged kernel per grid."""
    if repetitions < 10:
        raise ValueError("repetitions must be at least 10")
    from .fusion import identity_kernel

    rng = np.random.default_rng(seed)
    reports = []
    for height, width in grids:
        kernel = (identity_kernel(channels, dilations) if identity
                  else random_kernel(channels, dilations, rng=rng))
        merged = merge_dilated_kernels(kernel)
        x = rng.normal(0.0, 1.0, size=(height, width, channels))

        separate = lambda: sasf_apply(x, kernel)  # noqa: E731
        fused = lambda: apply_merged(x, merged)  # noqa: E731

        y_sep = separate()
        y_merged = fused()
        if corrupt:
            y_merged = y_merged + 1e-3
        gap = np.max(np.abs(y_sep - y_merged))
        if gap > 1e-12:
            raise EquivalenceError(
                f"separate and merged kernels disagree on {height}x{width}: max abs {gap:.3e}"
            )

        elements = height * width * channels
        for op, fn in (("sasf_separate", separate), ("sasf_merged", fused)):
            ns = _time_median_ns(fn, repetitions, warmup)
            reports.append(BenchReport(op, f"{height}x{width}", channels, repetitions,
                                       ns, elements / (ns * 1e-9)))
    return reports


HEADER = ["op", "size", "channels", "repetitions", "median_ns", "throughput_eps"]


def report_csv(reports: list[BenchReport], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(HEADER) + "\n")
        for r in reports:
            fh.write(",".join(r.row()) + "\n")


def report_table(reports: list[BenchReport]) -> str:
    rows = [HEADER] + [r.row() for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(HEADER))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
