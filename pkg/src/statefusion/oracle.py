"""Structured-matrix forms of three sequence mixers.

Linear attention, the selective scan, and the fused spatial variant are all
y = M u for an L x L matrix M; they differ only in M's structure: strictly
lower triangular for the first two, neighborhood-adjacency for the third.
Materializing M is a correctness oracle for the O(L) recurrent paths, not a
production code path, so construction is capped at L = 1024.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pgm import write_pgm
from .ssm import DiscreteSeq
from .tensor import DomainError, ShapeError, write_csv

MAX_ORACLE_LEN = 1024

LOWER_TRIANGULAR = "lower_triangular"
ADJACENCY = "adjacency"
DENSE = "dense"


@dataclass
class StructuredMatrix:
    """L x L operator with a structural zero-pattern tag.

    row_bounds[i] is the largest column allowed to be nonzero in row i;
    required for the adjacency tag (it encodes max_k rho_k(i) over in-bounds
    neighbors), ignored otherwise.
    """

    size: int
    entries: np.ndarray
    structure: str = DENSE
    row_bounds: np.ndarray | None = None

    def __post_init__(self):
        if self.entries.shape != (self.size, self.size):
            raise ShapeError(
                f"entries shape {self.entries.shape} != ({self.size}, {self.size})"
            )

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.entries @ u


@dataclass
class StructureReport:
    structure: str
    ok: bool
    violations: list = field(default_factory=list)
    checked_decay: bool = False

    def describe(self) -> str:
        if self.ok:
            extra = " (row decay verified)" if self.checked_decay else ""
            return f"{self.structure}: ok{extra}"
        head = ", ".join(f"({i},{j})" for i, j in self.violations[:8])
        more = "" if len(self.violations) <= 8 else f" and {len(self.violations) - 8} more"
        return f"{self.structure}: {len(self.violations)} violation(s) at {head}{more}"


@dataclass
class AttentionSeq:
    """Query/key/value streams; q, k: [L, N], v: [L, C]."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.shape[0] == self.k.shape[0] == self.v.shape[0]):
            raise ShapeError("q, k, v disagree in sequence length")
        if self.q.shape[1] != self.k.shape[1]:
            raise ShapeError("q and k disagree in feature width")


def _check_len(length: int) -> None:
    if length > MAX_ORACLE_LEN:
        raise DomainError(
            f"matrix oracle capped at L={MAX_ORACLE_LEN}, got L={length}"
        )


def linear_attention_matrix(a: AttentionSeq) -> StructuredMatrix:
    """M[t][s] = q_t . k_s for s <= t; M @ v is causal linear attention."""
    length = a.q.shape[0]
    _check_len(length)
    entries = np.tril(a.q @ a.k.T)
    return StructuredMatrix(size=length, entries=entries, structure=LOWER_TRIANGULAR)


def linear_attention_recurrent(a: AttentionSeq) -> np.ndarray:
    """O(L) evaluation: state += k_t^T v_t, y_t = q_t state."""
    length, width = a.v.shape
    state = np.zeros((a.k.shape[1], width))
    out = np.empty((length, width))
    for t in range(length):
        state = state + np.outer(a.k[t], a.v[t])
        out[t] = a.q[t] @ state
    return out


def state_propagation_matrix(seq: DiscreteSeq, channel: int) -> np.ndarray:
    """S[t, j, n] = (prod_{i=j+1}^{t} a_bar[i]) * b_bar[j] for j <= t, else 0.

    The empty product at j = t is exactly 1, so the diagonal equals b_bar.
    Built by the row recurrence S[t] = a_bar[t] * S[t-1] (plus the diagonal),
    which reproduces the scan's own product ordering and is exact for
    degenerate factors like a_bar = 0.
    """
    length = seq.length
    _check_len(length)
    a_bar = seq.a_bar[:, channel, :]  # [L, N]
    b_bar = seq.b_bar[:, channel, :]
    n_state = a_bar.shape[1]
    s = np.zeros((length, length, n_state))
    s[0, 0] = b_bar[0]
    for t in range(1, length):
        s[t, :t] = a_bar[t] * s[t - 1, :t]
        s[t, t] = b_bar[t]
    return s


def mamba_matrix(seq: DiscreteSeq, channel: int = 0) -> StructuredMatrix:
    """M[t][s] = sum_n c[t,n] * A-product(s:t, n) * b_bar[s,n], lower triangular."""
    s = state_propagation_matrix(seq, channel)
    entries = np.einsum("tn,tjn->tj", seq.c, s)
    return StructuredMatrix(size=seq.length, entries=entries, structure=LOWER_TRIANGULAR)


def spatial_matrix(seq: DiscreteSeq, fusion: StructuredMatrix, channel: int = 0) -> StructuredMatrix:
    """Row-scale by c of (fusion adjacency @ state propagation).

    With the identity fusion matrix this reduces to :func:`mamba_matrix`
    exactly (same products, same summation order).
    """
    if fusion.size != seq.length:
        raise ShapeError(
            f"fusion matrix is {fusion.size}x{fusion.size}, sequence length is {seq.length}"
        )
    s = state_propagation_matrix(seq, channel)
    fused = np.einsum("tr,rjn->tjn", fusion.entries, s)
    entries = np.einsum("tn,tjn->tj", seq.c, fused)
    return StructuredMatrix(
        size=seq.length,
        entries=entries,
        structure=ADJACENCY,
        row_bounds=fusion.row_bounds,
    )


def check_structure(m: StructuredMatrix, monotone_rows: bool = False) -> StructureReport:
    """Verify the zero pattern implied by the structure tag.

    monotone_rows additionally checks |M[t][s]| is nondecreasing in s along
    each row; that decay pattern is only guaranteed when every a_bar lies in
    (0, 1] and b_bar, c are fixed and positive, so it is opt-in.
    """
    entries = m.entries
    violations: list[tuple[int, int]] = []
    if m.structure == LOWER_TRIANGULAR:
        bad = np.argwhere(np.triu(entries, k=1) != 0.0)
        violations.extend((int(i), int(j)) for i, j in bad)
    elif m.structure == ADJACENCY:
        if m.row_bounds is None:
            raise ValueError("adjacency check requires row_bounds metadata")
        cols = np.arange(m.size)[None, :]
        mask = cols > m.row_bounds[:, None]
        bad = np.argwhere(mask & (entries != 0.0))
        violations.extend((int(i), int(j)) for i, j in bad)
    elif m.structure != DENSE:
        raise ValueError(f"unknown structure tag {m.structure!r}")

    checked_decay = False
    if monotone_rows and m.structure == LOWER_TRIANGULAR:
        checked_decay = True
        mags = np.abs(entries)
        for t in range(m.size):
            row = mags[t, : t + 1]
            drops = np.argwhere(np.diff(row) < -1e-15)
            violations.extend((t, int(s)) for (s,) in drops)

    return StructureReport(
        structure=m.structure,
        ok=not violations,
        violations=violations,
        checked_decay=checked_decay,
    )


def normalized_abs(m: StructuredMatrix) -> np.ndarray:
    """|M| scaled to [0, 1] by its max; presentation-only transform."""
    mags = np.abs(m.entries)
    peak = mags.max()
    return mags / peak if peak > 0 else mags


def dump_matrix(m: StructuredMatrix, csv_path, pgm_path) -> None:
    """Write the raw entries as CSV and a max-normalized P2 graymap."""
    write_csv(csv_path, m.entries)
    write_pgm(pgm_path, normalized_abs(m))
