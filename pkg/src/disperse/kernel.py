"""Single-queue dispersion kernel.

Joint law of (departures in the probe window, arrivals between the probes)
and the separation laws it induces, for lowest-priority probes (queued
after their slot's batch) and equal-priority probes (uniform position in
the batch).

Tables are indexed ``table[l, j]``: ``l`` departures, ``j`` arrivals.
Columns are truncated at ``j_max``; truncation is exact for the retained
cells because every recursion step only reads lower or equal ``j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import TruncationError, UsageError
from .prob import (
    EARLY,
    LATE,
    Limits,
    Pmf,
    SeparationDist,
    StationaryDist,
    position_split_pmf,
)

log = logging.getLogger(__name__)

ZERO = "zero"  # Q_0 = 0
SHIFTED = "q"  # Q_0 = q (or q + a for equal priority)
UNCONDITIONED = "uncond"
EQ_ZERO = "eq-zero"  # Q_0 = A_0 = 0, columns index A'_{1,m+1}
EQ_SHIFTED = "eq-qa"
EQ_UNCONDITIONED = "eq-uncond"  # columns index the bar-A count

LOWEST = "lowest"
EQUAL = "equal"
PRIORITIES = (LOWEST, EQUAL)


@dataclass(frozen=True, eq=False)
class JointTable:
    """P{departures = l, arrivals = j} over a probe window.

    For the lowest-priority variants the window is slots 0..m-1 (rows
    0..m); for the equal-priority variants it is slots 0..m (rows 0..m+1).
    ``leakage`` is mass known to be missing (occupancy tail not folded in).
    """

    m: int
    table: np.ndarray
    variant: str
    shift: int = 0
    leakage: float = 0.0

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        t.flags.writeable = False
        object.__setattr__(self, "table", t)

    @property
    def n_slots(self) -> int:
        return self.table.shape[0] - 1

    @property
    def j_max(self) -> int:
        return self.table.shape[1] - 1

    def arrivals_marginal(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def csv_rows(self):
        ls, js = np.nonzero(self.table)
        return [(int(l), int(j), float(self.table[l, j])) for l, j in zip(ls, js)]


def _toeplitz(p: np.ndarray) -> np.ndarray:
    """T[n, j] = p[j - n] for j >= n (convolution with p as a right matmul)."""
    n = p.size
    idx = np.arange(n)[None, :] - np.arange(n)[:, None]
    return np.where(idx >= 0, p[np.clip(idx, 0, None)], 0.0)


def iter_joint_zero(arrival: Pmf, m_max: int, j_max: int):
    """Yield the zero-initial tables for m = 1..m_max, each built from the last."""
    if m_max < 1:
        raise ValueError("probe spacing m must be >= 1")
    p = arrival.padded(j_max)
    toe = _toeplitz(p)
    cols = np.arange(j_max + 1)
    cur = np.zeros((2, j_max + 1))
    cur[1] = p
    yield 1, cur
    for m in range(2, m_max + 1):
        new = np.zeros((m + 1, j_max + 1))
        # slot m-1 departs: previous count l-1, needs n >= l-1 arrivals so far
        keep = cols[None, :] >= np.arange(m)[:, None]
        new[1:] = (cur * keep) @ toe
        # slot m-1 idle: previous count l with exactly l-1 arrivals so far
        for l in range(1, min(m - 1, j_max + 1) + 1):
            c = cur[l, l - 1]
            if c:
                new[l, l - 1 :] += c * p[: j_max + 2 - l]
        cur = new
        yield m, cur


def joint_zero(arrival: Pmf, m: int, j_max: int) -> JointTable:
    """P{X^0_{0,m-1} = l, A_{1,m} = j}: empty queue when the first probe arrives."""
    if m < 1:
        raise ValueError("probe spacing m must be >= 1")
    for _, t in iter_joint_zero(arrival, m, j_max):
        pass
    return JointTable(m, t, ZERO)


def _shift_rows(zero: np.ndarray, shift: int) -> np.ndarray:
    """Departures table with ``shift`` extra packets queued ahead at the start.

    Extra backlog adds departures one-for-one until every slot is busy,
    so X^s = min(X^0 + s, slots).
    """
    M = zero.shape[0] - 1
    out = np.zeros_like(zero)
    if shift < M:
        out[shift + 1 : M] = zero[1 : M - shift]
    out[M] = zero[max(M - shift, 0) :].sum(axis=0)
    return out


def transform_joint(zero_table: JointTable, q: int) -> JointTable:
    """P{X^q_{0,m-1} = l, A_{1,m} = j} from the zero-initial table."""
    if zero_table.variant != ZERO:
        raise UsageError(f"transform_joint needs a zero-initial table, got {zero_table.variant!r}")
    if q < 0:
        raise ValueError("q must be >= 0")
    if q == 0:
        return zero_table
    return JointTable(zero_table.m, _shift_rows(zero_table.table, q), SHIFTED, q)


def transform_joint_equal_priority(zero_table: JointTable, q: int, a: int) -> JointTable:
    """Equal-priority analogue: initial backlog q plus a same-slot arrivals."""
    if zero_table.variant != EQ_ZERO:
        raise UsageError(
            f"transform_joint_equal_priority needs an equal-priority zero table, got {zero_table.variant!r}")
    if q < 0 or a < 0:
        raise ValueError("q and a must be >= 0")
    if q + a == 0:
        return zero_table
    return JointTable(zero_table.m, _shift_rows(zero_table.table, q + a), EQ_SHIFTED, q + a)


def _mix_rows(zero: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_r weights[r] * _shift_rows(zero, r), computed as two matmuls."""
    M = zero.shape[0] - 1
    w = np.zeros(max(weights.size, M + 1))
    w[: weights.size] = weights
    out = np.empty_like(zero)
    l = np.arange(M)[:, None]
    t = np.arange(M + 1)[None, :]
    d = l - t
    mix = np.where(d >= 0, w[np.clip(d, 0, None)], 0.0)
    out[:M] = mix @ zero
    # saturated row: shift r counts row t whenever t >= M - r
    w_sat = np.empty(M + 1)
    w_sat[0] = w[M:].sum()
    w_sat[1:] = w[M - 1 :: -1][: M]
    out[M] = np.cumsum(w_sat) @ zero
    return out


def _folded_pi(stationary: StationaryDist, slots: int):
    """Occupancy weights with the tail beyond n1 placed where it is exact.

    Any backlog q >= slots - 1 saturates the window, so the tail mass can be
    put on q = n1 + 1 without error provided n1 + 1 >= slots - 1.
    """
    pi = np.asarray(stationary.pi)
    tail = stationary.tail_mass
    if pi.size >= slots - 1:
        return np.append(pi, tail), 0.0
    return pi, tail


def joint_unconditioned(arrival: Pmf, stationary: StationaryDist, m: int, j_max: int,
                        zero: JointTable | None = None) -> JointTable:
    """P{X_{0,m-1} = l, A_{1,m} = j} averaged over the stationary backlog."""
    if stationary.convention != LATE:
        raise UsageError("lowest-priority probes need the late-observation occupancy law")
    if zero is None:
        zero = joint_zero(arrival, m, j_max)
    w, leak = _folded_pi(stationary, m)
    return JointTable(m, _mix_rows(zero.table, w), UNCONDITIONED, leakage=leak)


def _antidiagonal(table: np.ndarray, spacing: int, n3: int) -> np.ndarray:
    """Output law from a joint table: s = spacing + 1 + j - l, s = 1..n3."""
    out = np.zeros(n3)
    for l in range(1, table.shape[0]):
        start = spacing - l  # s - 1 for j = 0
        lo = max(start, 0)
        if lo >= n3:
            continue
        j0 = lo - start
        take = min(n3 - lo, table.shape[1] - j0)
        if take > 0:
            out[lo : lo + take] += table[l, j0 : j0 + take]
    return out


def _default_jmax(n3: int) -> int:
    # with l <= m departures, s <= n3 never reads an arrival count above n3 - 1
    return n3


def conditional_output_dist(arrival: Pmf, stationary: StationaryDist, m: int, n3: int) -> SeparationDist:
    """P{d_o = s | d_i = m} for s = 1..n3 (lowest-priority probes)."""
    if m < 1 or n3 < 1:
        raise ValueError("m and n3 must be >= 1")
    u = joint_unconditioned(arrival, stationary, m, _default_jmax(n3))
    return SeparationDist(_antidiagonal(u.table, m, n3), leakage=u.leakage)


def conditional_matrix(arrival: Pmf, stationary: StationaryDist, m_max: int, n3: int,
                       priority: str = LOWEST) -> np.ndarray:
    """Rows m = 1..m_max of P{d_o = s | d_i = m}, s = 1..n3, in one sweep."""
    if priority == EQUAL:
        return _conditional_matrix_equal(arrival, stationary, m_max, n3)
    if stationary.convention != LATE:
        raise UsageError("lowest-priority probes need the late-observation occupancy law")
    j_max = _default_jmax(n3)
    out = np.zeros((m_max, n3))
    for m, zero in iter_joint_zero(arrival, m_max, j_max):
        w, _ = _folded_pi(stationary, m)
        out[m - 1] = _antidiagonal(_mix_rows(zero, w), m, n3)
    return out


def _check_input(input_sep: SeparationDist, n2: int, tol: float) -> np.ndarray:
    above = float(input_sep.mass[max(0, n2 + 1 - input_sep.offset):].sum())
    if above >= tol:
        raise TruncationError(
            f"input separation has mass {above:.3g} above n2={n2}", stage=0, lost=above)
    return input_sep.vector(n2)


def _finish(raw: np.ndarray, upstream: float = 0.0) -> SeparationDist:
    total = raw.sum()
    if total <= 0:
        raise TruncationError("no output mass left inside the truncation window", lost=1.0)
    factor = 1.0 / total
    lost = upstream + (1.0 - total)
    if abs(factor - 1.0) > 1e-12:
        log.debug("renormalized output distribution by %.6g", factor)
    return SeparationDist(raw * factor, leakage=max(lost, 0.0), renorm=factor)


def output_dist(arrival: Pmf, input_sep: SeparationDist, n2: int, n3: int,
                stationary: StationaryDist | None = None, n1: int | None = None,
                tail_tol: float = 1e-6) -> SeparationDist:
    """Output separation law for a given input law (lowest-priority probes).

    The result is renormalized once; the factor and the lost mass are
    reported on the returned distribution.
    """
    from .prob import stationary_dist

    vec = _check_input(input_sep, n2, tail_tol)
    if stationary is None:
        stationary = stationary_dist(arrival, n1 if n1 is not None else n2, LATE)
    m_max = int(np.flatnonzero(vec)[-1]) + 1 if vec.any() else 1
    k = conditional_matrix(arrival, stationary, m_max, n3, LOWEST)
    raw = vec[:m_max] @ k
    return _finish(raw, getattr(input_sep, 'leakage', 0.0))


# ---------------------------------------------------------------- equal priority

def iter_joint_zero_equal_priority(arrival: Pmf, m_max: int, j_max: int):
    """Yield (m, P{X^{0,0}_{0,m} = l, A_{1,m} = j}) for m = 0..m_max.

    The base case m = 0 is the lone probe departing in slot 0 with the empty
    arrival sum A_{1,0} = 0.
    """
    p = arrival.padded(j_max)
    toe = _toeplitz(p)
    cols = np.arange(j_max + 1)
    cur = np.zeros((2, j_max + 1))
    cur[1, 0] = 1.0
    yield 0, cur
    for m in range(1, m_max + 1):
        new = np.zeros((m + 2, j_max + 1))
        # slot m departs: previous count l-1 and n >= l-2 earlier arrivals
        keep = cols[None, :] >= np.arange(m + 1)[:, None] - 1
        new[1:] = (cur * keep) @ toe
        # ... but with n = l-2 only if slot m brings at least one packet
        rows = np.arange(m + 2)[:, None]
        new[cols[None, :] < rows - 1] = 0.0
        # slot m idle: previous count l, exactly l-1 arrivals, none in slot m
        for l in range(1, min(m, j_max + 1) + 1):
            new[l, l - 1] += cur[l, l - 1] * p[0]
        cur = new
        yield m, cur


def _with_split(table: np.ndarray, split: np.ndarray) -> np.ndarray:
    """Convolve the arrivals axis with the A' law (the second probe's batch)."""
    return table @ _toeplitz(split)


def joint_zero_equal_priority(arrival: Pmf, m: int, j_max: int) -> JointTable:
    """P{X^{0,0}_{0,m} = l, A'_{1,m+1} = j} (equal-priority, empty start)."""
    if m < 0:
        raise ValueError("m must be >= 0")
    for _, t in iter_joint_zero_equal_priority(arrival, m, j_max):
        pass
    split = position_split_pmf(arrival).padded(j_max)
    return JointTable(m, _with_split(t, split), EQ_ZERO)


def _backlog_and_behind(arrival: Pmf, stationary: StationaryDist, slots: int, j_max: int):
    """Joint weights G[r, t] = P{Q_0 + A_0 = r, packets behind P1 in its batch = t}."""
    w, leak = _folded_pi(stationary, slots)
    p = arrival.padded(j_max)
    a_vals = np.flatnonzero(p)
    g = np.zeros((w.size + j_max + 1, j_max + 1))
    for a in a_vals:
        g[a : a + w.size, : a + 1] += (p[a] / (a + 1)) * w[:, None]
    leak += arrival.tail_mass * (1.0 if w.size else 0.0)
    return g, leak


def _uncond_equal(zero_split: np.ndarray, g: np.ndarray) -> np.ndarray:
    """sum_{r,t} G[r,t] * shift_j(t)(shift_rows(zero_split, r))."""
    j1 = zero_split.shape[1]
    out = np.zeros_like(zero_split)
    for t in np.flatnonzero(g.any(axis=0)):
        if t >= j1:
            break
        mixed = _mix_rows(zero_split, g[:, t])
        out[:, t:] += mixed[:, : j1 - t]
    return out


def joint_unconditioned_equal_priority(arrival: Pmf, stationary: StationaryDist, m: int,
                                       j_max: int) -> JointTable:
    """P{X_{0,m} = l, bar-A_{0,m+1} = j} for equal-priority probes."""
    if stationary.convention != EARLY:
        raise UsageError("equal-priority probes need the early-observation occupancy law")
    zero = joint_zero_equal_priority(arrival, m, j_max)
    g, leak = _backlog_and_behind(arrival, stationary, m + 1, j_max)
    return JointTable(m, _uncond_equal(zero.table, g), EQ_UNCONDITIONED, leakage=leak)


def _conditional_matrix_equal(arrival: Pmf, stationary: StationaryDist, m_max: int, n3: int) -> np.ndarray:
    if stationary.convention != EARLY:
        raise UsageError("equal-priority probes need the early-observation occupancy law")
    j_max = _default_jmax(n3)
    split = _toeplitz(position_split_pmf(arrival).padded(j_max))
    out = np.zeros((m_max, n3))
    g_cache = {}
    for m, t in iter_joint_zero_equal_priority(arrival, m_max - 1, j_max):
        slots = m + 1
        key = slots if slots - 1 > stationary.pi.size else -1
        if key not in g_cache:
            g_cache[key] = _backlog_and_behind(arrival, stationary, slots, j_max)[0]
        u = _uncond_equal(t @ split, g_cache[key])
        # input spacing d_i = m + 1; s = d_i + 1 + j - l
        out[m] = _antidiagonal(u, m + 1, n3)
    return out


def output_dist_equal_priority(arrival: Pmf, input_sep: SeparationDist,
                               limits: Limits | tuple = Limits(),
                               stationary: StationaryDist | None = None) -> SeparationDist:
    """Output separation law when probes take a uniform position in their batch."""
    from .prob import stationary_dist

    if isinstance(limits, tuple):
        limits = Limits(*limits)
    vec = _check_input(input_sep, limits.n2, limits.tail_tol)
    if stationary is None:
        stationary = stationary_dist(arrival, limits.n1, EARLY)
    m_max = int(np.flatnonzero(vec)[-1]) + 1 if vec.any() else 1
    k = conditional_matrix(arrival, stationary, m_max, limits.n3, EQUAL)
    return _finish(vec[:m_max] @ k, getattr(input_sep, 'leakage', 0.0))


def op_count(n2: int, n3: int) -> int:
    """Additions and multiplications in the zero-initial recursion sweep."""
    if n2 < 1 or n3 < 1:
        raise ValueError("n2 and n3 must be >= 1")
    val = (n3 * (n3 + 1) / 2 + 5 / 2) * n2 * (n2 + 1) / 2 - n2 * (n2 + 1) * (2 * n2 + 1) / 12
    return int(round(val))
