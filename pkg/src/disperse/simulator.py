"""Seeded slot-level simulation of probe pairs crossing a tree of queues.

Every queue is slotted: the slot's batch arrives at the start, one packet
leaves at the end if the queue is non-empty. Probes are ordinary packets
(service time one slot). Because the queues feed forward, each queue can be
simulated on its own once its parent's probe departures are known, so the
simulation runs queue by queue in tree order and, within a queue, in fixed
size chunks with vectorized numpy.

Occupancy before arrivals follows the reflected walk
``c[t+1] = max(c[t] + B[t] - 1, 0)``, which has the closed form
``c[t] = S[t] - min(-c0, min_{s<=t} S[s])`` with ``S`` the partial sums of
``B - 1``. A FCFS probe with ``k`` packets ahead of it in slot ``t``
leaves at the end of slot ``t + k``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, StabilityError
from .kernel import EQUAL, LOWEST
from .network import LeafJointDist, Topology

log = logging.getLogger(__name__)

CHUNK = 1 << 20


class ProbeOverlapWarning(UserWarning):
    """Consecutive probe pairs shared a queue; they no longer see it independently."""


@dataclass(frozen=True)
class Segment:
    """Rate ramps linearly from ``start_rate`` to ``end_rate`` over
    [start_slot, next segment's start_slot)."""

    start_slot: int
    start_rate: float
    end_rate: float


@dataclass(frozen=True, eq=False)
class SimConfig:
    topology: Topology
    probe_rate: float = 0.005
    d0: int = 1
    horizon: int = 1_000_000
    seed: int = 0
    priority: str | None = None  # overrides the per-node tags when set
    schedule: Mapping[int, Sequence[Segment]] = field(default_factory=dict)
    warmup: int | None = None
    audit: bool = False
    record_window: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not (0 < self.probe_rate < 1):
            raise ConfigError("probe_rate must lie in (0, 1)")
        if self.d0 < 1:
            raise ConfigError("d0 must be >= 1")
        if self.priority is not None and self.priority not in (LOWEST, EQUAL):
            raise ConfigError(f"unknown priority {self.priority!r}")
        for node, segs in self.schedule.items():
            if not (0 <= node < self.topology.size):
                raise ConfigError(f"schedule names unknown queue index {node}")
            if self.topology.nodes[node].arrival.family != "poisson":
                raise ConfigError("time-varying schedules need Poisson arrivals")
            starts = [s.start_slot for s in segs]
            if starts != sorted(starts):
                raise ConfigError("schedule segments must be ordered by start slot")
        lam_max = self.max_rate
        if lam_max >= 1:
            raise StabilityError(f"arrival rate reaches {lam_max:g} >= 1")
        headroom = 1 - lam_max
        if self.probe_rate > 0.1 * headroom:
            log.warning("probe rate %.3g is not small against the spare capacity %.3g",
                        self.probe_rate, headroom)

    @property
    def max_rate(self) -> float:
        rates = [nd.arrival.mean for nd in self.topology.nodes]
        for segs in self.schedule.values():
            rates += [max(s.start_rate, s.end_rate) for s in segs]
        return max(rates)

    @property
    def warmup_slots(self) -> int:
        if self.warmup is not None:
            return self.warmup
        return max(int(math.ceil(10 / (1 - self.max_rate))), 1000)

    def priority_of(self, i: int) -> str:
        return self.priority or self.topology.nodes[i].priority


def rate_at(segs: Sequence[Segment], slots: np.ndarray, horizon: int) -> np.ndarray:
    """Piecewise-linear rate schedule evaluated at ``slots``."""
    out = np.empty(slots.shape, dtype=float)
    if not segs or slots[0] < segs[0].start_slot:
        raise ConfigError("schedule must start at or before slot 0")
    for k, seg in enumerate(segs):
        end = segs[k + 1].start_slot if k + 1 < len(segs) else horizon
        mask = (slots >= seg.start_slot) & (slots < end)
        if end <= seg.start_slot or not mask.any():
            continue
        frac = (slots[mask] - seg.start_slot) / (end - seg.start_slot)
        out[mask] = seg.start_rate + (seg.end_rate - seg.start_rate) * frac
    return out


def true_rates(config: SimConfig, slot: int) -> np.ndarray:
    """Per-queue arrival rate in effect at ``slot``."""
    out = config.topology.rates.copy()
    for i, segs in config.schedule.items():
        out[i] = rate_at(segs, np.array([slot]), config.horizon)[0]
    return out


@dataclass(frozen=True, eq=False)
class DispersionSamples:
    """One record per completed probe pair: launch slot, id, leaf separations."""

    launch_slot: np.ndarray
    probe_id: np.ndarray
    seps: np.ndarray  # shape (pairs, leaves)
    leaves: tuple = ()
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.launch_slot.size)

    @property
    def kappa(self) -> int:
        return self.seps.shape[1]

    def subset(self, idx) -> "DispersionSamples":
        return DispersionSamples(self.launch_slot[idx], self.probe_id[idx], self.seps[idx],
                                 self.leaves, self.meta)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["launch_slot", "probe_id"] + [f"d_{k + 1}" for k in range(self.kappa)])
            for t, i, row in zip(self.launch_slot, self.probe_id, self.seps):
                w.writerow([int(t), int(i), *map(int, row)])


class _Streams:
    """Independent named generators derived from one master seed."""

    def __init__(self, seed: int, n_queues: int):
        ss = np.random.SeedSequence(seed)
        kids = ss.spawn(n_queues * 2 + 2)
        self.launch = np.random.default_rng(kids[0])
        self.kernel = np.random.default_rng(kids[1])
        self.arrivals = [np.random.default_rng(k) for k in kids[2 : 2 + n_queues]]
        self.position = [np.random.default_rng(k) for k in kids[2 + n_queues :]]


def _launch_slots(rng, rate: float, first: int, last: int) -> np.ndarray:
    """Bernoulli(rate) launches in [first, last), drawn as geometric gaps."""
    span = last - first
    if span <= 0:
        return np.empty(0, dtype=np.int64)
    expect = int(span * rate + 10 * math.sqrt(span * rate + 1) + 16)
    out = []
    pos = first - 1
    while True:
        gaps = rng.geometric(rate, size=expect)
        slots = pos + np.cumsum(gaps)
        keep = slots[slots < last]
        out.append(keep)
        if keep.size < slots.size:
            break
        pos = int(slots[-1])
    return np.concatenate(out).astype(np.int64)


def _arrival_chunk(rng, node, segs, slots: np.ndarray, horizon: int) -> np.ndarray:
    model = node.arrival
    if segs:
        return rng.poisson(rate_at(segs, slots, horizon))
    if model.family == "poisson":
        return rng.poisson(model.params[0], size=slots.size)
    probs = np.asarray(model.params, dtype=float)
    probs = probs / probs.sum()
    return rng.choice(probs.size, size=slots.size, p=probs)


def _simulate_queue(config: SimConfig, i: int, streams: _Streams, arr_slot: np.ndarray,
                    order: np.ndarray, stats: dict):
    """Departure slot of every probe arriving at queue ``i``.

    ``arr_slot`` is sorted; ``order`` breaks ties within a slot (smaller goes
    first). Returns departure slots aligned with ``arr_slot``, plus the
    window statistics used by the Monte Carlo oracles when requested.
    """
    node = config.topology.nodes[i]
    segs = config.schedule.get(i, ())
    horizon = config.horizon
    equal = config.priority_of(i) == EQUAL
    rng = streams.arrivals[i]
    pos_rng = streams.position[i]

    dep = np.empty(arr_slot.size, dtype=np.int64)
    pre_b = np.empty(arr_slot.size, dtype=np.int64)  # total arrivals before slot t+1
    pre_x = np.empty(arr_slot.size, dtype=np.int64)  # departures before slot t
    c0 = 0
    cum_b = 0
    cum_x = 0
    hist_late = np.zeros(1, dtype=np.int64)
    hist_early = np.zeros(1, dtype=np.int64)
    warm = config.warmup_slots
    audit_ok = True

    lo_idx = 0
    for start in range(0, horizon, CHUNK):
        stop = min(start + CHUNK, horizon)
        slots = np.arange(start, stop)
        a = _arrival_chunk(rng, node, segs, slots, horizon)
        hi_idx = np.searchsorted(arr_slot, stop, side="left")
        p_slots = arr_slot[lo_idx:hi_idx]
        local = p_slots - start
        probes = np.bincount(local, minlength=slots.size)
        b = a + probes
        s = np.cumsum(b - 1)
        s = np.concatenate(([0], s[:-1]))  # S[t] uses slots before t
        c = s - np.minimum(np.minimum.accumulate(s), -c0)  # occupancy before arrivals
        y = c + b  # occupancy after arrivals
        busy = y > 0

        if p_slots.size:
            # rank of each probe among the probes of its slot
            first_in_slot = np.searchsorted(p_slots, p_slots, side="left")
            rank = np.arange(p_slots.size) + lo_idx - (first_in_slot + lo_idx)
            if equal:
                pos = pos_rng.integers(0, a[local] + 1)
                ahead = c[local] + pos + rank
            else:
                ahead = c[local] + a[local] + rank
            dep[lo_idx:hi_idx] = p_slots + ahead
            cb = np.cumsum(b)
            cx = np.cumsum(busy)
            pre_b[lo_idx:hi_idx] = cum_b + cb[local]
            pre_x[lo_idx:hi_idx] = cum_x + np.concatenate(([0], cx))[local]

        # occupancy histograms after warm-up (for the stationary-law oracle)
        w0 = max(warm - start, 0)
        if w0 < slots.size:
            hl = np.bincount(y[w0:])
            he = np.bincount(c[w0:])
            hist_late = _add_hist(hist_late, hl)
            hist_early = _add_hist(hist_early, he)

        n_dep = int(busy.sum())
        c_end = int(c[-1] + b[-1] - (1 if busy[-1] else 0))
        if config.audit and c_end != c0 + int(b.sum()) - n_dep:
            audit_ok = False
        cum_b += int(b.sum())
        cum_x += n_dep
        c0 = c_end
        lo_idx = hi_idx

    stats.setdefault("occupancy_late", []).append(hist_late)
    stats.setdefault("occupancy_early", []).append(hist_early)
    if config.audit:
        stats.setdefault("work_conserving", []).append(audit_ok)
    _ = order
    return dep, pre_b, pre_x


def _add_hist(h: np.ndarray, new: np.ndarray) -> np.ndarray:
    n = max(h.size, new.size)
    out = np.zeros(n, dtype=np.int64)
    out[: h.size] += h
    out[: new.size] += new
    return out


def simulate(config: SimConfig) -> DispersionSamples:
    """Run the slot simulation and return the separations seen at the leaves."""
    topo = config.topology
    streams = _Streams(config.seed, topo.size)
    warm = config.warmup_slots
    launches = _launch_slots(streams.launch, config.probe_rate, warm, config.horizon - config.d0)
    n_pairs = launches.size
    pair = np.arange(n_pairs)

    # probe arrivals at the root: P1 at launch, P2 d0 slots later
    inbox: dict[int, tuple] = {}
    p1 = launches
    p2 = launches + config.d0
    kern = topo.kernels[topo.root]
    if not kern.is_identity:
        p2 = p1 + _sample_kernel(kern, p2 - p1, streams.kernel)
    inbox[topo.root] = (p1, p2)
    alive = np.ones(n_pairs, dtype=bool)
    seps_at = {}
    stats: dict = {}
    windows = {}
    overlaps = 0

    for v in topo.order():
        p1, p2 = inbox.pop(v)
        ok = alive & (p1 < config.horizon) & (p2 < config.horizon)
        alive &= ok
        # both probes of every live pair; dead pairs are left out entirely
        slots = np.concatenate((p1[ok], p2[ok]))
        ident = np.concatenate((2 * pair[ok], 2 * pair[ok] + 1))
        srt = np.lexsort((ident, slots))
        slots, ident = slots[srt], ident[srt]
        dep_sorted, pre_b, pre_x = _simulate_queue(config, v, streams, slots, ident, stats)
        dep = np.full(2 * n_pairs, -1, dtype=np.int64)
        dep[ident] = dep_sorted
        d1, d2 = dep[0::2], dep[1::2]

        if config.record_window and v == topo.root:
            pb = np.zeros(2 * n_pairs, dtype=np.int64)
            px = np.zeros(2 * n_pairs, dtype=np.int64)
            pb[ident] = pre_b
            px[ident] = pre_x
            # arrivals in slots t1+1..t2 (minus P2 itself) and departures in t1..t2-1
            windows = {
                "arrivals": pb[1::2] - pb[0::2] - 1,
                "departures": px[1::2] - px[0::2],
            }

        live = np.flatnonzero(alive)
        if live.size > 1:
            # a pair overlaps the next one if its P2 is still queued when the next P1 arrives
            nxt = p1[live[1:]]
            overlaps += int((d2[live[:-1]] >= nxt).sum())

        kids = topo.children(v)
        if not kids:
            seps_at[v] = d2 - d1
            continue
        for c in kids:
            q1 = d1 + 1
            q2 = d2 + 1
            kc = topo.kernels[c]
            if not kc.is_identity:
                q2 = q1 + _sample_kernel(kc, d2 - d1, streams.kernel)
            inbox[c] = (q1, q2)

    leaves = topo.leaves
    live = np.flatnonzero(alive)
    seps = np.stack([seps_at[lf][live] for lf in leaves], axis=1)
    if overlaps:
        warnings.warn(f"{overlaps} probe pairs overlapped in some queue", ProbeOverlapWarning,
                      stacklevel=2)
    meta = {
        "pairs_launched": int(n_pairs),
        "pairs_completed": int(live.size),
        "overlaps": overlaps,
        "warmup": warm,
        "occupancy_late": stats.get("occupancy_late"),
        "occupancy_early": stats.get("occupancy_early"),
    }
    if config.audit:
        meta["work_conserving"] = all(stats.get("work_conserving", [True]))
    if windows:
        meta["window_arrivals"] = windows["arrivals"][live]
        meta["window_departures"] = windows["departures"][live]
    return DispersionSamples(launches[live], live.astype(np.int64), seps, tuple(leaves), meta)


def _sample_kernel(kernel, sep: np.ndarray, rng) -> np.ndarray:
    """Draw the separation after a link for every pair (invalid pairs pass through)."""
    out = sep.copy()
    u = rng.random(sep.size)
    for s in np.unique(sep[sep >= 1]):
        row = kernel.row(int(s))
        vals = np.array(list(row.keys()))
        cdf = np.cumsum(list(row.values()))
        idx = np.flatnonzero(sep == s)
        out[idx] = vals[np.minimum(np.searchsorted(cdf, u[idx], side="right"), vals.size - 1)]
    return out


def empirical_dist(samples: DispersionSamples, n3: int) -> LeafJointDist:
    """Normalized frequency table of the leaf separations, clipped at ``n3``."""
    n = len(samples)
    if n == 0:
        raise ValueError("no samples")
    seps = samples.seps
    inside = np.all(seps <= n3, axis=1) & np.all(seps >= 1, axis=1)
    idx = np.ravel_multi_index(tuple((seps[inside] - 1).T), (n3,) * seps.shape[1])
    counts = np.bincount(idx, minlength=n3 ** seps.shape[1]).reshape((n3,) * seps.shape[1])
    return LeafJointDist(n3, seps.shape[1], table=counts / n,
                         overflow=float((~inside).sum()) / n, count=n)


def blocked_empirical_stream(samples: DispersionSamples, block: int, a: float, n3: int = 60):
    """Exponentially blended empirical laws, one per block of ``block`` pairs.

    The first output is the first block's raw law; afterwards
    ``blend = (1 - a) * blend + a * block_law``. A trailing partial block is
    dropped.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    if not (0 < a <= 1):
        raise ValueError("a must lie in (0, 1]")
    blend = None
    for k in range(len(samples) // block):
        inst = empirical_dist(samples.subset(slice(k * block, (k + 1) * block)), n3)
        if blend is None:
            blend = inst
        else:
            blend = LeafJointDist(
                n3, inst.kappa, table=(1 - a) * blend.table + a * inst.table,
                overflow=(1 - a) * blend.overflow + a * inst.overflow, count=inst.count)
        yield blend


def occupancy_frequencies(samples: DispersionSamples, queue: int = 0, convention: str = "late") -> np.ndarray:
    key = "occupancy_late" if convention == "late" else "occupancy_early"
    h = samples.meta[key][queue]
    return h / h.sum()
