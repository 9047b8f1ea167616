"""Propagation of separation laws through paths and trees of independent queues."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import KernelDomainError, StabilityError, TruncationError
from .kernel import EQUAL, LOWEST, PRIORITIES, conditional_matrix
from .prob import (
    EARLY,
    LATE,
    ArrivalModel,
    Limits,
    SeparationDist,
    materialize_arrival_pmf,
    stationary_dist,
)

DENSE_MAX_LEAVES = 3
SPARSE_PRUNE = 1e-14


# ------------------------------------------------------------------ delay kernels

@dataclass(frozen=True, eq=False)
class DelayKernel:
    """Conditional law P{d' = j | d = i} of the separation after a link.

    ``rows`` (explicit kind only) maps i to a {j: prob} dict.
    """

    kind: str = "identity"
    alpha: float = 0.0
    rows: Mapping[int, Mapping[int, float]] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "light_load", "explicit"):
            raise ValueError(f"unknown delay kernel kind {self.kind!r}")
        if self.kind == "light_load" and not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kind == "explicit":
            if not self.rows:
                raise ValueError("explicit kernel needs rows")
            for i, row in self.rows.items():
                if min(row) < 1:
                    raise ValueError(f"kernel row {i} puts mass below separation 1")
                if abs(sum(row.values()) - 1.0) > 1e-9:
                    raise ValueError(f"kernel row {i} sums to {sum(row.values())}")

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity" or (self.kind == "light_load" and self.alpha == 0.0)

    def row(self, i: int) -> dict[int, float]:
        if i < 1:
            raise KernelDomainError(f"separation {i} < 1")
        if self.kind == "identity":
            return {i: 1.0}
        if self.kind == "light_load":
            a = self.alpha
            if i == 1:
                return {1: 1.0 - a, 2: a}
            b = a * (1.0 - a)
            return {i - 1: b, i: 1.0 - 2.0 * b, i + 1: b}
        if i not in self.rows:
            raise KernelDomainError(f"explicit kernel has no row for separation {i}")
        return dict(self.rows[i])

    def growth(self) -> int:
        if self.kind == "identity":
            return 0
        if self.kind == "light_load":
            return 1
        return max(0, max(max(r) - i for i, r in self.rows.items()))

    def matrix(self, n_in: int, n_out: int | None = None, support: np.ndarray | None = None) -> np.ndarray:
        """E[i-1, j-1] = P{d' = j | d = i} for i = 1..n_in, j = 1..n_out.

        Rows outside ``support`` (a boolean mask over 1..n_in) are left empty
        so explicit kernels only need to cover the mass actually present.
        """
        if n_out is None:
            n_out = n_in + self.growth()
        e = np.zeros((n_in, n_out))
        for i in range(1, n_in + 1):
            if support is not None and not support[i - 1]:
                continue
            for j, pr in self.row(i).items():
                if j <= n_out:
                    e[i - 1, j - 1] += pr
        return e


IDENTITY = DelayKernel()


def light_load_kernel(alpha: float) -> DelayKernel:
    """Separation change across a lightly loaded link where each probe meets at
    most one cross-traffic packet, independently with probability ``alpha``."""
    return DelayKernel("light_load", float(alpha))


def apply_delay_kernel(sep: SeparationDist, kernel: DelayKernel) -> SeparationDist:
    """P{d' = j} = sum_i P{d' = j | d = i} P{d = i}."""
    if kernel.kind == "identity":
        return sep
    v = sep.vector(sep.truncation_bound)
    e = kernel.matrix(v.size, support=v > 0)
    out = v @ e
    return SeparationDist(out, leakage=sep.leakage, renorm=sep.renorm, tail=sep.tail)


# ---------------------------------------------------------------------- topology

@dataclass(frozen=True)
class Node:
    name: str
    arrival: ArrivalModel
    priority: str = LOWEST

    def __post_init__(self):
        if self.priority not in PRIORITIES:
            raise ValueError(f"priority must be one of {PRIORITIES}")


@dataclass(frozen=True, eq=False)
class Topology:
    """Rooted tree of queues; probes enter at the root.

    ``parents[i]`` is the parent index of node i (None for the root) and
    ``kernels[i]`` the delay kernel on the link into node i. ``joint_kernels``
    optionally maps a node index to an array ``J[u, w_1, .., w_k]`` giving the
    joint law of the separations handed to its k children (in index order)
    when their link delays are dependent.
    """

    nodes: tuple
    parents: tuple
    kernels: tuple = ()
    joint_kernels: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.nodes)
        if n == 0:
            raise ValueError("topology has no queues")
        if len(self.parents) != n:
            raise ValueError("parents must list one entry per node")
        if not self.kernels:
            object.__setattr__(self, "kernels", (IDENTITY,) * n)
        if len(self.kernels) != n:
            raise ValueError("kernels must list one entry per node")
        roots = [i for i, p in enumerate(self.parents) if p is None]
        if len(roots) != 1:
            raise ValueError(f"topology needs exactly one root, found {len(roots)}")
        for i, p in enumerate(self.parents):
            if p is not None and not (0 <= p < n) or p == i:
                raise ValueError(f"node {i} has invalid parent {p}")
        # every node must reach the root without revisiting
        for i in range(n):
            seen, cur = set(), i
            while self.parents[cur] is not None:
                if cur in seen:
                    raise ValueError("topology contains a cycle")
                seen.add(cur)
                cur = self.parents[cur]
        for node in self.nodes:
            if node.arrival.mean >= 1:
                raise StabilityError(f"queue {node.name!r} has rate {node.arrival.mean:g} >= 1")
        names = [node.name for node in self.nodes]
        if len(set(names)) != n:
            raise ValueError("node names must be unique")

    @classmethod
    def path(cls, models: Sequence[ArrivalModel], kernels: Sequence[DelayKernel] | None = None,
             priority: str = LOWEST) -> "Topology":
        nodes = tuple(Node(f"q{i + 1}", m, priority) for i, m in enumerate(models))
        parents = (None,) + tuple(range(len(models) - 1))
        return cls(nodes, parents, tuple(kernels) if kernels else ())

    @classmethod
    def tree(cls, models: Sequence[ArrivalModel], parents: Sequence[int | None],
             kernels: Sequence[DelayKernel] | None = None, priority: str = LOWEST) -> "Topology":
        nodes = tuple(Node(f"q{i + 1}", m, priority) for i, m in enumerate(models))
        return cls(nodes, tuple(parents), tuple(kernels) if kernels else ())

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> int:
        return self.parents.index(None)

    def children(self, i: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == i]

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(self.size) if not self.children(i)]

    def order(self) -> list[int]:
        """Depth-first pre-order from the root."""
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(reversed(self.children(v)))
        return out

    def path_to(self, leaf: int) -> list[int]:
        out = [leaf]
        while self.parents[out[-1]] is not None:
            out.append(self.parents[out[-1]])
        return out[::-1]

    @property
    def rates(self) -> np.ndarray:
        return np.array([node.arrival.mean for node in self.nodes])

    def with_rates(self, rates: Sequence[float]) -> "Topology":
        """Same structure with Poisson arrivals at the given per-queue rates."""
        if len(rates) != self.size:
            raise ValueError(f"expected {self.size} rates, got {len(rates)}")
        nodes = tuple(replace(nd, arrival=ArrivalModel.poisson(float(r), nd.arrival.n_max))
                      for nd, r in zip(self.nodes, rates))
        return Topology(nodes, self.parents, self.kernels, self.joint_kernels)

    def with_priority(self, priority: str) -> "Topology":
        nodes = tuple(replace(nd, priority=priority) for nd in self.nodes)
        return Topology(nodes, self.parents, self.kernels, self.joint_kernels)


# --------------------------------------------------------------- leaf joint laws

@dataclass(frozen=True, eq=False)
class LeafJointDist:
    """Joint law of the separations at the leaves (axis k <-> k-th leaf).

    Dense tables index separation s at position s - 1. Sparse tables map
    1-based separation tuples to probabilities. ``overflow`` is the share of
    empirical samples with some separation above ``n3``; ``leakage`` the
    analytic mass lost to truncation.
    """

    n3: int
    kappa: int
    table: np.ndarray | None = None
    entries: Mapping[tuple, float] | None = None
    leakage: float = 0.0
    overflow: float = 0.0
    renorm: float = 1.0
    stage_leakage: tuple = ()
    count: int = 0

    def __post_init__(self):
        if (self.table is None) == (self.entries is None):
            raise ValueError("give exactly one of a dense table or sparse entries")
        if self.table is not None:
            t = np.array(self.table, dtype=float)
            if t.ndim != self.kappa:
                raise ValueError("dense table rank must equal the number of leaves")
            t.flags.writeable = False
            object.__setattr__(self, "table", t)

    @property
    def is_dense(self) -> bool:
        return self.table is not None

    @property
    def total(self) -> float:
        if self.is_dense:
            return float(self.table.sum())
        return float(sum(self.entries.values()))

    def dense(self) -> np.ndarray:
        if self.is_dense:
            return self.table
        out = np.zeros((self.n3,) * self.kappa)
        for key, p in self.entries.items():
            if max(key) <= self.n3:
                out[tuple(k - 1 for k in key)] += p
        return out

    def items(self):
        if self.is_dense:
            for idx in zip(*np.nonzero(self.table)):
                yield tuple(int(i) + 1 for i in idx), float(self.table[idx])
        else:
            yield from sorted(self.entries.items())

    def marginal(self, k: int = 0) -> SeparationDist:
        if self.is_dense:
            axes = tuple(i for i in range(self.kappa) if i != k)
            v = self.table.sum(axis=axes) if axes else self.table
        else:
            v = np.zeros(self.n3)
            for key, p in self.entries.items():
                v[key[k] - 1] += p
        return SeparationDist(np.clip(v, 0, None), leakage=self.leakage, renorm=self.renorm)

    def as_separation(self) -> SeparationDist:
        if self.kappa != 1:
            raise ValueError("only single-leaf laws collapse to a separation distribution")
        return self.marginal(0)

    def scaled(self, c: float) -> "LeafJointDist":
        if self.is_dense:
            return replace(self, table=self.table * c)
        return replace(self, entries={k: v * c for k, v in self.entries.items()})

    def csv_rows(self):
        return [(*key, p) for key, p in self.items()]

    @classmethod
    def from_separation(cls, sep: SeparationDist, n3: int) -> "LeafJointDist":
        return cls(n3, 1, table=sep.vector(n3), leakage=sep.leakage, renorm=sep.renorm,
                   stage_leakage=sep.stage_leakage)


# ------------------------------------------------------------ conditional caches

@functools.lru_cache(maxsize=2048)
def cached_conditional(model: ArrivalModel, priority: str, n1: int, m_max: int, n3: int) -> np.ndarray:
    """Read-only rows m = 1..m_max of P{d_out = s | d_in = m} for one queue."""
    arrival = materialize_arrival_pmf(model, max(model.n_max, n1, n3) + 2)
    conv = EARLY if priority == EQUAL else LATE
    st = stationary_dist(model, n1, conv)
    k = conditional_matrix(arrival, st, m_max, n3, priority)
    k.flags.writeable = False
    return k


def clear_caches():
    cached_conditional.cache_clear()


def _queue_matrix(node: Node, limits: Limits, m_max: int) -> np.ndarray:
    if node.arrival.mean == 0:
        # transparent queue: d_out = d_in exactly
        k = np.zeros((m_max, limits.n3))
        idx = np.arange(min(m_max, limits.n3))
        k[idx, idx] = 1.0
        return k
    return cached_conditional(node.arrival, node.priority, limits.n1, m_max, limits.n3)


# ---------------------------------------------------------------- propagation

def _to_vector(d0, n2: int) -> SeparationDist:
    if isinstance(d0, (int, np.integer)):
        return SeparationDist.point(int(d0), n2)
    return d0


class _Dense:
    """Tensor over (pending-node inputs and finished leaves), one axis each."""

    def __init__(self, vec: np.ndarray):
        self.t = vec

    def mass(self):
        return float(self.t.sum())

    def truncate(self, axis: int, n: int):
        if self.t.shape[axis] > n:
            self.t = np.take(self.t, np.arange(n), axis=axis)

    def support_max(self, axis: int) -> int:
        other = tuple(i for i in range(self.t.ndim) if i != axis)
        marg = self.t.sum(axis=other) if other else self.t
        nz = np.flatnonzero(marg)
        return int(nz[-1]) + 1 if nz.size else 1

    def apply(self, axis: int, mat: np.ndarray):
        rows = mat.shape[0]
        if self.t.shape[axis] < rows:
            pad = [(0, 0)] * self.t.ndim
            pad[axis] = (0, rows - self.t.shape[axis])
            self.t = np.pad(self.t, pad)
        self.truncate(axis, rows)
        self.t = np.moveaxis(np.tensordot(self.t, mat, axes=([axis], [0])), -1, axis)

    def fan_out(self, axis: int, mats: list[np.ndarray] | None, joint: np.ndarray | None):
        """Replace ``axis`` by one axis per child."""
        t = np.moveaxis(self.t, axis, -1)
        n = t.shape[-1]
        if joint is not None:
            j = joint[:n]
            if j.shape[0] < n:
                raise KernelDomainError("joint edge kernel does not cover the parent separation range")
            out = np.tensordot(t, j, axes=([t.ndim - 1], [0]))
        else:
            out = t
            k = len(mats)
            # out[..., w_1, ..., w_k] = sum_u t[..., u] prod_c E_c[u, w_c]
            letters = "abcdefghijklmnopqrstuvwxy"
            lead = "Z"
            subs_t = "..." + lead
            subs_e = [lead + letters[c] for c in range(k)]
            spec = ",".join([subs_t] + subs_e) + "->..." + "".join(letters[:k])
            out = np.einsum(spec, t, *[m[:n] for m in mats], optimize=True)
        k_new = out.ndim - (t.ndim - 1)
        # move the new child axes to where ``axis`` was
        self.t = np.moveaxis(out, list(range(t.ndim - 1, out.ndim)), list(range(axis, axis + k_new)))


class _Sparse:
    def __init__(self, vec: np.ndarray):
        self.d = {(i + 1,): float(p) for i, p in enumerate(vec) if p > 0}

    def mass(self):
        return float(sum(self.d.values()))

    def truncate(self, axis: int, n: int):
        self.d = {k: v for k, v in self.d.items() if k[axis] <= n}

    def support_max(self, axis: int) -> int:
        return max((k[axis] for k in self.d), default=1)

    def apply(self, axis: int, mat: np.ndarray):
        self.truncate(axis, mat.shape[0])
        out: dict = {}
        for key, p in self.d.items():
            row = mat[key[axis] - 1]
            for s in np.flatnonzero(row):
                v = p * row[s]
                if v > SPARSE_PRUNE:
                    nk = key[:axis] + (int(s) + 1,) + key[axis + 1 :]
                    out[nk] = out.get(nk, 0.0) + v
        self.d = out

    def fan_out(self, axis: int, mats, joint):
        out: dict = {}
        for key, p in self.d.items():
            u = key[axis] - 1
            if joint is not None:
                sl = joint[u]
                combos = ((tuple(int(w) + 1 for w in idx), sl[idx]) for idx in zip(*np.nonzero(sl)))
            else:
                per = [[(int(w) + 1, m[u, w]) for w in np.flatnonzero(m[u])] for m in mats]
                combos = ((tuple(w for w, _ in c), float(np.prod([pr for _, pr in c])))
                          for c in itertools.product(*per))
            for ws, pr in combos:
                v = p * pr
                if v > SPARSE_PRUNE:
                    nk = key[:axis] + ws + key[axis + 1 :]
                    out[nk] = out.get(nk, 0.0) + v
        self.d = out


def propagate_tree(topology: Topology, d0, limits: Limits = Limits(), renormalize: bool = True,
                   dense: bool | None = None) -> LeafJointDist:
    """Joint law of the leaf separations for probe pairs entering at the root.

    Works top-down: the state holds one axis per queue still to be crossed
    plus one per finished leaf. Crossing a queue maps its axis through the
    queue's conditional matrix; at a branch point the axis is copied to every
    child through the link kernels. Siblings are conditionally independent
    given the parent's output separation, which is exactly what the copy
    expresses.
    """
    n2, n3, tol = limits.n2, limits.n3, limits.tail_tol
    d0 = _to_vector(d0, n2)
    leaves = topology.leaves
    kappa = len(leaves)
    if dense is None:
        dense = kappa <= DENSE_MAX_LEAVES
    root = topology.root
    start = d0.vector(max(d0.truncation_bound, 1))
    kern = topology.kernels[root]
    if not kern.is_identity:
        start = start @ kern.matrix(start.size, support=start > 0)
    state = _Dense(start) if dense else _Sparse(start)

    axes = [root]  # node whose input (or, once a leaf is done, output) lives on each axis
    done: set[int] = set()
    stage_leak = []
    initial = state.mass()
    for v in topology.order():
        ax = axes.index(v)
        before = state.mass()
        state.truncate(ax, n2)
        lost = before - state.mass()
        if lost >= tol:
            raise TruncationError(
                f"queue {topology.nodes[v].name!r}: input separation mass {lost:.3g} above n2={n2}",
                stage=v, lost=lost)
        m_max = min(state.support_max(ax), n2)
        state.apply(ax, _queue_matrix(topology.nodes[v], limits, m_max))
        after = state.mass()
        stage_leak.append(before - after)
        if before - after >= tol:
            raise TruncationError(
                f"queue {topology.nodes[v].name!r}: lost {before - after:.3g} of mass beyond n3={n3}",
                stage=v, lost=before - after)
        kids = topology.children(v)
        if not kids:
            done.add(v)
            continue
        n_in = n3
        joint = topology.joint_kernels.get(v)
        if joint is not None:
            mats = None
            joint = np.asarray(joint, dtype=float)
        else:
            support = None
            mats = []
            for c in kids:
                kc = topology.kernels[c]
                mats.append(np.eye(n_in) if kc.kind == "identity"
                            else kc.matrix(n_in, n_in + kc.growth(), support))
        state.fan_out(ax, mats, joint)
        axes[ax : ax + 1] = kids

    # order axes by leaf index
    perm = [axes.index(lf) for lf in leaves]
    total = state.mass()
    leak = max(0.0, 1.0 - total) if initial > 0 else 0.0
    if total <= 0:
        raise TruncationError("all probability mass lost to truncation", lost=1.0)
    factor = 1.0 / total if renormalize else 1.0
    if isinstance(state, _Dense):
        table = np.transpose(state.t, perm) * factor
        if any(s < n3 for s in table.shape):
            table = np.pad(table, [(0, n3 - s) for s in table.shape])
        table = table[(slice(0, n3),) * kappa]
        return LeafJointDist(n3, kappa, table=table, leakage=leak, renorm=factor,
                             stage_leakage=tuple(stage_leak))
    entries = {tuple(k[i] for i in perm): v * factor for k, v in state.d.items()}
    return LeafJointDist(n3, kappa, entries=entries, leakage=leak, renorm=factor,
                         stage_leakage=tuple(stage_leak))


def propagate_path(queues: Sequence[ArrivalModel], d0, limits: Limits = Limits(),
                   kernels: Sequence[DelayKernel] | None = None, priority: str = LOWEST,
                   renormalize: bool = True) -> SeparationDist:
    """Separation law after crossing the queues in order."""
    topo = Topology.path(queues, kernels, priority)
    joint = propagate_tree(topo, d0, limits, renormalize)
    v = joint.table
    return SeparationDist(v, leakage=joint.leakage, renorm=joint.renorm,
                          stage_leakage=joint.stage_leakage)


def model_distribution(topology: Topology, rates: Sequence[float] | None, d0=1,
                       limits: Limits = Limits()) -> LeafJointDist:
    """Analytic leaf law for the structure of ``topology`` at Poisson ``rates``."""
    topo = topology if rates is None else topology.with_rates(rates)
    return propagate_tree(topo, d0, limits)
