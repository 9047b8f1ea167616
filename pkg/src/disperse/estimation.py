"""Fitting per-queue arrival rates to observed separation laws.

Two estimators share one cost: the distance between an empirical leaf law
and the analytic one at candidate rates. ``grid_search`` minimizes it over a
Cartesian grid; ``adaptive_step`` / ``track`` take one normalized steepest
descent step per block of probe pairs against an exponentially blended
empirical law, so the estimate follows slowly varying traffic.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DivergenceError, TruncationError
from .network import LeafJointDist, Topology, propagate_tree
from .prob import Limits

KL_FLOOR = 1e-12
BOX = (0.01, 0.99)
FINE_STEP = 0.01
REFINE_STEPS = (0.1, 0.05, 0.02, 0.01)
DISTANCES = ("euclidean", "kl")

# Limits used when the model is evaluated inside an optimizer. Candidate rates
# near 1 push mass past n3; that mass is simply absent from the comparison,
# just as empirical overflow is, so truncation is not an error here.
FIT_TOL = 1.0


@dataclass(frozen=True)
class ParameterVector:
    values: tuple
    lo: float = BOX[0]
    hi: float = BOX[1]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not (0 <= self.lo <= self.hi < 1):
            raise ValueError(f"invalid box [{self.lo}, {self.hi}]")
        if any(not (self.lo - 1e-12 <= v <= self.hi + 1e-12) for v in self.values):
            raise ValueError(f"{self.values} outside the box [{self.lo}, {self.hi}]")

    @classmethod
    def clipped(cls, values, lo: float = BOX[0], hi: float = BOX[1]) -> "ParameterVector":
        return cls(tuple(np.clip(np.asarray(values, dtype=float), lo, hi)), lo, hi)

    def array(self) -> np.ndarray:
        return np.array(self.values)

    def __len__(self):
        return len(self.values)


# ------------------------------------------------------------------ distances

def _common_tables(a: LeafJointDist, b: LeafJointDist):
    if a.kappa != b.kappa:
        raise ValueError(f"leaf counts differ ({a.kappa} vs {b.kappa})")
    n = max(a.n3, b.n3)
    ta, tb = a.dense(), b.dense()
    if a.n3 < n:
        ta = np.pad(ta, [(0, n - a.n3)] * a.kappa)
    if b.n3 < n:
        tb = np.pad(tb, [(0, n - b.n3)] * b.kappa)
    return ta.ravel(), tb.ravel()


def euclidean_distance(empirical: LeafJointDist, model: LeafJointDist) -> float:
    """Squared Euclidean distance between the two tables on their common support."""
    p, q = _common_tables(empirical, model)
    d = p - q
    return float(d @ d)


def kl_distance(empirical: LeafJointDist, model: LeafJointDist, smoothing: bool = True) -> float:
    """Kullback-Leibler divergence of the model from the empirical law.

    With smoothing on, model cells below ``KL_FLOOR`` where the empirical law
    has mass are raised to the floor and the model is rescaled back to its
    original total, so truncation zeros stay finite.
    """
    p, q = _common_tables(empirical, model)
    pos = p > 0
    if smoothing:
        # never raise a cell above the empirical value it is compared with
        floor = np.minimum(KL_FLOOR, p)
        low = pos & (q < floor)
        if low.any():
            total = q.sum()
            q = np.where(low, floor, q)
            q = q * (total / q.sum())
    elif np.any(q[pos] <= 0):
        raise DivergenceError("model has zero mass where the empirical law is positive")
    val = float(np.sum(p[pos] * np.log(p[pos] / q[pos])))
    # p and q need not sum to one on the truncated support; the mass outside
    # keeps the value from dipping below zero
    return max(val, 0.0)


DISTANCE_FUNCS = {"euclidean": euclidean_distance, "kl": kl_distance}


def fit_limits(limits: Limits) -> Limits:
    return replace(limits, tail_tol=FIT_TOL)


def make_cost(empirical: LeafJointDist, topology: Topology, distance: str = "euclidean",
              limits: Limits = Limits(), d0=1) -> Callable[[Sequence[float]], float]:
    """Cost of candidate rates: distance between ``empirical`` and the model."""
    if distance not in DISTANCE_FUNCS:
        raise ValueError(f"distance must be one of {DISTANCES}")
    dist = DISTANCE_FUNCS[distance]
    lim = replace(fit_limits(limits), n3=empirical.n3)

    def cost(rates) -> float:
        try:
            model = propagate_tree(topology.with_rates(rates), d0, lim, renormalize=False)
        except TruncationError:
            return math.inf
        return dist(empirical, model)

    return cost


# ---------------------------------------------------------------- grid search

@dataclass(frozen=True)
class GridSpec:
    lo: float = BOX[0]
    hi: float = BOX[1]
    step: float = FINE_STEP
    refine: tuple = REFINE_STEPS
    full_max_dim: int = 2  # full grids up to this many queues, coarse-to-fine above

    def axis(self, lo: float | None = None, hi: float | None = None, step: float | None = None):
        lo = self.lo if lo is None else max(lo, self.lo)
        hi = self.hi if hi is None else min(hi, self.hi)
        step = self.step if step is None else step
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return np.round(lo + step * np.arange(max(n, 0)), 10)


@dataclass(frozen=True, eq=False)
class GridResult:
    estimate: ParameterVector
    cost: float
    axes: tuple = ()
    surface: np.ndarray | None = None
    evaluations: int = 0

    def surface_rows(self):
        """(lambda_1, lambda_2, cost, log_cost) rows of a two-axis surface."""
        if self.surface is None or len(self.axes) != 2:
            raise ValueError("no two-dimensional surface was retained")
        rows = []
        for i, x in enumerate(self.axes[0]):
            for j, y in enumerate(self.axes[1]):
                c = float(self.surface[i, j])
                rows.append((float(x), float(y), c, math.log(c) if c > 0 else -math.inf))
        return rows

    def write_surface_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lam1", "lam2", "cost", "log_cost"])
            for r in self.surface_rows():
                w.writerow([repr(v) for v in r])


def _evaluate(cost, points: list, workers: int) -> np.ndarray:
    if workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(cost, points, chunksize=max(1, len(points) // (4 * workers))))
    else:
        vals = [cost(p) for p in points]
    return np.array(vals, dtype=float)


def _argmin(vals: np.ndarray) -> int:
    if vals.size == 0:
        raise ValueError("empty grid")
    if not np.isfinite(vals).any():
        raise TruncationError("every grid point lost its mass to truncation")
    return int(np.nanargmin(np.where(np.isfinite(vals), vals, np.inf)))


def _search_axes(cost, axes, workers):
    points = list(itertools.product(*axes))
    vals = _evaluate(cost, points, workers)
    k = _argmin(vals)
    return points[k], float(vals[k]), vals.reshape([len(a) for a in axes]), len(points)


def grid_search(empirical: LeafJointDist, topology: Topology, grid: GridSpec = GridSpec(),
                distance: str = "euclidean", limits: Limits = Limits(), d0=1,
                workers: int = 1, keep_surface: bool = False) -> GridResult:
    """Rates minimizing the distance to ``empirical`` over a grid.

    Up to ``grid.full_max_dim`` queues the full Cartesian grid at ``grid.step``
    is scanned. Beyond that, a full scan at the coarsest refinement step is
    followed by scans of a +-2 step neighbourhood at each finer step.
    """
    cost = make_cost(empirical, topology, distance, limits, d0)
    k = topology.size
    if k <= grid.full_max_dim:
        axes = [grid.axis()] * k
        best, val, surf, n = _search_axes(cost, axes, workers)
        return GridResult(ParameterVector(best, grid.lo, grid.hi), val,
                          tuple(axes) if keep_surface else (),
                          surf if keep_surface else None, n)

    steps = [s for s in grid.refine if s >= grid.step - 1e-12] or [grid.step]
    axes = [grid.axis(step=steps[0])] * k
    best, val, _, n = _search_axes(cost, axes, workers)
    for prev, step in zip(steps, steps[1:]):
        axes = [grid.axis(b - 2 * prev, b + 2 * prev, step) for b in best]
        # keep the lattice aligned with the fine grid
        axes = [np.round(grid.lo + step * np.round((a - grid.lo) / step), 10) for a in axes]
        axes = [np.unique(a[(a >= grid.lo - 1e-9) & (a <= grid.hi + 1e-9)]) for a in axes]
        best, val, _, m = _search_axes(cost, axes, workers)
        n += m
    return GridResult(ParameterVector(best, grid.lo, grid.hi), val, evaluations=n)


# ---------------------------------------------------------- adaptive tracking

def numeric_gradient(cost: Callable, at, h: float = 1e-3, lo: float = BOX[0],
                     hi: float = BOX[1]) -> np.ndarray:
    """Central differences; one-sided at a coordinate whose +-h leaves the box."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(at.values if isinstance(at, ParameterVector) else at, dtype=float)
    g = np.zeros_like(x)
    f0 = None
    for k in range(x.size):
        up, dn = x.copy(), x.copy()
        up[k] += h
        dn[k] -= h
        if up[k] <= hi + 1e-12 and dn[k] >= lo - 1e-12:
            g[k] = (cost(up) - cost(dn)) / (2 * h)
            continue
        if f0 is None:
            f0 = cost(x)
        if up[k] <= hi + 1e-12:
            g[k] = (cost(up) - f0) / h
        else:
            g[k] = (f0 - cost(dn)) / h
    return g


@dataclass(frozen=True)
class EstimatorConfig:
    a: float = 0.05
    alpha0: float = 0.02
    alpha_min: float = 1e-4
    alpha_max: float = 0.1
    decrease: float = 0.5
    increase: float = 1.2
    grad_threshold: float = 0.05
    h: float = 1e-3
    lo: float = BOX[0]
    hi: float = BOX[1]
    distance: str = "euclidean"
    reject_uphill: bool = True  # keep the old estimate when the step raised the distance

    def __post_init__(self):
        if not (0 < self.a <= 1):
            raise ValueError("a must lie in (0, 1]")
        if not (0 < self.alpha_min <= self.alpha0 <= self.alpha_max):
            raise ValueError("need 0 < alpha_min <= alpha0 <= alpha_max")
        if not (0 < self.decrease < 1 < self.increase):
            raise ValueError("need decrease in (0, 1) and increase > 1")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")


@dataclass(frozen=True)
class TraceRecord:
    n: int
    estimate: tuple
    distance: float
    alpha: float
    grad_norm: float = 0.0
    skipped: bool = False


@dataclass(frozen=True, eq=False)
class EstimatorState:
    estimate: ParameterVector
    blend: LeafJointDist | None = None
    alpha: float = EstimatorConfig.alpha0
    n: int = 0
    config: EstimatorConfig = field(default_factory=EstimatorConfig)

    @classmethod
    def start(cls, initial, config: EstimatorConfig = EstimatorConfig()) -> "EstimatorState":
        est = ParameterVector.clipped(initial, config.lo, config.hi)
        return cls(est, None, config.alpha0, 0, config)


def blend_laws(old: LeafJointDist | None, new: LeafJointDist, a: float) -> LeafJointDist:
    if old is None:
        return new
    if old.kappa != new.kappa or old.n3 != new.n3:
        raise ValueError("blended laws must share leaves and n3")
    return LeafJointDist(new.n3, new.kappa, table=(1 - a) * old.dense() + a * new.dense(),
                         overflow=(1 - a) * old.overflow + a * new.overflow,
                         count=new.count)


def adaptive_step(state: EstimatorState, new_block: LeafJointDist, topology: Topology,
                  limits: Limits = Limits(), d0=1):
    """Blend in one block and take one normalized steepest-descent step.

    Returns the new state and its trace record. The step size shrinks when
    the step increased the distance and grows when the gradient is steep,
    always staying within [alpha_min, alpha_max].
    """
    cfg = state.config
    blend = blend_laws(state.blend, new_block, cfg.a)
    cost = make_cost(blend, topology, cfg.distance, limits, d0)
    x = state.estimate.array()
    before = cost(x)
    g = numeric_gradient(cost, x, cfg.h, cfg.lo, cfg.hi)
    norm = float(np.linalg.norm(g))
    n = state.n + 1
    if not np.isfinite(norm) or norm == 0.0:
        new = replace(state, blend=blend, n=n)
        return new, TraceRecord(n, state.estimate.values, before, state.alpha, 0.0, True)

    x_new = np.clip(x - state.alpha * g / norm, cfg.lo, cfg.hi)
    after = cost(x_new)
    alpha = state.alpha
    if after > before:
        alpha = max(alpha * cfg.decrease, cfg.alpha_min)
        if cfg.reject_uphill:
            x_new, after = x, before
    elif norm > cfg.grad_threshold:
        alpha = min(alpha * cfg.increase, cfg.alpha_max)
    est = ParameterVector(tuple(x_new), cfg.lo, cfg.hi)
    new = EstimatorState(est, blend, alpha, n, cfg)
    return new, TraceRecord(n, est.values, after, alpha, norm)


def track(blocks: Iterable[LeafJointDist], topology: Topology, initial,
          config: EstimatorConfig = EstimatorConfig(), limits: Limits = Limits(), d0=1):
    """Run ``adaptive_step`` over a stream of per-block empirical laws."""
    state = EstimatorState.start(initial, config)
    trace = []
    for blk in blocks:
        state, rec = adaptive_step(state, blk, topology, limits, d0)
        trace.append(rec)
    return state, trace


def write_trace_csv(trace: Sequence[TraceRecord], path):
    k = len(trace[0].estimate) if trace else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", *[f"lam{i + 1}" for i in range(k)], "distance", "step_size"])
        for r in trace:
            w.writerow([r.n, *map(repr, r.estimate), repr(r.distance), repr(r.alpha)])


VALLEY_RATIO = 0.05


def valley_witness(result: GridResult, ratio_max: float = VALLEY_RATIO) -> dict:
    """Summarize the cost valley of a two-axis surface.

    For each lambda_1 the valley floor is the minimizing lambda_2 (columns
    whose minimum sits on the grid edge are left out). A straight line is
    fitted through the floor, and the spread of floor costs is compared with
    the dynamic range of the whole surface. A ratio below ``ratio_max`` means
    the surface has a nearly flat valley.
    """
    if result.surface is None or len(result.axes) != 2:
        raise ValueError("valley needs a retained two-axis surface")
    x, y = (np.asarray(a) for a in result.axes)
    surf = np.where(np.isfinite(result.surface), result.surface, np.nan)
    idx = np.nanargmin(surf, axis=1)
    inner = (idx > 0) & (idx < y.size - 1)
    if inner.sum() < 2:
        return {"points": int(inner.sum()), "slope": None, "intercept": None,
                "ratio": None, "is_valley": False}
    xs, ys = x[inner], y[idx[inner]]
    floor = surf[np.flatnonzero(inner), idx[inner]]
    slope, intercept = np.polyfit(xs, ys, 1)
    span = float(np.nanmax(surf) - np.nanmin(surf))
    ratio = float((floor.max() - floor.min()) / span) if span > 0 else 0.0
    return {"points": int(inner.sum()), "slope": float(slope), "intercept": float(intercept),
            "lam1_range": [float(xs.min()), float(xs.max())], "floor_cost_range":
            [float(floor.min()), float(floor.max())], "ratio": ratio,
            "is_valley": bool(ratio < ratio_max)}
