"""Truncated PMFs, arrival laws and stationary queue-occupancy distributions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import StabilityError, TruncationError

LATE = "late"  # queue observed just after the slot's arrivals
EARLY = "early"  # queue observed at slot start, before arrivals
CONVENTIONS = (LATE, EARLY)

DEFAULT_TAIL_TOL = 1e-6
NEGATIVE_CLAMP = 1e-12


@dataclass(frozen=True)
class Limits:
    """Truncation bounds: queue occupancy (n1), input separation (n2), output separation (n3)."""

    n1: int = 60
    n2: int = 60
    n3: int = 60
    tail_tol: float = DEFAULT_TAIL_TOL

    def __post_init__(self):
        if min(self.n1, self.n2, self.n3) < 1:
            raise ValueError(f"truncation limits must be >= 1, got {self}")
        if not self.tail_tol > 0:
            raise ValueError("tail_tol must be positive")


@dataclass(frozen=True, eq=False)
class Pmf:
    """Probability mass on ``offset, offset+1, ...`` with any missing mass kept explicit.

    ``tail`` is the mass known to lie beyond the stored support. When it is
    not given it is inferred as ``1 - sum(mass)``.
    """

    mass: np.ndarray
    offset: int = 0
    tail: float | None = None

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float, copy=True).ravel()
        if mass.size == 0:
            raise ValueError("empty pmf")
        if not np.all(np.isfinite(mass)):
            raise ValueError("pmf has non-finite entries")
        if mass.min() < 0:
            raise ValueError(f"pmf has negative entry {mass.min():.3g}")
        if mass.sum() > 1 + 1e-12:
            raise ValueError(f"pmf sums to {mass.sum():.15g} > 1")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")
        mass.flags.writeable = False
        object.__setattr__(self, "mass", mass)

    @property
    def tail_mass(self) -> float:
        if self.tail is not None:
            return float(self.tail)
        return max(0.0, 1.0 - float(self.mass.sum()))

    @property
    def truncation_bound(self) -> int:
        return self.offset + self.mass.size - 1

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.mass.size)

    def __len__(self):
        return self.mass.size

    def __getitem__(self, k: int) -> float:
        i = k - self.offset
        if 0 <= i < self.mass.size:
            return float(self.mass[i])
        return 0.0

    def prob(self, k: int) -> float:
        return self[k]

    def mean(self) -> float:
        return float(self.support @ self.mass)

    def padded(self, upto: int) -> np.ndarray:
        """Dense vector indexed by value 0..upto (mass beyond ``upto`` dropped)."""
        out = np.zeros(upto + 1)
        lo, hi = self.offset, min(self.truncation_bound, upto)
        if hi >= lo:
            out[lo : hi + 1] = self.mass[: hi - lo + 1]
        return out

    def check_tail(self, tol: float = DEFAULT_TAIL_TOL, what: str = "pmf"):
        if self.tail_mass >= tol:
            raise TruncationError(
                f"{what}: tail mass {self.tail_mass:.3g} beyond {self.truncation_bound} "
                f"exceeds tolerance {tol:g}",
                lost=self.tail_mass,
            )
        return self

    def csv_rows(self):
        return [(int(k), float(p)) for k, p in zip(self.support, self.mass)]

    def to_json(self) -> str:
        return json.dumps({"offset": self.offset, "mass": self.mass.tolist(),
                           "tail_mass": self.tail_mass})


@dataclass(frozen=True, eq=False)
class SeparationDist(Pmf):
    """Distribution of a probe separation (always >= 1 slot).

    ``leakage`` is the mass dropped by truncation on the way here; ``renorm``
    is the factor the stored mass was multiplied by (1.0 when not renormalized).
    """

    offset: int = 1
    leakage: float = 0.0
    renorm: float = 1.0
    stage_leakage: tuple = ()

    def __post_init__(self):
        super().__post_init__()
        if self.offset < 1:
            raise ValueError("separations are >= 1 slot")

    @classmethod
    def point(cls, s: int, length: int | None = None) -> "SeparationDist":
        n = max(s, length or s)
        v = np.zeros(n)
        v[s - 1] = 1.0
        return cls(v)

    def vector(self, n: int) -> np.ndarray:
        """Probabilities of s = 1..n."""
        return self.padded(n)[1:]


@dataclass(frozen=True)
class ArrivalModel:
    """i.i.d. per-slot batch-arrival law.

    ``family`` is ``"poisson"`` (params = (rate,)) or ``"pmf"`` (params are
    the explicit probabilities of 0, 1, 2, ... arrivals).
    """

    family: str
    params: tuple = ()
    n_max: int = 60

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(x) for x in self.params))
        if self.family == "poisson":
            if len(self.params) != 1:
                raise ValueError("poisson takes exactly one parameter (rate)")
        elif self.family == "pmf":
            if not self.params:
                raise ValueError("explicit pmf needs at least one probability")
            if min(self.params) < 0 or sum(self.params) > 1 + 1e-12:
                raise ValueError("explicit pmf entries must be >= 0 and sum to <= 1")
        else:
            raise ValueError(f"unknown arrival family {self.family!r}")
        lam = self.mean
        if not (0 <= lam < 1):
            raise StabilityError(f"arrival rate {lam:g} outside [0, 1)")

    @classmethod
    def poisson(cls, rate: float, n_max: int = 60) -> "ArrivalModel":
        return cls("poisson", (rate,), n_max)

    @classmethod
    def explicit(cls, probs: Sequence[float]) -> "ArrivalModel":
        return cls("pmf", tuple(probs), max(len(probs) - 1, 0))

    @property
    def mean(self) -> float:
        if self.family == "poisson":
            return self.params[0]
        return float(sum(k * p for k, p in enumerate(self.params)))

    rate = mean


def materialize_arrival_pmf(model: ArrivalModel, n_max: int | None = None) -> Pmf:
    """Evaluate p_0..p_{n_max} for ``model``; the tail beyond is recorded exactly."""
    if n_max is None:
        n_max = model.n_max
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    if not (0 <= model.mean < 1):
        raise StabilityError(f"arrival rate {model.mean:g} outside [0, 1)")
    k = np.arange(n_max + 1)
    if model.family == "poisson":
        lam = model.params[0]
        if lam == 0:
            mass = (k == 0).astype(float)
            tail = 0.0
        else:
            mass = stats.poisson.pmf(k, lam)
            tail = float(stats.poisson.sf(n_max, lam))
    else:
        probs = np.asarray(model.params, dtype=float)
        mass = np.zeros(n_max + 1)
        n = min(probs.size, n_max + 1)
        mass[:n] = probs[:n]
        tail = float(probs[n:].sum()) + max(0.0, 1.0 - float(probs.sum()))
    return Pmf(mass, 0, tail)


def _survival(arrival: Pmf, upto: int) -> np.ndarray:
    """P{A >= k} for k = 0..upto, built from positive terms only."""
    p = arrival.padded(upto)
    beyond = arrival.tail_mass + float(arrival.mass[upto + 1 - arrival.offset:].sum()) \
        if arrival.truncation_bound > upto else arrival.tail_mass
    return np.cumsum(p[::-1])[::-1] + beyond


@dataclass(frozen=True, eq=False)
class StationaryDist:
    pmf: Pmf
    convention: str

    @property
    def pi(self) -> np.ndarray:
        return self.pmf.mass

    @property
    def tail_mass(self) -> float:
        return self.pmf.tail_mass


def stationary_dist(model: ArrivalModel | Pmf, n1: int, convention: str = LATE) -> StationaryDist:
    """Stationary occupancy pi_0..pi_{n1} of the slotted queue.

    Uses the level-crossing balance ``pi_{q+1} p_0 = sum_i pi_i P{A >= q+2-i}``
    (with ``P{A >= q+1}`` for the i = 0 term under the late convention). It is
    algebraically the same forward recursion as subtracting convolution terms
    from the generating function, but every term is non-negative, so the
    recursion does not lose precision when p_0 is small.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    if n1 < 0:
        raise ValueError("n1 must be >= 0")
    arrival = model if isinstance(model, Pmf) else materialize_arrival_pmf(
        model, max(model.n_max, n1 + 2))
    lam = arrival.mean()
    if isinstance(model, ArrivalModel):
        lam = model.mean
    if lam >= 1:
        raise StabilityError(f"arrival rate {lam:g} >= 1: queue is unstable")
    p0 = arrival[0]
    if p0 <= 0:
        raise ZeroDivisionError("p_0 = 0: the occupancy recursion divides by p_0")

    sf = _survival(arrival, n1 + 2)
    pi = np.zeros(n1 + 1)
    if convention == LATE:
        pi[0] = 1.0 - lam
        for q in range(n1):
            # i = 0 and i = 1 both leave max(i-1, 0) = 0 behind
            acc = pi[0] * sf[q + 1]
            if q >= 1:
                acc += pi[1 : q + 1] @ sf[q + 1 : 1 : -1]
            pi[q + 1] = acc / p0
    else:
        pi[0] = (1.0 - lam) / p0
        for q in range(n1):
            pi[q + 1] = (pi[: q + 1] @ sf[q + 2 : 1 : -1]) / p0

    neg = pi.min()
    if neg < -NEGATIVE_CLAMP:
        raise ArithmeticError(f"occupancy recursion went negative ({neg:.3g})")
    pi = np.clip(pi, 0.0, None)
    total = pi.sum()
    if total > 1:
        # round-off only; the exact partial sums are below 1
        pi = pi / total
    return StationaryDist(Pmf(pi, 0, max(0.0, 1.0 - float(pi.sum()))), convention)


def position_split_pmf(arrival: Pmf) -> Pmf:
    """Law of the number of same-slot packets queued ahead of (or behind) a probe
    placed uniformly at random in its batch: P{A'=k} = sum_{j>=k} p_j / (j+1)."""
    p = arrival.padded(arrival.truncation_bound)
    w = p / np.arange(1, p.size + 1)
    split = np.cumsum(w[::-1])[::-1]
    # every batch size j <= bound keeps its full mass within 0..j
    return Pmf(split, 0, arrival.tail_mass)


def poisson_model_pmf(rate: float, n: int) -> Pmf:
    return materialize_arrival_pmf(ArrivalModel.poisson(rate, n), n)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation between two (possibly differently sized) mass vectors."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    n = max(p.size, q.size)
    p = np.pad(p, (0, n - p.size))
    q = np.pad(q, (0, n - q.size))
    return 0.5 * float(np.abs(p - q).sum())


def poisson_tail_bound(rate: float, tol: float) -> int:
    """Smallest n with P{Poisson(rate) > n} < tol."""
    if rate == 0:
        return 0
    n = int(math.ceil(rate))
    while stats.poisson.sf(n, rate) >= tol:
        n += 1
    return n
