import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from disperse.errors import StabilityError, TruncationError
from disperse.prob import (EARLY, LATE, ArrivalModel, Limits, Pmf, SeparationDist,
                           materialize_arrival_pmf, poisson_tail_bound, position_split_pmf,
                           stationary_dist, tv_distance)

from oracles import power_iteration_occupancy


def test_poisson_zero_rate_is_point_mass():
    pmf = materialize_arrival_pmf(ArrivalModel.poisson(0.0), 5)
    assert pmf.mass.tolist() == [1, 0, 0, 0, 0, 0]
    assert pmf.tail_mass == 0


def test_poisson_half_matches_closed_form():
    pmf = materialize_arrival_pmf(ArrivalModel.poisson(0.5), 20)
    assert pmf[0] == pytest.approx(math.exp(-0.5), abs=1e-15)
    for k in range(21):
        assert pmf[k] == pytest.approx(math.exp(-0.5) * 0.5 ** k / math.factorial(k), rel=1e-12)
    assert pmf.tail_mass < 1e-15


def test_explicit_pmf_echoed():
    pmf = materialize_arrival_pmf(ArrivalModel.explicit([0.7, 0.3]))
    assert pmf.mass.tolist() == [0.7, 0.3]


def test_unstable_rate_rejected():
    with pytest.raises(StabilityError):
        ArrivalModel.poisson(1.0)
    with pytest.raises(StabilityError):
        ArrivalModel.explicit([0.0, 0.0, 1.0])


def test_negative_or_oversized_pmf_rejected():
    with pytest.raises(ValueError):
        Pmf(np.array([0.5, -0.1]))
    with pytest.raises(ValueError):
        Pmf(np.array([0.7, 0.7]))


@given(st.floats(0.0, 0.95), st.integers(5, 60))
def test_pmf_mass_plus_tail_is_one(rate, n):
    pmf = materialize_arrival_pmf(ArrivalModel.poisson(rate), n)
    assert pmf.mass.sum() + pmf.tail_mass == pytest.approx(1.0, abs=1e-9)


def test_check_tail_raises_on_heavy_tail():
    pmf = materialize_arrival_pmf(ArrivalModel.poisson(0.9), 2)
    with pytest.raises(TruncationError):
        pmf.check_tail(1e-6)


def test_stationary_zero_rate():
    st_ = stationary_dist(ArrivalModel.poisson(0.0), 10, LATE)
    assert st_.pi[0] == 1.0 and st_.pi[1:].sum() == 0.0


@given(st.floats(0.01, 0.95))
def test_late_pi0_is_one_minus_rate(rate):
    st_ = stationary_dist(ArrivalModel.poisson(rate), 40, LATE)
    assert st_.pi[0] == pytest.approx(1 - rate, abs=1e-15)


def test_early_pi0_half():
    st_ = stationary_dist(ArrivalModel.poisson(0.5), 40, EARLY)
    assert st_.pi[0] == pytest.approx(0.5 / math.exp(-0.5), abs=1e-12)


@pytest.mark.parametrize("rate", [0.3, 0.5, 0.8, 0.95])
def test_stationary_matches_power_iteration(rate):
    p = stats.poisson.pmf(np.arange(80), rate)
    early = power_iteration_occupancy(p, 400, iters=200000, tol=1e-16)
    # after-arrivals occupancy: y = c + A
    late = np.convolve(early, p)[:400]
    n = 40
    e = stationary_dist(ArrivalModel.poisson(rate), n, EARLY).pi
    l_ = stationary_dist(ArrivalModel.poisson(rate), n, LATE).pi
    assert np.abs(e - early[: n + 1]).max() < 1e-9
    assert np.abs(l_ - late[: n + 1]).max() < 1e-9


def test_stationary_explicit_pmf_matches_power_iteration():
    p = [0.45, 0.35, 0.1, 0.1]
    early = power_iteration_occupancy(p, 200)
    e = stationary_dist(ArrivalModel.explicit(p), 30, EARLY).pi
    assert np.abs(e - early[:31]).max() < 1e-10


def test_stationary_needs_positive_p0():
    with pytest.raises(ZeroDivisionError):
        stationary_dist(Pmf(np.array([0.0, 0.95]), tail=0.05), 5)


def test_split_law_deterministic_three():
    split = position_split_pmf(Pmf(np.array([0.0, 0.0, 0.0, 1.0])))
    assert np.allclose(split.mass, [0.25] * 4)


def test_split_law_always_zero():
    split = position_split_pmf(Pmf(np.array([1.0, 0.0, 0.0])))
    assert split.mass.tolist() == [1.0, 0.0, 0.0]


def test_split_law_double_sum():
    arr = materialize_arrival_pmf(ArrivalModel.poisson(0.8), 20)
    split = position_split_pmf(arr)
    p = arr.mass
    for k in range(21):
        direct = sum(p[j] / (j + 1) for j in range(k, 21))
        assert split[k] == pytest.approx(direct, abs=1e-12)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12))
def test_split_law_preserves_mass_and_halves_mean(raw):
    w = np.array(raw)
    if w.sum() == 0:
        w[0] = 1.0
    p = w / w.sum() * 0.999
    split = position_split_pmf(Pmf(p))
    assert split.mass.sum() == pytest.approx(p.sum(), abs=1e-12)
    mean_a = float(np.arange(p.size) @ p)
    assert split.mean() == pytest.approx(mean_a / 2, abs=1e-9)


def test_separation_point_and_vector():
    s = SeparationDist.point(3, 5)
    assert s.vector(5).tolist() == [0, 0, 1, 0, 0]
    assert s.mean() == 3


def test_limits_validation():
    with pytest.raises(ValueError):
        Limits(0, 1, 1)


def test_tv_distance_pads():
    assert tv_distance([1.0], [0.0, 1.0]) == 1.0


def test_poisson_tail_bound():
    n = poisson_tail_bound(0.5, 1e-9)
    assert stats.poisson.sf(n, 0.5) < 1e-9 <= stats.poisson.sf(n - 1, 0.5)
