import warnings

import numpy as np
import pytest

from disperse.errors import ConfigError, StabilityError
from disperse.kernel import joint_unconditioned
from disperse.network import Topology, propagate_path, propagate_tree
from disperse.prob import (EARLY, LATE, ArrivalModel, Limits, materialize_arrival_pmf,
                           stationary_dist, tv_distance)
from disperse.simulator import (DispersionSamples, ProbeOverlapWarning, Segment, SimConfig,
                                blocked_empirical_stream, empirical_dist, occupancy_frequencies,
                                rate_at, simulate)

P = ArrivalModel.poisson


def _quiet(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ProbeOverlapWarning)
        return simulate(cfg)


def test_zero_load_keeps_input_separation():
    t = Topology.tree([P(0.0)] * 3, [None, 0, 0])
    s = _quiet(SimConfig(t, probe_rate=0.01, d0=4, horizon=50_000, seed=3))
    assert len(s) > 0
    assert np.all(s.seps == 4)


def test_reruns_are_bit_identical():
    t = Topology.path([P(0.5), P(0.6)])
    cfg = SimConfig(t, probe_rate=0.01, horizon=300_000, seed=11)
    a, b = _quiet(cfg), _quiet(cfg)
    assert a.seps.tobytes() == b.seps.tobytes()
    assert a.launch_slot.tobytes() == b.launch_slot.tobytes()
    c = _quiet(SimConfig(t, probe_rate=0.01, horizon=300_000, seed=12))
    assert a.seps.tobytes() != c.seps.tobytes()


def test_samples_are_valid():
    t = Topology.tree([P(0.5), P(0.6), P(0.2)], [None, 0, 0])
    s = _quiet(SimConfig(t, probe_rate=0.01, horizon=200_000, seed=1))
    assert s.kappa == 2
    assert np.all(s.seps >= 1)
    assert len(s) == s.meta["pairs_completed"] == s.seps.shape[0]
    assert np.all(np.diff(s.launch_slot) > 0)


def test_work_conservation_audit():
    t = Topology.path([P(0.7), P(0.5)])
    s = _quiet(SimConfig(t, probe_rate=0.01, horizon=200_000, seed=2, audit=True))
    assert s.meta["work_conserving"] is True


def test_unstable_schedule_rejected():
    t = Topology.path([P(0.5)])
    with pytest.raises(StabilityError):
        SimConfig(t, schedule={0: [Segment(0, 0.5, 1.0)]})
    with pytest.raises(ConfigError):
        SimConfig(t, horizon=0)
    with pytest.raises(ConfigError):
        SimConfig(t, schedule={0: [Segment(10, 0.5, 0.5), Segment(0, 0.2, 0.2)]})


def test_rate_schedule_ramp_and_step():
    segs = [Segment(0, 0.2, 0.4), Segment(100, 0.7, 0.7)]
    r = rate_at(segs, np.array([0, 50, 99, 100, 150]), 200)
    assert r == pytest.approx([0.2, 0.3, 0.398, 0.7, 0.7])


def test_scheduled_load_changes_dispersion():
    t = Topology.path([P(0.1)])
    s = _quiet(SimConfig(t, probe_rate=0.01, horizon=400_000, seed=5,
                         schedule={0: [Segment(0, 0.1, 0.1), Segment(200_000, 0.7, 0.7)]}))
    early = s.seps[s.launch_slot < 200_000, 0]
    late = s.seps[s.launch_slot >= 200_000, 0]
    assert early.mean() == pytest.approx(1.1, abs=0.05)
    assert late.mean() == pytest.approx(1.7, abs=0.08)


def test_overlap_warning_when_probing_too_fast():
    t = Topology.path([P(0.9)])
    with pytest.warns(ProbeOverlapWarning):
        simulate(SimConfig(t, probe_rate=0.05, horizon=100_000, seed=0))


def test_empirical_dist_basics(tmp_path):
    s = DispersionSamples(np.array([5]), np.array([0]), np.array([[3]]))
    law = empirical_dist(s, 10)
    assert law.dense()[2] == 1.0 and law.total == 1.0
    s2 = DispersionSamples(np.array([1, 2]), np.array([0, 1]), np.array([[3], [12]]))
    law2 = empirical_dist(s2, 10)
    assert law2.overflow == 0.5 and law2.total == 0.5
    with pytest.raises(ValueError):
        empirical_dist(DispersionSamples(np.array([], int), np.array([], int), np.zeros((0, 1), int)), 5)
    s2.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["launch_slot,probe_id,d_1", "1,0,3", "2,1,12"]


def test_blocked_stream_rules():
    rng = np.random.default_rng(0)
    seps = rng.integers(1, 5, size=(1000, 1))
    s = DispersionSamples(np.arange(1000), np.arange(1000), seps)
    raw = list(blocked_empirical_stream(s, 100, 1.0, 10))
    assert len(raw) == 10
    for k, law in enumerate(raw):
        ref = empirical_dist(s.subset(slice(100 * k, 100 * (k + 1))), 10)
        assert np.array_equal(law.dense(), ref.dense())
    two = list(blocked_empirical_stream(s.subset(slice(0, 200)), 100, 0.05, 10))
    expect = 0.95 * raw[0].dense() + 0.05 * raw[1].dense()
    assert np.array_equal(two[1].dense(), expect)
    with pytest.raises(ValueError):
        list(blocked_empirical_stream(s, 0, 0.5))
    with pytest.raises(ValueError):
        list(blocked_empirical_stream(s, 10, 0.0))


@pytest.mark.slow
def test_blended_stream_settles():
    t = Topology.path([P(0.5)])
    for seed in range(10):
        s = _quiet(SimConfig(t, probe_rate=0.01, horizon=3_000_000, seed=seed))
        laws = list(blocked_empirical_stream(s, 500, 0.05, 40))
        assert len(laws) > 50
        steps = [tv_distance(a.dense(), b.dense()) for a, b in zip(laws[49:], laws[50:])]
        assert max(steps) < 0.02


@pytest.mark.slow
@pytest.mark.parametrize("convention", [LATE, EARLY])
def test_occupancy_matches_stationary_law(convention):
    s = _quiet(SimConfig(Topology.path([P(0.5)]), probe_rate=1e-4, horizon=2_000_000, seed=4))
    freq = occupancy_frequencies(s, 0, convention)
    pi = stationary_dist(P(0.5), 40, convention).pi
    assert tv_distance(freq, pi) < 0.01


@pytest.mark.slow
def test_window_counts_match_unconditioned_joint():
    lam, m = 0.7, 4
    t = Topology.path([P(lam)])
    # gentle probing: at rate 0.005 the next pair lands inside a 4-slot window
    # about 2% of the time, which the isolated-pair model does not describe
    s = _quiet(SimConfig(t, probe_rate=0.001, d0=m, horizon=110_000_000, seed=8, record_window=True))
    assert len(s) >= 100_000
    arr = materialize_arrival_pmf(P(lam), 60)
    ref = joint_unconditioned(arr, stationary_dist(P(lam), 60, LATE), m, 40).table
    emp = np.zeros_like(ref)
    np.add.at(emp, (s.meta["window_departures"], np.minimum(s.meta["window_arrivals"], 40)), 1)
    emp /= emp.sum()
    assert tv_distance(emp.ravel(), ref.ravel()) < 0.01


@pytest.mark.slow
@pytest.mark.parametrize("lam,d0", [(0.5, 3), (0.8, 1)])
def test_single_queue_conditional_law(lam, d0):
    t = Topology.path([P(lam)])
    s = _quiet(SimConfig(t, probe_rate=0.005, d0=d0, horizon=22_000_000, seed=9))
    assert len(s) >= 100_000
    emp = empirical_dist(s, 60)
    ref = propagate_path([P(lam)], d0, Limits(60, 60, 60))
    assert tv_distance(emp.dense(), ref.vector(60)) < 0.01


@pytest.mark.slow
def test_tv_shrinks_like_inverse_sqrt():
    t = Topology.path([P(0.5)])
    ref = propagate_path([P(0.5)], 1, Limits(60, 60, 30)).vector(30)
    sizes = [1_000, 10_000, 100_000]
    tv = np.zeros((8, 3))
    for seed in range(8):
        s = _quiet(SimConfig(t, probe_rate=0.005, horizon=21_000_000, seed=100 + seed))
        for k, n in enumerate(sizes):
            tv[seed, k] = tv_distance(empirical_dist(s.subset(slice(0, n)), 30).dense(), ref)
    slope = np.polyfit(np.log(sizes), np.log(tv.mean(axis=0)), 1)[0]
    assert abs(slope + 0.5) <= 0.15


def test_tree_simulation_agrees_with_analytic_law():
    t = Topology.tree([P(0.4), P(0.5), P(0.3)], [None, 0, 0])
    s = _quiet(SimConfig(t, probe_rate=0.005, horizon=6_000_000, seed=21))
    emp = empirical_dist(s, 30).dense()
    ref = propagate_tree(t, 1, Limits(60, 60, 30)).dense()
    assert tv_distance(emp, ref) < 0.03
