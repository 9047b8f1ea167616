import csv
import json
import math

import numpy as np
import pytest

from disperse import cli
from disperse.config import parse_config
from disperse.errors import ConfigError, DivergenceError

ONE_QUEUE = """\
topology:
  nodes:
    - name: q1
      arrival: {family: poisson, rate: 0.5}
limits: {n1: 60, n2: 60, n3: 30}
probe: {d0: 1, rate: 0.005, horizon: 200000, seed: 1}
"""

TWO_QUEUE = """\
topology:
  nodes:
    - name: a
      arrival: {family: poisson, rate: 0.3}
    - name: b
      parent: a
      arrival: {family: poisson, rate: 0.8}
limits: {n1: 60, n2: 60, n3: 40}
probe: {d0: 1, rate: 0.005, horizon: 400000, seed: 2}
estimator:
  input: analytic
  grid: {lo: 0.05, hi: 0.95, step: 0.05}
"""


def run(tmp_path, text, command, *extra, name="cfg.yaml"):
    cfg = tmp_path / name
    cfg.write_text(text)
    out = tmp_path / "out"
    code = cli.main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_unknown_key_reports_line_and_column():
    text = ONE_QUEUE.replace("rate: 0.5}", "rate: 0.5, burst: 2}")
    with pytest.raises(ConfigError) as err:
        parse_config(text, "x.yaml")
    assert "x.yaml:4:" in str(err.value) and "burst" in str(err.value)


def test_yaml_syntax_error_located():
    with pytest.raises(ConfigError) as err:
        parse_config("topology: [1, 2\n", "bad.yaml")
    assert "bad.yaml:" in str(err.value)


def test_json_config_accepted():
    cfg = parse_config(json.dumps({"topology": {"nodes": [{"name": "q", "arrival": {"rate": 0.2}}]}}))
    assert cfg.topology.build().size == 1


def test_missing_rate_and_bad_parent():
    with pytest.raises(ConfigError):
        parse_config("topology:\n  nodes:\n    - name: q\n      arrival: {family: poisson}\n")
    cfg = parse_config("topology:\n  nodes:\n    - {name: q, parent: z, arrival: {rate: 0.1}}\n")
    with pytest.raises(ConfigError):
        cfg.topology.build()


def test_dist_single_queue_rows_are_poisson(tmp_path):
    code, out = run(tmp_path, ONE_QUEUE, "dist")
    assert code == 0
    rows = read_csv(out / "dist.csv")
    assert rows[0] == ["d_1", "prob"]
    for k in range(10):
        s, p = rows[1 + k]
        assert int(s) == k + 1
        assert float(p) == pytest.approx(math.exp(-0.5) * 0.5 ** k / math.factorial(k), abs=1e-12)
    meta = json.loads((out / "dist.json").read_text())
    assert meta["leakage"] < 1e-6


def test_dist_zero_load_path(tmp_path):
    text = """\
topology:
  nodes:
    - {name: a, arrival: {rate: 0.0}}
    - {name: b, parent: a, arrival: {rate: 0.0}}
    - {name: c, parent: b, arrival: {rate: 0.0}}
probe: {d0: 3}
"""
    code, out = run(tmp_path, text, "dist")
    assert code == 0
    assert read_csv(out / "dist.csv")[1:] == [["3", "1.0"]]


def test_dist_multi_leaf_table(tmp_path):
    text = """\
topology:
  nodes:
    - {name: r, arrival: {rate: 0.3}}
    - {name: x, parent: r, arrival: {rate: 0.4}}
    - {name: y, parent: r, arrival: {rate: 0.5}}
limits: {n3: 20}
"""
    code, out = run(tmp_path, text, "dist")
    rows = read_csv(out / "dist.csv")
    assert rows[0] == ["d_1", "d_2", "prob"]
    assert sum(float(r[2]) for r in rows[1:]) == pytest.approx(1.0)


def test_exit_codes(tmp_path):
    assert run(tmp_path, ONE_QUEUE.replace("rate: 0.5}", "rate: 1.5}"), "dist")[0] == 3
    assert run(tmp_path, ONE_QUEUE.replace("n3: 30", "n3: 3"), "dist")[0] == 4
    assert run(tmp_path, ONE_QUEUE + "bogus: 1\n", "dist")[0] == 2
    assert run(tmp_path, ONE_QUEUE, "surface")[0] == 2  # needs two queues


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("zero model mass")

    monkeypatch.setitem(cli.COMMANDS, "estimate", boom)
    assert run(tmp_path, ONE_QUEUE, "estimate")[0] == 5


def test_verify_passes_and_fails(tmp_path):
    code, out = run(tmp_path, ONE_QUEUE.replace("horizon: 200000", "horizon: 12000000"), "dist",
                    "--verify")
    assert code == 0
    assert json.loads((out / "dist.json").read_text())["verify"]["ok"]
    code, _ = run(tmp_path, ONE_QUEUE.replace("horizon: 200000", "horizon: 20000"), "simulate",
                  "--verify")
    assert code == cli.EXIT_VERIFY


def test_simulate_outputs(tmp_path):
    code, out = run(tmp_path, ONE_QUEUE, "simulate")
    rows = read_csv(out / "samples.csv")
    meta = json.loads((out / "simulate.json").read_text())
    assert rows[0] == ["launch_slot", "probe_id", "d_1"]
    assert len(rows) - 1 == meta["pairs"]


def test_estimate_grid_analytic_recovers_truth(tmp_path):
    code, out = run(tmp_path, TWO_QUEUE, "estimate")
    assert code == 0
    meta = json.loads((out / "estimate.json").read_text())
    assert meta["estimate"] == pytest.approx([0.3, 0.8])


def test_surface_analytic_minimum_and_columns(tmp_path):
    code, out = run(tmp_path, TWO_QUEUE, "surface", "--workers", "3")
    assert code == 0
    rows = read_csv(out / "surface.csv")
    assert rows[0] == ["lam1", "lam2", "cost", "log_cost"]
    assert len(rows) - 1 == 19 * 19
    meta = json.loads((out / "surface.json").read_text())
    assert meta["minimum"] == pytest.approx([0.3, 0.8])
    assert meta["valley"]["is_valley"]


def test_surface_budget_error(tmp_path):
    text = TWO_QUEUE.replace("step: 0.05}", "step: 0.05}\n  max_ops: 1000")
    assert run(tmp_path, text, "surface")[0] == 2


def test_outputs_are_byte_identical(tmp_path, monkeypatch):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for base in (a, b):
        for cmd in ("dist", "simulate", "surface"):
            text = TWO_QUEUE.replace("input: analytic", "input: simulate")
            code, out = run(base, text, cmd)
            assert code == 0
    monkeypatch.setenv(cli.WORKERS_ENV, "4")
    c = tmp_path / "c"
    c.mkdir()
    run(c, TWO_QUEUE.replace("input: analytic", "input: simulate"), "surface")
    for f in (a / "out").iterdir():
        assert f.read_bytes() == (b / "out" / f.name).read_bytes()
    assert (a / "out" / "surface.csv").read_bytes() == (c / "out" / "surface.csv").read_bytes()


def test_adaptive_estimate_writes_trace(tmp_path):
    text = """\
topology:
  nodes:
    - {name: a, arrival: {rate: 0.4}}
    - {name: b, parent: a, arrival: {rate: 0.5}}
limits: {n3: 30}
probe: {rate: 0.01, horizon: 300000, seed: 4, block: 500}
estimator:
  mode: adaptive
  adaptive: {initial: [0.3, 0.3]}
schedule:
  a:
    - {start: 0, rate_start: 0.3, rate_end: 0.5}
"""
    code, out = run(tmp_path, text, "estimate")
    assert code == 0
    trace = read_csv(out / "trace.csv")
    assert trace[0] == ["n", "lam1", "lam2", "distance", "step_size"]
    meta = json.loads((out / "estimate.json").read_text())
    assert meta["blocks"] == len(trace) - 1


def test_bad_worker_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "many")
    assert run(tmp_path, ONE_QUEUE, "dist")[0] == 2


def test_shipped_configs_parse():
    import pathlib

    root = pathlib.Path(__file__).resolve().parent.parent / "configs"
    for path in sorted(root.glob("*.yaml")):
        cfg = parse_config(path.read_text(), str(path))
        cli.sim_config(cfg)
