"""``disperse`` command line: dist, simulate, estimate and surface.

Every command reads one experiment config and writes CSV (numbers) and JSON
(metadata and summaries) into the output directory. Outputs depend only on
the config, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DisperseError, UsageError
from .estimation import (EstimatorConfig, GridSpec, grid_search, track, valley_witness,
                         write_trace_csv)
from .kernel import op_count
from .network import LeafJointDist, Topology, propagate_tree
from .prob import Limits, tv_distance
from .simulator import (DispersionSamples, ProbeOverlapWarning, Segment, SimConfig, empirical_dist,
                        simulate, true_rates)

log = logging.getLogger("disperse")

EXIT_VERIFY = 6
VERIFY_TV = 0.01
VERIFY_MIN_PAIRS = 50_000
WORKERS_ENV = "DISPERSE_WORKERS"


class VerifyError(DisperseError):
    exit_code = EXIT_VERIFY


# ------------------------------------------------------------------- writing

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


class Writer:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = out
        self.prefix = cfg.outputs.prefix
        self.formats = set(cfg.outputs.formats)
        self.written: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / f"{self.prefix}{name}"

    def csv(self, name: str, header, rows):
        if "csv" not in self.formats:
            return
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.written.append(p)

    def json(self, name: str, obj):
        if "json" not in self.formats:
            return
        p = self.path(name)
        with open(p, "w") as fh:
            json.dump(_plain(obj), fh, sort_keys=True, indent=2)
            fh.write("\n")
        self.written.append(p)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _law_rows(law: LeafJointDist):
    """(d_1, ..., d_k, prob) for every cell with positive mass, in index order."""
    rows = [(*key, p) for key, p in law.items() if p > 0]
    rows.sort(key=lambda r: r[:-1])
    return rows


def _law_header(kappa: int):
    return [f"d_{k + 1}" for k in range(kappa)] + ["prob"]


# ------------------------------------------------------------ config plumbing

def sim_config(cfg: ExperimentConfig, topo: Topology | None = None) -> SimConfig:
    topo = topo or cfg.topology.build()
    names = [nd.name for nd in topo.nodes]
    schedule = {}
    for name, segs in cfg.schedule.items():
        if name not in names:
            raise ConfigError(f"schedule names unknown queue {name!r}")
        if not segs or segs[0].start != 0:
            raise ConfigError(f"schedule for {name!r} must start at slot 0")
        schedule[names.index(name)] = tuple(
            Segment(s.start, s.rate_start, s.rate_start if s.rate_end is None else s.rate_end)
            for s in segs)
    p = cfg.probe
    return SimConfig(topo, probe_rate=p.probe_rate, d0=p.d0, horizon=p.horizon, seed=p.seed,
                     schedule=schedule, warmup=p.warmup)


def _run_sim(cfg: ExperimentConfig, topo: Topology | None = None) -> DispersionSamples:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ProbeOverlapWarning)
        samples = simulate(sim_config(cfg, topo))
    for w in caught:
        log.warning("%s", w.message)
    return samples


def _analytic(cfg: ExperimentConfig, topo: Topology) -> LeafJointDist:
    return propagate_tree(topo, cfg.probe.d0, cfg.limits.build())


def _verify(analytic: LeafJointDist, samples: DispersionSamples, n3: int) -> dict:
    emp = empirical_dist(samples, n3)
    tv = tv_distance(emp.dense().ravel(), analytic.dense().ravel()) + 0.5 * emp.overflow
    if len(samples) < VERIFY_MIN_PAIRS:
        log.warning("verify: only %d pairs; the TV bound of %g assumes at least %d",
                    len(samples), VERIFY_TV, VERIFY_MIN_PAIRS)
    return {"tv": tv, "pairs": len(samples), "tolerance": VERIFY_TV, "ok": tv < VERIFY_TV}


def _check_verify(result: dict):
    print(f"verify: TV(analytic, simulated) = {result['tv']:.5f} over {result['pairs']} pairs")
    if not result["ok"]:
        raise VerifyError(f"analytic and simulated laws disagree: TV {result['tv']:.4g} "
                          f">= {VERIFY_TV}")


# ------------------------------------------------------------------ commands

def cmd_dist(cfg: ExperimentConfig, out: Writer, verify: bool = False, workers: int = 1):
    topo = cfg.topology.build()
    law = _analytic(cfg, topo)
    out.csv("dist.csv", _law_header(law.kappa), _law_rows(law))
    summary = {
        "leaves": [topo.nodes[i].name for i in topo.leaves],
        "n3": law.n3,
        "leakage": law.leakage,
        "renorm": law.renorm,
        "stage_leakage": list(law.stage_leakage),
        "d0": cfg.probe.d0,
    }
    if verify:
        summary["verify"] = _verify(law, _run_sim(cfg, topo), law.n3)
    out.json("dist.json", summary)
    print(f"truncation leakage: {law.leakage:.3e}")
    if verify:
        _check_verify(summary["verify"])


def cmd_simulate(cfg: ExperimentConfig, out: Writer, verify: bool = False, workers: int = 1):
    topo = cfg.topology.build()
    samples = _run_sim(cfg, topo)
    n3 = cfg.limits.n3
    out.csv("samples.csv", ["launch_slot", "probe_id"] + [f"d_{k + 1}" for k in range(samples.kappa)],
            ([int(t), int(i), *map(int, row)]
             for t, i, row in zip(samples.launch_slot, samples.probe_id, samples.seps)))
    emp = empirical_dist(samples, n3) if len(samples) else None
    summary = {
        "pairs": len(samples),
        "pairs_launched": samples.meta["pairs_launched"],
        "overlaps": samples.meta["overlaps"],
        "warmup": samples.meta["warmup"],
        "empirical": [list(r) for r in _law_rows(emp)] if emp else [],
        "overflow": emp.overflow if emp else 0.0,
    }
    if verify:
        if emp is None:
            raise VerifyError("no completed probe pairs to verify")
        summary["verify"] = _verify(_analytic(cfg, topo), samples, n3)
    out.json("simulate.json", summary)
    print(f"pairs: {len(samples)}")
    if verify:
        _check_verify(summary["verify"])


def _grid_spec(cfg: ExperimentConfig) -> GridSpec:
    g = cfg.estimator.grid
    if g.lo >= g.hi:
        raise ConfigError("estimator.grid: lo must be below hi")
    return GridSpec(g.lo, g.hi, g.step)


def _empirical_input(cfg: ExperimentConfig, topo: Topology) -> LeafJointDist:
    n3 = cfg.limits.n3
    if cfg.estimator.input == "analytic":
        lim = Limits(cfg.limits.n1, cfg.limits.n2, n3, 1.0)
        return propagate_tree(topo, cfg.probe.d0, lim, renormalize=False)
    samples = _run_sim(cfg, topo)
    if not len(samples):
        raise UsageError("simulation produced no completed probe pairs")
    return empirical_dist(samples, n3)


def _estimator_config(cfg: ExperimentConfig, topo: Topology) -> EstimatorConfig:
    a = cfg.estimator.adaptive
    g = cfg.estimator.grid
    try:
        return EstimatorConfig(a=cfg.probe.a, alpha0=a.alpha0, alpha_min=a.alpha_min,
                               alpha_max=a.alpha_max, decrease=a.decrease, increase=a.increase,
                               grad_threshold=a.grad_threshold, h=a.h, lo=g.lo, hi=g.hi,
                               distance=cfg.estimator.distance)
    except ValueError as exc:
        raise ConfigError(f"estimator.adaptive: {exc}") from exc


def cmd_estimate(cfg: ExperimentConfig, out: Writer, verify: bool = False, workers: int = 1):
    topo = cfg.topology.build()
    truth = [float(x) for x in topo.rates]
    limits = cfg.limits.build()
    est = cfg.estimator
    if est.mode == "grid":
        emp = _empirical_input(cfg, topo)
        keep = est.keep_surface and topo.size == 2
        res = grid_search(emp, topo, _grid_spec(cfg), est.distance, limits, cfg.probe.d0,
                          workers, keep)
        if keep:
            out.csv("surface.csv", ["lam1", "lam2", "cost", "log_cost"], res.surface_rows())
        out.json("estimate.json", {
            "mode": "grid", "distance": est.distance, "input": est.input,
            "estimate": list(res.estimate.values), "cost": res.cost, "truth": truth,
            "evaluations": res.evaluations,
        })
        print("estimate: " + ", ".join(f"{v:.2f}" for v in res.estimate.values))
        return

    sc = sim_config(cfg, topo)
    samples = _run_sim(cfg, topo)
    block = cfg.probe.block
    n_blocks = len(samples) // block
    if n_blocks == 0:
        raise UsageError(f"fewer than one block of {block} completed pairs")
    blocks = [empirical_dist(samples.subset(slice(k * block, (k + 1) * block)), limits.n3)
              for k in range(n_blocks)]
    initial = est.adaptive.initial or [0.5] * topo.size
    if len(initial) != topo.size:
        raise ConfigError(f"estimator.adaptive.initial needs {topo.size} values")
    state, trace = track(blocks, topo, initial, _estimator_config(cfg, topo), limits, cfg.probe.d0)
    mids = [int(samples.launch_slot[k * block + block // 2]) for k in range(n_blocks)]
    truth_blocks = np.array([true_rates(sc, m) for m in mids])
    estimates = np.array([r.estimate for r in trace])
    skip = int(est.adaptive.burn_in * n_blocks)
    err = np.abs(estimates - truth_blocks)[skip:]
    if "csv" in out.formats:
        write_trace_csv(trace, out.path("trace.csv"))
        out.written.append(out.path("trace.csv"))
    out.csv("truth.csv", ["n", *[f"lam{i + 1}" for i in range(topo.size)]],
            ([k + 1, *row] for k, row in enumerate(truth_blocks)))
    out.json("estimate.json", {
        "mode": "adaptive", "distance": est.distance, "blocks": n_blocks,
        "final": list(state.estimate.values), "final_truth": list(truth_blocks[-1]),
        "burn_in_blocks": skip,
        "mean_abs_error": list(err.mean(axis=0)) if err.size else [],
        "mean_abs_error_overall": float(err.mean()) if err.size else None,
    })
    print("final estimate: " + ", ".join(f"{v:.3f}" for v in state.estimate.values))


def cmd_surface(cfg: ExperimentConfig, out: Writer, verify: bool = False, workers: int = 1):
    topo = cfg.topology.build()
    if topo.size != 2:
        raise UsageError("surface needs exactly two queues")
    grid = _grid_spec(cfg)
    limits = cfg.limits.build()
    cells = len(grid.axis()) ** 2
    ops = cells * op_count(limits.n2, limits.n3)
    if ops > cfg.estimator.max_ops:
        raise UsageError(f"surface of {cells} cells needs about {ops:.3g} operations, over the "
                         f"budget of {cfg.estimator.max_ops:.3g}; coarsen the grid or raise max_ops")
    emp = _empirical_input(cfg, topo)
    res = grid_search(emp, topo, grid, cfg.estimator.distance, limits, cfg.probe.d0, workers,
                      keep_surface=True)
    out.csv("surface.csv", ["lam1", "lam2", "cost", "log_cost"], res.surface_rows())
    out.json("surface.json", {
        "distance": cfg.estimator.distance, "input": cfg.estimator.input,
        "truth": [float(x) for x in topo.rates], "minimum": list(res.estimate.values),
        "min_cost": res.cost, "cells": cells, "valley": valley_witness(res),
    })
    print("surface minimum: " + ", ".join(f"{v:.2f}" for v in res.estimate.values))


COMMANDS = {"dist": cmd_dist, "simulate": cmd_simulate, "estimate": cmd_estimate,
            "surface": cmd_surface}


def _workers(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(WORKERS_ENV, "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="disperse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment config (YAML or JSON)")
    ap.add_argument("--verify", action="store_true",
                    help="cross-check the analytic law against a simulation")
    ap.add_argument("--workers", type=int, default=None,
                    help=f"threads for grid scans (default ${WORKERS_ENV} or 1)")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        workers = _workers(args.workers)
        cfg = load_config(args.config)
        out = Writer(Path(args.out), cfg)
        COMMANDS[args.command](cfg, out, args.verify, workers)
    except DisperseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
