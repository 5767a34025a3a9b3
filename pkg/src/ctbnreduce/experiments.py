"""Named experiments reproducing the numerical examples, with CSV/JSON output."""
from __future__ import annotations

import csv
import datetime
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import amalgamate, solve_master
from .estimation import collect_stats, markovianity_probe, mle_rates
from .model import BUILTIN_MODELS, CtbnModel, assignments, builtin_model, load_model, require_valid
from .reduction import effective_joint_generator, reduce_ctbn, slow_marginal
from .sampler import restrict_trajectory, sample_trajectory

EXPERIMENTS = ("ex51", "ex52-table1", "convergence")

DEFAULTS = {
    "ex51": dict(model="ex51", epsilons=[0.05, 0.2], seeds=[0, 1, 2], max_time=50000.0),
    "ex52-table1": dict(model="ex52", epsilons=[1.0, 0.5, 0.25, 0.1, 0.05, 0.025], seeds=[0],
                        max_transitions=10 ** 6),
    "convergence": dict(model="ex41", epsilons=[0.1, 0.01], times=[0.5, 1.0, 2.0]),
}


@dataclass
class ExperimentConfig:
    """Settings of one experiment run; unset fields take the experiment's defaults."""

    name: str
    model: str | None = None
    epsilons: list[float] | None = None
    seeds: list[int] | None = None
    max_time: float | None = None
    max_transitions: int | None = None
    times: list[float] | None = None
    out_dir: str | None = None
    tolerances: dict[str, float] = field(default_factory=dict)
    analytic_only: bool = False

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        stop_given = self.max_time is not None or self.max_transitions is not None
        for key, value in DEFAULTS[self.name].items():
            if key in ("max_time", "max_transitions") and stop_given:
                continue
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.seeds is None:
            self.seeds = [0]
        if any(not e > 0 for e in self.epsilons):
            raise ValueError(f"epsilon values must be positive, got {self.epsilons}")
        if not self.seeds:
            raise ValueError("at least one seed is required")


def resolve_model(ref: str) -> CtbnModel:
    """A built-in model id or a path to a model file."""
    model = builtin_model(ref) if ref in BUILTIN_MODELS else load_model(ref)
    return require_valid(model)


@dataclass
class ExperimentReport:
    name: str
    config: ExperimentConfig
    tables: dict[str, list[dict]]
    summary: dict

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for table, rows in self.tables.items():
            path = out / f"{self.name}_{table}.csv"
            write_rows(rows, path)
            written.append(path)
        path = out / f"{self.name}_summary.json"
        doc = {"experiment": self.name, "config": asdict(self.config), "summary": self.summary,
               "generated": datetime.datetime.now(datetime.timezone.utc).isoformat()}
        path.write_text(json.dumps(doc, indent=2, default=_jsonable) + "\n")
        written.append(path)
        return written


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialise {type(v)}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return v


def write_rows(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _label(model: CtbnModel, ids, code: int) -> str:
    cards = [model.cardinality(i) for i in ids]
    return "".join(str(v) for v in np.unravel_index(code, cards))


def run_ex51(config: ExperimentConfig) -> ExperimentReport:
    """Effective slow generator of the three-component chain: analytic vs simulated MLE."""
    model = resolve_model(config.model)
    slow = model.slow_ids
    analytic = effective_joint_generator(model)
    reduced = reduce_ctbn(model)
    pairs = [(a, b) for a in range(len(analytic)) for b in range(len(analytic))
             if a != b and analytic[a, b] > 0]
    rows, probe_rows = [], []
    summary = {"slow_components": slow, "analytic_generator": analytic,
               "reduced_tables": {str(c.id): {",".join(map(str, k)): v for k, v in c.rate_table.items()}
                                  for c in reduced.components},
               "max_time": config.max_time, "max_transitions": config.max_transitions,
               "seeds": config.seeds, "tolerances": config.tolerances, "runs": []}
    if not config.analytic_only:
        for eps in config.epsilons:
            for seed in config.seeds:
                traj = sample_trajectory(model, eps, seed, max_time=config.max_time,
                                         max_transitions=config.max_transitions)
                sub = restrict_trajectory(traj, slow)
                est = mle_rates(collect_stats(sub, None))
                q, se = est.rates[()], est.stderr[()]
                errs = []
                for a, b in pairs:
                    rel = abs(q[a, b] - analytic[a, b]) / analytic[a, b]
                    errs.append(rel)
                    rows.append(dict(epsilon=eps, seed=seed, from_state=_label(model, slow, a),
                                     to_state=_label(model, slow, b), analytic=analytic[a, b],
                                     estimate=q[a, b], stderr=se[a, b], rel_error=rel))
                probe = markovianity_probe(sub)
                probe_rows.append(dict(epsilon=eps, seed=seed, max_rel_deviation=probe.max_relative_deviation,
                                       max_abs_z=probe.max_abs_z, strata=len(probe.rows),
                                       undefined=len(probe.undefined)))
                summary["runs"].append(dict(epsilon=eps, seed=seed, transitions=traj.transition_count,
                                            horizon=traj.horizon, max_rel_error=max(errs),
                                            mean_rel_error=float(np.mean(errs))))
    else:
        rows = [dict(from_state=_label(model, slow, a), to_state=_label(model, slow, b),
                     analytic=analytic[a, b]) for a, b in pairs]
    tables = {"generator": rows}
    if probe_rows:
        tables["markovianity"] = probe_rows
    return ExperimentReport("ex51", config, tables, summary)


def run_ex52_table1(config: ExperimentConfig) -> ExperimentReport:
    """Estimated q5(0->1 | x1) and q5(0->1 | x1, x2, x6) across an epsilon sweep.

    Statistics from all seeds of one epsilon are pooled for the table row;
    the per-seed estimates are reported separately.
    """
    model = resolve_model(config.model)
    reduced = reduce_ctbn(model)
    limit = reduced.component(5).rate_table
    slow = model.slow_ids
    table, by_seed, cells = [], [], []
    for eps in config.epsilons:
        pooled = pooled_cells = None
        horizon = 0.0
        for seed in config.seeds:
            traj = sample_trajectory(model, eps, seed, max_time=config.max_time,
                                     max_transitions=config.max_transitions)
            sub = restrict_trajectory(traj, slow)
            stats = collect_stats(sub, 5, [1])
            stats_cells = collect_stats(sub, 5, [1, 2, 6])
            est = mle_rates(stats)
            by_seed.append(dict(epsilon=eps, seed=seed, q01_given_0=est.rate((0,), 0, 1),
                                q01_given_1=est.rate((1,), 0, 1), horizon=traj.horizon,
                                transitions=traj.transition_count))
            pooled = stats if pooled is None else pooled + stats
            pooled_cells = stats_cells if pooled_cells is None else pooled_cells + stats_cells
            horizon += traj.horizon
        est = mle_rates(pooled)
        table.append(dict(epsilon=eps, q01_given_0=est.rate((0,), 0, 1), stderr_0=est.stderr[(0,)][0, 1],
                          q01_given_1=est.rate((1,), 0, 1), stderr_1=est.stderr[(1,)][0, 1],
                          seeds=len(config.seeds), total_time=horizon))
        est_cells = mle_rates(pooled_cells)
        for key in assignments([2, 2, 2]):
            cells.append(dict(epsilon=eps, x1=key[0], x2=key[1], x6=key[2],
                              rate=est_cells.rate(key, 0, 1), stderr=est_cells.stderr[key][0, 1],
                              count=int(pooled_cells.counts[key][0, 1]),
                              residence=float(pooled_cells.residence[key][0])))
    table.append(dict(epsilon=0.0, q01_given_0=limit[(0,)][0, 1], stderr_0=0.0,
                      q01_given_1=limit[(1,)][0, 1], stderr_1=0.0, seeds=0, total_time=0.0))
    summary = {"limit": {"q01_given_0": limit[(0,)][0, 1], "q01_given_1": limit[(1,)][0, 1]},
               "seeds": config.seeds, "max_transitions": config.max_transitions,
               "max_time": config.max_time, "tolerances": config.tolerances}
    return ExperimentReport("ex52-table1", config,
                            {"table1": table, "table1_by_seed": by_seed, "cells": cells}, summary)


def convergence_errors(model: CtbnModel, epsilons, times) -> list[dict]:
    """L1 gap between the slow marginal of the full solution and the reduced solution."""
    reduced = reduce_ctbn(model)
    q_red = amalgamate(reduced)
    p0 = model.initial_joint()
    p0_red = reduced.initial_joint()
    rows = []
    for eps in epsilons:
        q = amalgamate(model, eps)
        for t in times:
            full = slow_marginal(model, solve_master(q, p0, t))
            red = solve_master(q_red, p0_red, t)
            rows.append(dict(epsilon=eps, time=t, l1_error=float(np.abs(full - red).sum())))
    return rows


def run_convergence(config: ExperimentConfig) -> ExperimentReport:
    model = resolve_model(config.model)
    rows = convergence_errors(model, config.epsilons, config.times)
    summary = {"times": config.times, "epsilons": config.epsilons, "tolerances": config.tolerances,
               "max_error_by_epsilon": {str(e): max(r["l1_error"] for r in rows if r["epsilon"] == e)
                                        for e in config.epsilons}}
    return ExperimentReport("convergence", config, {"errors": rows}, summary)


RUNNERS = {"ex51": run_ex51, "ex52-table1": run_ex52_table1, "convergence": run_convergence}


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    report = RUNNERS[config.name](config)
    if config.out_dir:
        report.write(config.out_dir)
    return report
