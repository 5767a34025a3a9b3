"""Command-line interface.

Exit status: 0 on success, 2 for invalid input (model violations, bad
flags, malformed files), 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dynamics, estimation, reduction
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from .model import (
    BUILTIN_MODELS,
    InvalidModelError,
    builtin_model,
    dumps_model,
    load_model,
    validate,
)
from .sampler import read_trajectory_csv, restrict_trajectory, sample_trajectory, write_trajectory_csv

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class InputError(Exception):
    pass


def _ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated component ids, got {text!r}")


def _tolerance(text: str) -> tuple[str, float]:
    key, sep, value = text.partition("=")
    try:
        return (key, float(value)) if sep else ("default", float(key))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE or VALUE, got {text!r}")


def _load(ref: str):
    """Load a model without validating it."""
    if ref in BUILTIN_MODELS:
        return builtin_model(ref)
    try:
        return load_model(ref)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read model {ref}: {exc}") from exc


def _load_valid(ref: str):
    model = _load(ref)
    problems = validate(model)
    if problems:
        raise InvalidModelError(problems)
    return model


def _write_matrix(q: np.ndarray, out: str | None) -> None:
    rows = [[repr(float(v)) for v in row] for row in np.atleast_2d(q)]
    if out:
        with open(out, "w", newline="") as f:
            csv.writer(f).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)


def _write_text(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_validate(args) -> int:
    model = _load(args.model)
    problems = validate(model)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INVALID
    print(f"ok: {len(model.components)} components, {model.n_states} joint states")
    return EXIT_OK


def cmd_amalgamate(args) -> int:
    model = _load_valid(args.model)
    _write_matrix(dynamics.amalgamate(model, args.epsilon), args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    model = _load_valid(args.model)
    q = dynamics.amalgamate(model, args.epsilon)
    p = dynamics.solve_master(q, model.initial_joint(), args.time)
    _write_matrix(p[None, :], args.out)
    return EXIT_OK


def cmd_stationary(args) -> int:
    model = _load_valid(args.model)
    pi = dynamics.stationary_distribution(dynamics.amalgamate(model, args.epsilon))
    _write_matrix(pi[None, :], args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _load_valid(args.model)
    if args.max_time is None and args.max_transitions is None:
        raise InputError("simulate needs --max-time and/or --max-transitions")
    seed = args.seed[0] if args.seed else 0
    eps = args.epsilon[0] if args.epsilon else None
    traj = sample_trajectory(model, eps, seed, max_time=args.max_time, max_transitions=args.max_transitions)
    if args.components:
        traj = restrict_trajectory(traj, args.components)
    write_trajectory_csv(traj, args.out or sys.stdout)
    return EXIT_OK


def cmd_estimate(args) -> int:
    try:
        traj = read_trajectory_csv(args.trajectory)
    except (OSError, ValueError, IndexError) as exc:
        raise InputError(f"cannot read trajectory {args.trajectory}: {exc}") from exc
    stats = estimation.collect_stats(traj, args.target, args.conditioners or ())
    est = estimation.mle_rates(stats)
    estimation.write_estimates_csv(est, args.out or sys.stdout)
    return EXIT_OK


def cmd_reduce(args) -> int:
    model = _load_valid(args.model)
    _write_text(dumps_model(reduction.reduce_ctbn(model)) + "\n", args.out)
    return EXIT_OK


def cmd_closure(args) -> int:
    model = _load_valid(args.model)
    if args.up:
        result = reduction.upward_closure(model, args.up).sorted()
    elif args.fast_up:
        result = reduction.fast_upward_closure(model, args.fast_up).sorted()
    elif args.slow_ancestors:
        result = reduction.last_slow_ancestors(model, args.slow_ancestors)
    else:
        result = reduction.reduced_parents(model, args.reduced_parents)
    print(",".join(map(str, result)))
    return EXIT_OK


def cmd_experiment(args) -> int:
    tolerances = dict(args.tolerance or [])
    config = ExperimentConfig(
        name=args.name, model=args.model, epsilons=args.epsilon, seeds=args.seed,
        max_time=args.max_time, max_transitions=args.max_transitions, times=args.time,
        out_dir=args.out, tolerances=tolerances, analytic_only=args.analytic_only)
    report = run_experiment(config)
    print(json.dumps(report.summary, indent=2, default=lambda v: np.asarray(v).tolist()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctbnreduce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    model_help = f"model file, or a built-in id ({', '.join(BUILTIN_MODELS)})"

    p = sub.add_parser("validate", help="check a model file")
    p.add_argument("--model", required=True, help=model_help)
    p.set_defaults(func=cmd_validate)

    for name, func, extra in (("amalgamate", cmd_amalgamate, "joint rate matrix as CSV"),
                              ("stationary", cmd_stationary, "stationary distribution as CSV"),
                              ("solve", cmd_solve, "master-equation solution at --time")):
        p = sub.add_parser(name, help=extra)
        p.add_argument("--model", required=True, help=model_help)
        p.add_argument("--epsilon", type=float, help="scale parameter (default: the model's)")
        p.add_argument("--out")
        if name == "solve":
            p.add_argument("--time", type=float, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", help="sample a trajectory to CSV")
    p.add_argument("--model", required=True, help=model_help)
    p.add_argument("--epsilon", type=float, action="append")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--max-time", type=float)
    p.add_argument("--max-transitions", type=int)
    p.add_argument("--components", type=_ids, help="project onto these component ids")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="MLE conditional rates from a trajectory CSV")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--target", type=int, help="component id (omit for the joint state)")
    p.add_argument("--conditioners", type=_ids)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("reduce", help="write the reduced (slow-only) model")
    p.add_argument("--model", required=True, help=model_help)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("closure", help="graph closure queries")
    p.add_argument("--model", required=True, help=model_help)
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--up", type=_ids, help="upward closure of these ids")
    q.add_argument("--fast-up", type=_ids, help="fast-upward closure of these fast ids")
    q.add_argument("--slow-ancestors", type=_ids, help="last slow ancestors of these fast ids")
    q.add_argument("--reduced-parents", type=int, help="parents of a slow id after reduction")
    p.set_defaults(func=cmd_closure)

    p = sub.add_parser("experiment", help="run a named experiment")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--model", help=model_help)
    p.add_argument("--epsilon", type=float, action="append")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--max-time", type=float)
    p.add_argument("--max-transitions", type=int)
    p.add_argument("--time", type=float, action="append", help="evaluation times (convergence)")
    p.add_argument("--tolerance", type=_tolerance, action="append", help="NAME=VALUE override")
    p.add_argument("--analytic-only", action="store_true")
    p.add_argument("--out", help="output directory for CSV and JSON")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidModelError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
