"""Command-line front end.

    python -m admm_pb [--config PATH] [--seed N] [--out DIR] [--desk-scale] [--threads K] COMMAND

Commands: train-admm, train-baseline --omega W, eval --checkpoint PATH,
compare, selftest.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .stable_ops import load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="admm_pb", description="ADMM-based constrained performance boosting benchmark")
    p.add_argument("--config", type=Path, default=None, help="experiment config JSON (default: built-in values)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--desk-scale", action="store_true", help="S=4, T=100, 150 iterations")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="scenario workers; 1 guarantees bit-reproducibility")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-admm")
    tb = sub.add_parser("train-baseline")
    tb.add_argument("--omega", type=float, required=True)
    ev = sub.add_parser("eval")
    ev.add_argument("--checkpoint", type=Path, required=True)
    sub.add_parser("compare")
    sub.add_parser("selftest")
    return p


def _cmd_train_admm(cfg, args) -> int:
    banks = bench.make_banks(cfg)
    run = bench.train_admm_pb(cfg, banks, args.threads)
    report, ro = bench.evaluate(run.theta, cfg, banks.test, run.loss_trace)
    out = bench.write_run(args.out / bench.run_name(None), cfg, run, report, ro)
    log = run.admm.log
    print(f"ADMM-PB: {len(log)} iterations, converged={run.admm.converged}, V={report.violation:.4g}, "
          f"L_LQ={report.lq_mean:.4g} -> {out}")
    return 0


def _cmd_train_baseline(cfg, args) -> int:
    banks = bench.make_banks(cfg)
    run = bench.train_cbf_baseline(cfg, args.omega, banks, args.threads)
    report, ro = bench.evaluate(run.theta, cfg, banks.test, run.loss_trace, "cbf_baseline", args.omega)
    out = bench.write_run(args.out / bench.run_name(args.omega), cfg, run, report, ro)
    print(f"CBF omega={args.omega:g}: V={report.violation:.4g}, L_LQ={report.lq_mean:.4g} -> {out}")
    return 0


def _cmd_eval(cfg, args) -> int:
    op, header = load_checkpoint(args.checkpoint)
    banks = bench.make_banks(cfg)
    trace_path = args.checkpoint.parent / "loss_trace.csv"
    trace = bench.read_trace(trace_path) if trace_path.exists() else []
    report, ro = bench.evaluate(op.theta, cfg, banks.test, trace, method="eval")
    out = args.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "indicators.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def _cmd_compare(cfg, args) -> int:
    admm_path = args.out / bench.run_name(None) / "indicators.json"
    base_paths = sorted(args.out.glob("cbf_omega_*/indicators.json")) if args.out.exists() else []
    if not admm_path.exists() or not base_paths:
        print(f"missing reports under {args.out}: need {bench.run_name(None)}/ and at least one cbf_omega_*/ run",
              file=sys.stderr)
        return 2
    rep_admm = bench.IndicatorReport.from_json(json.loads(admm_path.read_text()))
    reps = [bench.IndicatorReport.from_json(json.loads(p.read_text())) for p in base_paths]
    table_csv, table_txt = bench.compare(rep_admm, reps)
    (args.out / "table3.csv").write_text(table_csv)
    print(table_txt, end="")
    return 0


def selftest(out=print) -> bool:
    """Gradient check against finite differences and projection check against grid search."""
    from .admm import Problem
    from .constraints import Box, project
    from .losses import AdmmTerms
    from .plant import NoiseDistribution, PointMass, sample_noise
    from .stable_ops import ContractiveOperator, OperatorDims, init_params

    rng = np.random.default_rng(0)
    dims = OperatorDims()
    cfg = bench.ExperimentConfig()
    noise = sample_noise(NoiseDistribution(), 10, 1, 2)
    problem = Problem(PointMass(), ContractiveOperator(dims, np.zeros(dims.n_params), 0.95), noise,
                      cfg.loss, cfg.trajectory_constraint())
    theta = init_params(dims, 0.3, 2)
    ro = problem.rollout(theta)
    xp, up = problem.constraints.project_trajectory(ro.x, ro.u)
    terms = AdmmTerms(0.5, xp, up, 0.01 * rng.standard_normal(ro.x.shape), 0.01 * rng.standard_normal(ro.u.shape))
    _, grad, _ = problem.objective(theta, "admm_pb", admm=terms)
    h = 1e-5
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (problem.objective(theta + e, "admm_pb", admm=terms)[0]
                 - problem.objective(theta - e, "admm_pb", admm=terms)[0]) / (2 * h)
    mask = np.abs(grad) > 1e-6
    rel = np.max(np.abs(grad - fd)[mask] / np.maximum(np.abs(grad), np.abs(fd))[mask])
    grad_ok = bool(rel < 1e-4)
    out(f"[{'PASS' if grad_ok else 'FAIL'}] gradient check: max relative error {rel:.2e}")

    box = Box((-0.5, -0.5), (0.5, 0.5))
    grid = np.arange(-3.0, 3.0 + 1e-9, 1e-3)
    worst = 0.0
    for _ in range(20):
        v = rng.uniform(-2.0, 2.0, 2)
        brute = np.array([grid[np.argmin(np.where((grid >= -0.5) & (grid <= 0.5), (grid - vi) ** 2, np.inf))] for vi in v])
        worst = max(worst, float(np.max(np.abs(project(box, v) - brute))))
    proj_ok = worst <= 2e-3
    out(f"[{'PASS' if proj_ok else 'FAIL'}] projection oracle: max deviation {worst:.2e}")
    return grad_ok and proj_ok


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        cfg = bench.load_config(args.config, desk=args.desk_scale, seed=args.seed)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (OSError, ValueError, TypeError) as exc:
        print(f"admm_pb: invalid configuration: {exc}", file=sys.stderr)
        return 1

    commands = {
        "train-admm": _cmd_train_admm,
        "train-baseline": _cmd_train_baseline,
        "eval": _cmd_eval,
        "compare": _cmd_compare,
    }
    try:
        if args.command == "selftest":
            return 0 if selftest() else 2
        return commands[args.command](cfg, args)
    except (FloatingPointError, OSError, ValueError) as exc:
        print(f"admm_pb: {args.command} failed: {exc}", file=sys.stderr)
        return 2
