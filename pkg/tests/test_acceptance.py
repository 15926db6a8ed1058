"""Acceptance suite.  Each test records one pass/fail line, printed at the end of the run."""

import dataclasses
import json
import time

import numpy as np
import pytest

from admm_pb import bench
from admm_pb.admm import AdmmConfig, Problem, read_iterate_log, run_admm_pb, update_learning_rate, write_iterate_log
from admm_pb.cli import main as cli_main
from admm_pb.constraints import Box, TrajectoryConstraint, Unconstrained, project_trajectory
from admm_pb.losses import AdmmTerms, BoostLossConfig
from admm_pb.plant import NoiseDistribution, PointMass, rollout_closed_loop, sample_noise
from admm_pb.stable_ops import gain_bound, init_params, simulate

DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_results():
    out = {}
    t0 = time.perf_counter()
    for seed in DESK_SEEDS:
        cfg = bench.load_config(desk=True, seed=seed)
        out[seed] = bench.run_benchmark(cfg, None, threads=1, log=lambda m: None)
    return out, time.perf_counter() - t0


def test_criterion_1_gradient_fidelity(record_criterion):
    cfg = bench.ExperimentConfig()
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    misses = []
    for k in range(20):
        noise = sample_noise(NoiseDistribution(), 10, 1000 + k, 2)
        problem = Problem(PointMass(cfg.plant), cfg.operator_template(), noise, cfg.loss, cfg.trajectory_constraint())
        theta = rng.uniform(0.05, 0.5) * rng.standard_normal(problem.operator.dims.n_params)
        ro = problem.rollout(theta)
        xp, up = problem.constraints.project_trajectory(ro.x, ro.u)
        terms = AdmmTerms(rng.uniform(0.1, 5.0), xp, up,
                          0.1 * rng.standard_normal(ro.x.shape), 0.1 * rng.standard_normal(ro.u.shape))
        _, grad, _ = problem.objective(theta, "admm_pb", admm=terms)
        h = 1e-5
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (problem.objective(theta + e, "admm_pb", admm=terms)[0]
                     - problem.objective(theta - e, "admm_pb", admm=terms)[0]) / (2 * h)
        mask = np.abs(grad) > 1e-6
        rel = np.abs(grad - fd)[mask] / np.maximum(np.abs(grad), np.abs(fd))[mask]
        worst = max(worst, float(rel.max()))
        # float64 cancellation floor of a central difference: ~ eps |L| / h
        floor = np.finfo(float).eps * abs(problem.objective(theta, "admm_pb", admm=terms)[0]) / h
        for g, f in zip(grad[mask][rel >= 1e-4], fd[mask][rel >= 1e-4]):
            misses.append(f"|g| {abs(g):.2e}, |g-fd| {abs(g - f):.1e} vs rounding floor {floor:.1e}")
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    record_criterion(1, ok, f"max relative error {worst:.2e} over 20 instances, {elapsed:.1f} s"
                            + ("; misses: " + "; ".join(misses) if misses else ""))
    assert ok


def test_criterion_2_stability_by_construction(record_criterion):
    op = bench.ExperimentConfig().operator_template()
    n = op.dims.n_params
    rng = np.random.default_rng(202)
    worst_sigma = 0.0
    for _ in range(1000):
        theta = rng.uniform(-1.0, 1.0, n) * 10.0 ** rng.uniform(-3, 3)
        worst_sigma = max(worst_sigma, float(np.linalg.norm(op.with_theta(theta).effective().A, 2)))
    worst_ratio = 0.0
    for _ in range(100):
        cur = op.with_theta(rng.standard_normal(n) * rng.uniform(0.1, 5.0))
        w1, w2 = rng.standard_normal((2, 60, 4)) * rng.uniform(0.01, 10.0)
        ratio = np.linalg.norm(simulate(cur, w1) - simulate(cur, w2)) / np.linalg.norm(w1 - w2)
        bound = gain_bound(cur)
        worst_ratio = max(worst_ratio, ratio / bound if bound > 0 else 0.0)
    ok = worst_sigma <= op.kappa and worst_ratio <= 1.0
    record_criterion(2, ok, f"max sigma(A) {worst_sigma:.4f} <= kappa {op.kappa}; "
                            f"max gain ratio / bound {worst_ratio:.3f}")
    assert ok


def _grid_minimizer(v, lo, hi, step=1e-3):
    # brute force over a grid spanning [lo, hi] near v
    a = max(lo, min(v, hi) - 2.0)
    b = min(hi, max(v, lo) + 2.0)
    grid = np.append(np.arange(a, b, step), b)
    return grid[np.argmin((grid - v) ** 2)]


def test_criterion_3_projection_oracle(record_criterion):
    rng = np.random.default_rng(303)
    worst_grid = 0.0
    idem = True
    worst_expansion = -np.inf
    for _ in range(100):
        lo = rng.uniform(-1.0, 0.0, 4)
        hi = lo + rng.uniform(0.05, 1.5, 4)
        lo[rng.random(4) < 0.25] = -np.inf
        hi[rng.random(4) < 0.25] = np.inf
        ulo = rng.uniform(-1.0, 0.0, 2)
        tc = TrajectoryConstraint(Box(tuple(lo), tuple(hi)), Box(tuple(ulo), tuple(ulo + 0.5)))
        x, u = rng.uniform(-2.5, 2.5, (2, 4, 4, 2)), rng.uniform(-2.5, 2.5, (2, 4, 2, 2))
        xp, up = project_trajectory(tc, x[0], u[0])
        for arr, proj, los, his in ((x[0], xp, lo, hi), (u[0], up, ulo, ulo + 0.5)):
            for idx in np.ndindex(arr.shape):
                ref = _grid_minimizer(arr[idx], los[idx[1]], his[idx[1]])
                worst_grid = max(worst_grid, abs(proj[idx] - ref))
        xpp, upp = project_trajectory(tc, xp, up)
        idem &= np.array_equal(xpp, xp) and np.array_equal(upp, up)
        xq, uq = project_trajectory(tc, x[1], u[1])
        d_in = np.sqrt(np.sum((x[0] - x[1]) ** 2) + np.sum((u[0] - u[1]) ** 2))
        d_out = np.sqrt(np.sum((xp - xq) ** 2) + np.sum((up - uq) ** 2))
        worst_expansion = max(worst_expansion, d_out - d_in)
    ok = worst_grid <= 2e-3 and idem and worst_expansion <= 1e-12
    record_criterion(3, ok, f"grid deviation {worst_grid:.1e}, idempotent={idem}, "
                            f"max expansion {max(worst_expansion, 0.0):.1e}")
    assert ok


def test_criterion_4_scaled_dual_invariant(desk_results, record_criterion):
    results, _ = desk_results
    log = results[0]["admm_run"].admm.log
    adaptations = sum(1 for a, b in zip(log, log[1:]) if a.rho != b.rho)
    worst = max(r.dual_scale_error for r in log)
    ok = worst < 1e-12 and adaptations > 0
    record_criterion(4, ok, f"{adaptations} penalty adaptations over {len(log)} iterations, "
                            f"max rho*lambda drift {worst:.1e}")
    assert ok


def test_criterion_5_schedule(record_criterion):
    cfg = AdmmConfig()
    ok = (all(update_learning_rate(j, cfg) == 1e-3 for j in range(50))
          and all(update_learning_rate(j, cfg) == 5e-4 for j in range(50, 100))
          and all(update_learning_rate(j, cfg) == 1e-6 for j in range(500, 2000)))
    record_criterion(5, ok, "eta = 1e-3 / 5e-4 / 1e-6 floor, exact equality")
    assert ok


def test_criterion_6_equilibrium(record_criterion):
    cfg = dataclasses.replace(bench.load_config(desk=True), baseline_epochs=20)
    cfg = dataclasses.replace(cfg, admm=dataclasses.replace(cfg.admm, max_iters=5))
    zero = np.zeros((cfg.T + 1, 4, cfg.S_train))
    banks = bench.Banks(bench.make_banks(cfg).theta0, zero, zero)
    admm = bench.train_admm_pb(cfg, banks)
    base = bench.train_cbf_baseline(cfg, 100.0, banks)
    rep_a, ro_a = bench.evaluate(admm.theta, cfg, zero, admm.loss_trace)
    rep_b, ro_b = bench.evaluate(base.theta, cfg, zero, base.loss_trace, "cbf_baseline", 100.0)
    ok = (not ro_a.x.any() and not ro_a.u.any() and not ro_b.x.any() and not ro_b.u.any()
          and not any(admm.loss_trace) and not any(base.loss_trace)
          and rep_a.violation == 0.0 and rep_b.violation == 0.0 and rep_a.lq_mean == 0.0)
    record_criterion(6, ok, "zero noise: trajectories, losses and V identically zero for both methods")
    assert ok


def test_criterion_7_desk_ordering(desk_results, record_criterion):
    results, elapsed = desk_results
    a_ok, b_ok, c_hits, parts = True, True, 0, []
    for seed, res in results.items():
        adm, cbf = res["admm"], res["cbf"]
        a = adm.violation < 0.2 * cbf[1.0].violation
        b = adm.delta_loss < cbf[1e5].delta_loss
        best = min(r.violation_times_lq for r in cbf.values())
        c = adm.violation_times_lq < best
        a_ok &= a
        b_ok &= b
        c_hits += c
        parts.append(f"seed {seed}: V {adm.violation:.3g} vs {cbf[1.0].violation:.3g}, "
                     f"dL {adm.delta_loss:.3g} vs {cbf[1e5].delta_loss:.3g}, "
                     f"V*L {adm.violation_times_lq:.4g} vs {best:.4g}")
    ok = a_ok and b_ok and c_hits >= 2 and elapsed < 7200
    record_criterion(7, ok, f"(a)={a_ok} (b)={b_ok} (c)={c_hits}/3, {elapsed:.0f} s; " + "; ".join(parts))
    assert ok


def test_criterion_8_termination(tmp_path, record_criterion):
    cfg = bench.load_config(desk=True)
    banks = bench.make_banks(cfg)
    plant = PointMass(cfg.plant)
    op = cfg.operator_template()
    open_loop = rollout_closed_loop(plant, op.with_theta(banks.theta0), banks.train)
    # boxes twice as wide as the initial closed-loop trajectory, and a flat loss
    xb = 2.0 * np.abs(open_loop.x).max(axis=(0, 2)) + 1e-3
    ub = 2.0 * np.abs(open_loop.u).max(axis=(0, 2)) + 1e-3
    tc = TrajectoryConstraint(Box(tuple(-xb), tuple(xb)), Box(tuple(-ub), tuple(ub)))
    flat = BoostLossConfig(Q=((0.0,) * 4,) * 4, R=((0.0, 0.0), (0.0, 0.0)), alpha=0.0)
    problem = Problem(plant, op, banks.train, flat, tc)
    res = run_admm_pb(dataclasses.replace(cfg.admm, max_iters=50), problem, banks.theta0)
    path = tmp_path / "iterate_log.csv"
    write_iterate_log(path, res.log)
    rows = read_iterate_log(path)
    last = rows[-1]
    ok = (len(rows) <= 3 and res.converged
          and last["norm_r"] <= last["eps_r"] and last["norm_delta"] <= last["eps_delta"])
    record_criterion(8, ok, f"terminated after {len(rows)} iteration(s), |r| {last['norm_r']:.1e} <= "
                            f"{last['eps_r']:.1e}, |delta| {last['norm_delta']:.1e} <= {last['eps_delta']:.1e}")
    assert ok


def test_criterion_9_determinism(tmp_path, record_criterion):
    data = bench.load_config(desk=True).to_dict()
    data["admm"]["max_iters"] = 15
    data["T"] = 40
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(data))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["--config", str(cfg_path), "--seed", "5", "--threads", "1", "--out", str(out),
                         "train-admm"]) == 0
        outs.append(out / "admm_pb")
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
               for f in ("iterate_log.csv", "indicators.json", "checkpoint.bin"))
    record_criterion(9, same, "two --threads 1 runs: iterate log, indicators and checkpoint byte-identical")
    assert same
