"""Point-mass benchmark: scenario banks, both training procedures, indicators."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .admm import Adam, AdmmConfig, AdmmResult, Problem, run_admm_pb, write_iterate_log
from .constraints import TrajectoryConstraint, rollout_violation, velocity_box
from .losses import BoostLossConfig, CbfConfig, collision_loss, lq_loss
from .plant import NoiseDistribution, PointMass, PointMassParams, Rollout, rollout_closed_loop, sample_noise, write_trajectory_csv
from .stable_ops import ContractiveOperator, OperatorDims, init_params, save_checkpoint

DEFAULT_OMEGAS = (1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6)


@dataclass(frozen=True)
class OperatorConfig:
    # a wider state than the plant's, and inputs shrunk before the tanh: with
    # only a handful of training scenarios this keeps the operator from
    # fitting the particular noise realizations
    n_state: int = 8
    kappa: float = 0.99
    prescale: float = 0.3
    init_std: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PointMassParams = field(default_factory=PointMassParams)
    noise: NoiseDistribution = field(default_factory=NoiseDistribution)
    loss: BoostLossConfig = field(default_factory=BoostLossConfig)
    constraints: dict = field(default_factory=lambda: velocity_box(0.5).to_json())
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    admm: AdmmConfig = field(default_factory=lambda: AdmmConfig(max_iters=2000))
    S_train: int = 8
    S_test: int = 5
    T: int = 249
    omegas: tuple[float, ...] = DEFAULT_OMEGAS
    zeta: float = 0.2
    baseline_epochs: int = 6900
    velocity_bound: float = 0.5
    seed: int = 0

    def desk_scale(self) -> "ExperimentConfig":
        """Reduced preset: S=4, T=100, 150 outer iterations, matched baseline epochs."""
        admm = dataclasses.replace(self.admm, max_iters=150, eta0=DESK_ETA0)
        return dataclasses.replace(
            self, S_train=4, T=100, admm=admm, baseline_epochs=150 * admm.epochs_per_step
        )

    def to_dict(self) -> dict:
        return _encode(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        sections = {
            "plant": PointMassParams,
            "noise": NoiseDistribution,
            "loss": BoostLossConfig,
            "operator": OperatorConfig,
            "admm": AdmmConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                sub = sections[key]
                names = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - names
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                kwargs[key] = sub(**{k: _tuplify(v) for k, v in value.items()})
            elif key == "constraints":
                TrajectoryConstraint.from_json(value)
                kwargs[key] = value
            else:
                kwargs[key] = _tuplify(value)
        return cls(**kwargs)

    def trajectory_constraint(self) -> TrajectoryConstraint:
        return TrajectoryConstraint.from_json(self.constraints)

    def operator_template(self) -> ContractiveOperator:
        dims = OperatorDims(n_in=4, n_state=self.operator.n_state, n_out=2)
        return ContractiveOperator(dims, np.zeros(dims.n_params), self.operator.kappa, self.operator.prescale)


# Desk runs have ~8x fewer outer iterations than the full benchmark; a larger
# initial step keeps the total parameter travel comparable.
DESK_ETA0 = 1e-2


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _encode(v):
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return None
    return v


def load_config(path=None, desk: bool = False, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig() if path is None else ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    if desk:
        cfg = cfg.desk_scale()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


@dataclass(frozen=True)
class Banks:
    theta0: np.ndarray
    train: np.ndarray
    test: np.ndarray


def make_banks(cfg: ExperimentConfig) -> Banks:
    """Initial parameters and the train/test noise banks from independent seed streams."""
    ss_theta, ss_train, ss_test = np.random.SeedSequence(cfg.seed).spawn(3)
    dims = cfg.operator_template().dims
    return Banks(
        theta0=init_params(dims, cfg.operator.init_std, ss_theta),
        train=sample_noise(cfg.noise, cfg.T, ss_train, cfg.S_train),
        test=sample_noise(cfg.noise, cfg.T, ss_test, cfg.S_test),
    )


def make_problem(cfg: ExperimentConfig, noise: np.ndarray, threads: int = 1) -> Problem:
    return Problem(PointMass(cfg.plant), cfg.operator_template(), noise, cfg.loss, cfg.trajectory_constraint(), threads)


@dataclass
class TrainingRun:
    theta: np.ndarray
    loss_trace: list[float]
    admm: AdmmResult | None = None


def train_admm_pb(cfg: ExperimentConfig, banks: Banks | None = None, threads: int = 1) -> TrainingRun:
    banks = banks or make_banks(cfg)
    result = run_admm_pb(cfg.admm, make_problem(cfg, banks.train, threads), banks.theta0)
    return TrainingRun(result.theta, result.loss_trace, result)


def train_cbf_baseline(cfg: ExperimentConfig, omega: float, banks: Banks | None = None, threads: int = 1,
                       epochs: int | None = None) -> TrainingRun:
    """Unconstrained Adam on boosting loss + CBF penalties at the fixed step eta0."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    banks = banks or make_banks(cfg)
    problem = make_problem(cfg, banks.train, threads)
    cbf = CbfConfig(omega=omega, zeta=cfg.zeta, bound=cfg.velocity_bound)
    theta = banks.theta0.copy()
    adam = Adam()
    trace = []
    for _ in range(cfg.baseline_epochs if epochs is None else epochs):
        total, grad, _ = problem.objective(theta, "cbf_baseline", cbf=cbf)
        trace.append(total)
        theta = adam.step(theta, grad, cfg.admm.eta0)
    return TrainingRun(theta, trace)


def loss_variation(trace) -> float:
    """Total variation sum_i |L_i - L_{i-1}| of a per-epoch loss trace."""
    trace = np.asarray(trace, dtype=np.float64)
    return float(np.sum(np.abs(np.diff(trace)))) if trace.size > 1 else 0.0


@dataclass
class IndicatorReport:
    method: str
    omega: float | None
    delta_loss: float
    lq_mean: float
    ca_mean: float
    violation: float
    collision_free: bool
    min_obstacle_distance: float

    @property
    def violation_times_lq(self) -> float:
        return self.violation * self.lq_mean

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["violation_times_lq"] = self.violation_times_lq
        d["version"] = __version__
        return d

    @classmethod
    def from_json(cls, d: dict) -> "IndicatorReport":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def evaluate(theta, cfg: ExperimentConfig, test_bank: np.ndarray, trace=(), method: str = "admm_pb",
             omega: float | None = None) -> tuple[IndicatorReport, Rollout]:
    ro = rollout_closed_loop(PointMass(cfg.plant), cfg.operator_template().with_theta(theta), test_bank)
    S = ro.S
    lq = [float(lq_loss(cfg.loss, ro.x[:, :, s : s + 1], ro.u[:, :, s : s + 1])) for s in range(S)]
    ca = [float(collision_loss(cfg.loss, ro.x[:, :, s : s + 1])) for s in range(S)]
    obs = np.asarray(cfg.loss.obstacle).reshape(1, 2, 1)
    min_dist = float(np.sqrt(np.min(np.sum((ro.x[:, :2] - obs) ** 2, axis=1))))
    report = IndicatorReport(
        method=method,
        omega=omega,
        delta_loss=loss_variation(trace),
        lq_mean=float(np.mean(lq)),
        ca_mean=float(np.mean(ca)),
        violation=rollout_violation(ro.x, cfg.velocity_bound),
        collision_free=bool(min_dist > cfg.loss.radius),
        min_obstacle_distance=min_dist,
    )
    return report, ro


TABLE_COLUMNS = ("method", "omega", "dL_x1e5", "L_LQ", "L_ca", "V", "V_x_L_LQ")


def compare(report_admm: IndicatorReport, reports_cbf: list[IndicatorReport]) -> tuple[str, str]:
    """Indicator table as (csv text, aligned text); the variation column is scaled by 1e5."""
    if not reports_cbf:
        raise ValueError("compare needs at least one baseline report")
    rows = []
    for rep in [report_admm, *sorted(reports_cbf, key=lambda r: r.omega or 0.0)]:
        rows.append([
            "ADMM-PB" if rep.method == "admm_pb" else "CBF",
            "-" if rep.omega is None else f"{rep.omega:g}",
            f"{rep.delta_loss * 1e5:.6g}",
            f"{rep.lq_mean:.6g}",
            f"{rep.ca_mean:.6g}",
            f"{rep.violation:.6g}",
            f"{rep.violation_times_lq:.6g}",
        ])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    writer.writerows(rows)
    widths = [max(len(str(r[i])) for r in [TABLE_COLUMNS, *rows]) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in [TABLE_COLUMNS, *rows]]
    return buf.getvalue(), "\n".join(lines) + "\n"


def write_trace(path, trace) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])


def read_trace(path) -> list[float]:
    with Path(path).open() as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def write_run(out_dir, cfg: ExperimentConfig, run: TrainingRun, report: IndicatorReport, test_rollout: Rollout) -> Path:
    """Persist checkpoint, traces, trajectories and indicators of one run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    op = cfg.operator_template().with_theta(run.theta)
    save_checkpoint(out / "checkpoint.bin", op, seed=cfg.seed)
    write_trace(out / "loss_trace.csv", run.loss_trace)
    if run.admm is not None:
        write_iterate_log(out / "iterate_log.csv", run.admm.log)
    write_trajectory_csv(out / "trajectories.csv", test_rollout)
    (out / "indicators.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    save_config(out / "config.json", cfg)
    return out


def run_name(omega: float | None) -> str:
    return "admm_pb" if omega is None else f"cbf_omega_{omega:g}"


def run_benchmark(cfg: ExperimentConfig, out_dir=None, threads: int = 1, omegas=None, log=print) -> dict:
    """Full comparison: ADMM-PB plus the baseline sweep on a shared test bank."""
    banks = make_banks(cfg)
    admm_run = train_admm_pb(cfg, banks, threads)
    rep_admm, ro = evaluate(admm_run.theta, cfg, banks.test, admm_run.loss_trace)
    if out_dir is not None:
        write_run(Path(out_dir) / run_name(None), cfg, admm_run, rep_admm, ro)
    log(f"admm_pb: V={rep_admm.violation:.4g} L_LQ={rep_admm.lq_mean:.4g} iters={len(admm_run.admm.log)}")
    reports = {}
    for omega in cfg.omegas if omegas is None else omegas:
        run = train_cbf_baseline(cfg, omega, banks, threads)
        rep, ro = evaluate(run.theta, cfg, banks.test, run.loss_trace, method="cbf_baseline", omega=omega)
        reports[omega] = rep
        if out_dir is not None:
            write_run(Path(out_dir) / run_name(omega), cfg, run, rep, ro)
        log(f"cbf omega={omega:g}: V={rep.violation:.4g} L_LQ={rep.lq_mean:.4g}")
    table_csv, table_txt = compare(rep_admm, list(reports.values()))
    if out_dir is not None:
        (Path(out_dir) / "table3.csv").write_text(table_csv)
    return {"admm": rep_admm, "admm_run": admm_run, "cbf": reports, "table": table_txt}
