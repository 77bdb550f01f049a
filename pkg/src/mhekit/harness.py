"""End-to-end experiment pipeline for the batch-reactor case study.

Simulates the truth once, runs the observer on its outputs, then solves
every window problem warm-started at the observer-based candidate for
each iteration budget (plus a fully converged baseline sharing the same
warm start). Before any result is reported, the accepted cost is audited
against the warm-start cost at every step and budget.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    CostBoundConstants,
    DetectabilityConstants,
    RmseResult,
    check_rges_envelope,
    envelope_constants,
    fit_observer_envelope,
    rmse,
    suboptimal_cost_bound,
)
from .dynamics import (
    DEFAULT_DT,
    NoiseSpec,
    SystemModel,
    TrajectoryLog,
    batch_reactor_model,
    draw_noise,
    simulate,
)
from .mhe import CostSpec, advance_window, build_candidate, quadratic_cost, rollout
from .observer import ObserverLog, ObserverSpec, batch_reactor_observer, run_observer
from .solver import SolverConfig, solve_with_checkpoints


class ConfigError(ValueError):
    """The experiment configuration is invalid or cannot be loaded."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one reproducible run (JSON round-trips exactly)."""

    model: str = "batch_reactor"
    dt: float = DEFAULT_DT
    steps: int = 100
    horizon: int = 10
    budgets: tuple[int, ...] = (0, 2, 5)
    include_converged: bool = True
    x0: tuple[float, ...] = (5.0, 2.0)
    z0: tuple[float, ...] = (3.0, 0.0)
    observer_gain: tuple[float, ...] = (0.5, 0.5)
    process_cov: tuple[tuple[float, ...], ...] = ((0.01, 0.0), (0.0, 0.01))
    output_cov: tuple[tuple[float, ...], ...] = ((0.04,),)
    noise_scale: float = 1.0
    seed: int = 42
    solver: SolverConfig = field(default_factory=SolverConfig)
    detectability: DetectabilityConstants = field(
        default_factory=lambda: DetectabilityConstants(2.0, 2.0, 2.0, 0.95)
    )
    out_dir: str = "out"

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if any(b < 0 for b in self.budgets):
            raise ConfigError("budgets must be nonnegative")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["budgets"] = list(self.budgets)
        doc["x0"] = list(self.x0)
        doc["z0"] = list(self.z0)
        doc["observer_gain"] = list(self.observer_gain)
        doc["process_cov"] = [list(r) for r in self.process_cov]
        doc["output_cov"] = [list(r) for r in self.output_cov]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "solver" in doc and isinstance(doc["solver"], dict):
            try:
                doc["solver"] = SolverConfig(**doc["solver"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad solver config: {exc}") from exc
        if "detectability" in doc and isinstance(doc["detectability"], dict):
            try:
                doc["detectability"] = DetectabilityConstants(**doc["detectability"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad detectability constants: {exc}") from exc
        for key in ("budgets", "x0", "z0", "observer_gain"):
            if key in doc:
                doc[key] = tuple(doc[key])
        for key in ("process_cov", "output_cov"):
            if key in doc:
                doc[key] = tuple(tuple(row) for row in doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def build_model(cfg: ExperimentConfig) -> SystemModel:
    if cfg.model != "batch_reactor":
        raise ConfigError(f"unknown model id: {cfg.model!r}")
    return batch_reactor_model(dt=cfg.dt)


def build_observer(cfg: ExperimentConfig) -> ObserverSpec:
    if cfg.model != "batch_reactor":
        raise ConfigError(f"unknown model id: {cfg.model!r}")
    return batch_reactor_observer(gain=cfg.observer_gain, dt=cfg.dt)


def build_cost(cfg: ExperimentConfig) -> CostSpec:
    q = np.asarray(cfg.process_cov, dtype=np.float64)
    r = np.asarray(cfg.output_cov, dtype=np.float64)
    try:
        return quadratic_cost(np.linalg.inv(q), np.linalg.inv(r))
    except np.linalg.LinAlgError as exc:
        raise ConfigError("noise covariances must be invertible") from exc


def build_noise_spec(cfg: ExperimentConfig) -> NoiseSpec:
    return NoiseSpec(
        covariance_w=np.asarray(cfg.process_cov, dtype=np.float64),
        covariance_v=np.asarray(cfg.output_cov, dtype=np.float64),
        seed=cfg.seed,
    )


@dataclass(frozen=True, eq=False)
class RunResult:
    """Everything one seeded run produces, keyed per budget ("i0", "i2", ...,
    "converged"). Estimate trajectories include t = 0 (the initial guess)."""

    config: ExperimentConfig
    truth: TrajectoryLog
    observer: ObserverLog
    estimates: dict[str, np.ndarray]
    accepted_costs: dict[str, np.ndarray]
    candidate_costs: np.ndarray
    iterations: dict[str, np.ndarray]
    rmse_table: dict[str, RmseResult]
    timing: dict[str, float]


def budget_key(budget: int | None) -> str:
    return "converged" if budget is None else f"i{budget}"


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Simulate, observe, then estimate for every budget; audit cost decrease."""
    model = build_model(cfg)
    obs = build_observer(cfg)
    cost = build_cost(cfg)
    spec = build_noise_spec(cfg)

    t0 = time.perf_counter()
    w, v = draw_noise(spec, cfg.steps)
    if cfg.noise_scale != 1.0:
        w = w * cfg.noise_scale
        v = v * cfg.noise_scale
    truth = simulate(model, np.asarray(cfg.x0), w, v, cfg.steps)
    t1 = time.perf_counter()
    olog = run_observer(obs, np.asarray(cfg.z0), truth.outputs)
    t2 = time.perf_counter()

    keys = [budget_key(b) for b in cfg.budgets]
    if cfg.include_converged:
        keys.append("converged")
    n = model.n
    estimates = {k: np.empty((cfg.steps + 1, n)) for k in keys}
    accepted = {k: np.zeros(cfg.steps + 1) for k in keys}
    iterations = {k: np.zeros(cfg.steps + 1, dtype=np.int64) for k in keys}
    candidate_costs = np.zeros(cfg.steps + 1)
    for k in keys:
        estimates[k][0] = np.asarray(cfg.z0, dtype=np.float64)

    for t in range(1, cfg.steps + 1):
        problem = advance_window(model, cost, cfg.horizon, truth.outputs, olog, t)
        candidate = build_candidate(olog, problem.start, problem.horizon)
        per_budget, converged_result = solve_with_checkpoints(
            problem, candidate, cfg.solver, cfg.budgets,
            converged=cfg.include_converged,
        )
        solved = {budget_key(b): res for b, res in per_budget.items()}
        if converged_result is not None:
            solved["converged"] = converged_result
        for key, (d, report) in solved.items():
            j_hat = float(report.cost_trace[-1])
            j_tilde = float(report.cost_trace[0])
            if j_hat > j_tilde:
                raise RuntimeError(
                    f"cost-decrease audit failed at t={t}, series {key}: "
                    f"{j_hat} > {j_tilde}"
                )
            estimates[key][t] = rollout(problem, d).states[-1]
            accepted[key][t] = j_hat
            iterations[key][t] = report.iterations_used
        candidate_costs[t] = float(next(iter(solved.values()))[1].cost_trace[0])
    t3 = time.perf_counter()

    rmse_table = {k: rmse(truth.states, estimates[k]) for k in keys}
    timing = {
        "simulate": t1 - t0,
        "observer": t2 - t1,
        "estimate": t3 - t2,
        "total": t3 - t0,
    }
    return RunResult(
        config=cfg,
        truth=truth,
        observer=olog,
        estimates=estimates,
        accepted_costs=accepted,
        candidate_costs=candidate_costs,
        iterations=iterations,
        rmse_table=rmse_table,
        timing=timing,
    )


def _write_series_csv(path, truth_states: np.ndarray, est: np.ndarray) -> None:
    n = truth_states.shape[1]
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"xhat{i + 1}" for i in range(n)]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(truth_states.shape[0]):
            row = [str(t)]
            row += [f"{x:.17g}" for x in truth_states[t]]
            row += [f"{x:.17g}" for x in est[t]]
            fh.write(",".join(row) + "\n")


def run_summary(result: RunResult) -> dict:
    """Deterministic summary document (no timing) for the figure bundle."""
    keys = list(result.estimates)
    doc = {
        "seed": result.config.seed,
        "steps": result.config.steps,
        "horizon": result.config.horizon,
        "series": keys,
        "rmse": {
            k: {
                "per_component": result.rmse_table[k].per_component.tolist(),
                "aggregate": result.rmse_table[k].aggregate,
            }
            for k in keys
        },
        "candidate_costs": result.candidate_costs.tolist(),
        "accepted_costs": {k: result.accepted_costs[k].tolist() for k in keys},
    }
    if "converged" in result.estimates and "i5" in result.estimates:
        gap = np.linalg.norm(
            result.estimates["i5"] - result.estimates["converged"], axis=1
        )
        doc["max_gap_i5_converged"] = float(np.max(gap))
    return doc


def reproduce_figure(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Write one CSV per series (each budget, converged, truth) plus a
    summary JSON with the RMSE table and cost traces; returns the summary."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg)

    series = dict(result.estimates)
    series["truth"] = result.truth.states
    paths = {}
    for key, est in series.items():
        path = out / f"series_{key}.csv"
        _write_series_csv(path, result.truth.states, est)
        paths[key] = str(path)

    summary = run_summary(result)
    # Per-step budget ordering audit: more iterations never raise the cost.
    ordered = [budget_key(b) for b in sorted(result.config.budgets)]
    if "converged" in result.estimates:
        ordered.append("converged")
    for hi, lo in zip(ordered[1:], ordered[:-1]):
        if np.any(result.accepted_costs[hi] > result.accepted_costs[lo]):
            raise RuntimeError(f"budget ordering audit failed: {hi} vs {lo}")
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    paths["summary"] = str(summary_path)
    summary["paths"] = paths
    summary["timing"] = result.timing
    return summary


def analyze_run(result: RunResult) -> dict:
    """Fit the observer envelope on the run, then compare every series
    against the cost bound and the closed-form estimator envelope."""
    cfg = result.config
    truth = result.truth
    obs_err = np.linalg.norm(truth.states - result.observer.states, axis=1)
    fitted = fit_observer_envelope(
        [(obs_err, truth.disturbances, truth.noises)]
    )
    cbc = CostBoundConstants.from_parts(
        build_cost(cfg), build_model(cfg), build_observer(cfg)
    )
    initial_error = float(np.linalg.norm(np.asarray(cfg.x0) - np.asarray(cfg.z0)))
    bounds = np.array(
        [
            suboptimal_cost_bound(
                cbc, fitted, cfg.horizon, t, initial_error,
                truth.disturbances, truth.noises,
            )
            for t in range(cfg.steps + 1)
        ]
    )
    derived = envelope_constants(cfg.detectability, fitted, cbc, cfg.horizon)
    envelopes = {}
    for key, est in result.estimates.items():
        err = np.linalg.norm(truth.states - est, axis=1)
        report = check_rges_envelope(
            err, truth.disturbances, truth.noises, derived, initial_error
        )
        envelopes[key] = report
    cost_margins = {
        key: bounds - result.accepted_costs[key] for key in result.accepted_costs
    }
    return {
        "fitted_observer_constants": fitted,
        "estimator_constants": derived,
        "cost_bounds": bounds,
        "cost_margins": cost_margins,
        "envelope_reports": envelopes,
    }
