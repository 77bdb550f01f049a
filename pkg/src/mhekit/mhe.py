"""Horizon window problems: cost, rollout, warm start, feasibility.

A window at time t covers the measurements y(t-M)..y(t-1) with
M = min(N, t) and is condensed by single shooting: the decision variables
are the window-initial state chi0 and the disturbance sequence; output
residuals are eliminated through the measurement equation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import accel
from .dynamics import NumericsError, SystemModel
from .observer import ObserverLog

FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class QuadWeights:
    """Weight matrices of a quadratic cost (prior, disturbance, residual)."""

    prior: np.ndarray
    disturbance: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        for name in ("prior", "disturbance", "noise"):
            m = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} weight must be a square matrix")
            object.__setattr__(self, name, m)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Prior weighting and stage cost together with their power bounds.

    The bounds state c_lo * |.|^a <= term <= c_hi * |.|^a for the prior
    weighting (in |chi - prior|), the disturbance part (in |omega|) and the
    residual part (in |nu|). ``quad`` is set for quadratic costs and enables
    the compiled kernels; the gradient callables are required for
    gradient-based solving of non-quadratic costs.
    """

    gamma: Callable[[np.ndarray, np.ndarray], float]
    stage: Callable[[np.ndarray, np.ndarray], float]
    a: float
    c_p_lo: float
    c_p_hi: float
    c_w_lo: float
    c_w_hi: float
    c_v_lo: float
    c_v_hi: float
    gamma_grad: Callable | None = None
    stage_grad_w: Callable | None = None
    stage_grad_v: Callable | None = None
    quad: QuadWeights | None = None

    def __post_init__(self):
        for name in ("a", "c_p_lo", "c_p_hi", "c_w_lo", "c_w_hi", "c_v_lo", "c_v_hi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def quadratic_cost(
    disturbance_weight,
    noise_weight,
    prior_weight=None,
) -> CostSpec:
    """Quadratic cost from weight matrices (typically inverse covariances).

    Stage cost omega' W omega + nu' V nu plus prior term
    (chi - prior)' P (chi - prior); P defaults to the identity. The power
    bounds follow from the extreme eigenvalues with exponent 2.
    """
    w = np.ascontiguousarray(disturbance_weight, dtype=np.float64)
    v = np.ascontiguousarray(noise_weight, dtype=np.float64)
    if prior_weight is None:
        prior_weight = np.eye(w.shape[0])
    p = np.ascontiguousarray(prior_weight, dtype=np.float64)
    quad = QuadWeights(prior=p, disturbance=w, noise=v)

    def _eig_range(m, name):
        vals = np.linalg.eigvalsh(0.5 * (m + m.T))
        if vals[0] <= 0:
            raise ValueError(f"{name} weight must be positive definite")
        return float(vals[0]), float(vals[-1])

    p_lo, p_hi = _eig_range(p, "prior")
    w_lo, w_hi = _eig_range(w, "disturbance")
    v_lo, v_hi = _eig_range(v, "noise")

    def gamma(chi, prior):
        d = chi - prior
        return float(d @ (p @ d))

    def stage(om, nu):
        return float(om @ (w @ om) + nu @ (v @ nu))

    return CostSpec(
        gamma=gamma,
        stage=stage,
        a=2.0,
        c_p_lo=p_lo,
        c_p_hi=p_hi,
        c_w_lo=w_lo,
        c_w_hi=w_hi,
        c_v_lo=v_lo,
        c_v_hi=v_hi,
        gamma_grad=lambda chi, prior: 2.0 * (p @ (chi - prior)),
        stage_grad_w=lambda om, nu: 2.0 * (w @ om),
        stage_grad_v=lambda om, nu: 2.0 * (v @ nu),
        quad=quad,
    )


@dataclass(frozen=True, eq=False)
class HorizonProblem:
    """One window problem: model, cost, prior, measurement slice."""

    model: SystemModel
    cost: CostSpec
    horizon: int
    prior: np.ndarray
    measurements: np.ndarray  # (M, p)
    start: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        prior = np.ascontiguousarray(self.prior, dtype=np.float64)
        ys = np.ascontiguousarray(self.measurements, dtype=np.float64)
        if ys.ndim == 1:
            ys = ys.reshape(-1, self.model.p)
        if ys.shape != (self.horizon, self.model.p):
            raise ValueError(
                f"need {self.horizon} measurements of dimension {self.model.p}"
            )
        if prior.shape != (self.model.n,):
            raise ValueError("prior dimension does not match the model")
        if not self.model.state_set.contains(prior, tol=FEASIBILITY_TOL):
            raise ValueError("prior is outside the state set")
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "measurements", ys)


@dataclass(frozen=True, eq=False)
class DecisionVector:
    """Window-initial state and disturbance sequence (the solver variables)."""

    chi0: np.ndarray
    omegas: np.ndarray  # (M, n)

    def __post_init__(self):
        chi0 = np.ascontiguousarray(self.chi0, dtype=np.float64)
        om = np.ascontiguousarray(self.omegas, dtype=np.float64)
        if om.ndim != 2 or chi0.ndim != 1 or om.shape[1] != chi0.shape[0]:
            raise ValueError("omegas must be (M, n) matching chi0")
        object.__setattr__(self, "chi0", chi0)
        object.__setattr__(self, "omegas", om)

    @property
    def horizon(self) -> int:
        return self.omegas.shape[0]

    def copy(self) -> "DecisionVector":
        return DecisionVector(self.chi0.copy(), self.omegas.copy())


@dataclass(frozen=True, eq=False)
class WindowRollout:
    """Forward pass of one decision vector: states, residuals, cost."""

    states: np.ndarray  # (M+1, n)
    residuals: np.ndarray  # (M, p)
    cost: float


@dataclass(frozen=True, eq=False)
class FeasibilityReport:
    feasible: bool
    max_violation: float
    violations: tuple[tuple[int, str, float], ...] = ()


def _check_dims(problem: HorizonProblem, d: DecisionVector) -> None:
    if d.chi0.shape[0] != problem.model.n or d.horizon != problem.horizon:
        raise ValueError("decision vector does not match the window dimensions")


def _rollout_generic(
    problem: HorizonProblem, d: DecisionVector
) -> tuple[np.ndarray, np.ndarray]:
    model = problem.model
    m = problem.horizon
    states = np.empty((m + 1, model.n))
    resids = np.empty((m, model.p))
    x = d.chi0.copy()
    states[0] = x
    for i in range(m):
        resids[i] = problem.measurements[i] - model.h(x)
        x = model.f(x) + d.omegas[i]
        states[i + 1] = x
    return states, resids


def _cost_generic(problem: HorizonProblem, d, states, resids) -> float:
    cost = problem.cost
    total = float(cost.gamma(d.chi0, problem.prior))
    for i in range(problem.horizon):
        total += float(cost.stage(d.omegas[i], resids[i]))
    return total


def rollout(problem: HorizonProblem, d: DecisionVector) -> WindowRollout:
    """Single-shooting forward pass with the eliminated residuals and cost."""
    _check_dims(problem, d)
    kernels = accel.window_kernels(problem.model) if problem.cost.quad else None
    if kernels is not None:
        q = problem.cost.quad
        states, resids = kernels.rollout(d.chi0, d.omegas, problem.measurements)
        value = float(
            kernels.cost(
                d.chi0, d.omegas, problem.measurements, problem.prior,
                q.prior, q.disturbance, q.noise,
            )
        )
    else:
        states, resids = _rollout_generic(problem, d)
        value = _cost_generic(problem, d, states, resids)
    if not (np.all(np.isfinite(states)) and np.isfinite(value)):
        raise NumericsError("window rollout produced non-finite values")
    return WindowRollout(states=states, residuals=resids, cost=value)


def eval_cost(problem: HorizonProblem, d: DecisionVector) -> float:
    """Prior term plus the stage-cost sum over the window."""
    _check_dims(problem, d)
    kernels = accel.window_kernels(problem.model) if problem.cost.quad else None
    if kernels is not None:
        q = problem.cost.quad
        value = float(
            kernels.cost(
                d.chi0, d.omegas, problem.measurements, problem.prior,
                q.prior, q.disturbance, q.noise,
            )
        )
    else:
        states, resids = _rollout_generic(problem, d)
        value = _cost_generic(problem, d, states, resids)
    if not np.isfinite(value):
        raise NumericsError("window cost is non-finite")
    return value


def build_candidate(olog: ObserverLog, start: int, horizon: int) -> DecisionVector:
    """Warm start from the observer: its state at the window start plus its
    corrections as the disturbance sequence. Rolling it forward reproduces
    the observer trajectory exactly."""
    if start < 0 or start + horizon > olog.steps:
        raise ValueError(
            f"observer log (length {olog.steps}) does not cover "
            f"window [{start}, {start + horizon})"
        )
    return DecisionVector(
        chi0=olog.states[start].copy(),
        omegas=olog.corrections[start : start + horizon].copy(),
    )


def advance_window(
    model: SystemModel,
    cost: CostSpec,
    horizon_cap: int,
    outputs,
    olog: ObserverLog,
    t: int,
) -> HorizonProblem:
    """Window problem for estimating the state at time t >= 1.

    Until the horizon is full the window grows with t (M = min(N, t)); the
    prior is the observer state at the window start.
    """
    if t < 1:
        raise ValueError("windows exist for t >= 1")
    ys = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    if ys.shape[0] < t:
        raise ValueError("measurement record shorter than t")
    m = min(horizon_cap, t)
    start = t - m
    if start + m > olog.steps:
        raise ValueError("observer log does not cover the window")
    return HorizonProblem(
        model=model,
        cost=cost,
        horizon=m,
        prior=olog.states[start].copy(),
        measurements=ys[start:t].copy(),
        start=start,
    )


def check_feasible(
    problem: HorizonProblem, d: DecisionVector, tol: float = FEASIBILITY_TOL
) -> FeasibilityReport:
    """Set membership of all window states, disturbances and residuals."""
    _check_dims(problem, d)
    ro = rollout(problem, d)
    model = problem.model
    violations: list[tuple[int, str, float]] = []
    for i in range(problem.horizon + 1):
        amount = model.state_set.violation(ro.states[i])
        if amount > tol:
            violations.append((i, "state", amount))
    for i in range(problem.horizon):
        amount = model.disturbance_set.violation(d.omegas[i])
        if amount > tol:
            violations.append((i, "disturbance", amount))
        amount = model.noise_set.violation(ro.residuals[i])
        if amount > tol:
            violations.append((i, "residual", amount))
    worst = max((v[2] for v in violations), default=0.0)
    return FeasibilityReport(
        feasible=not violations, max_violation=worst, violations=tuple(violations)
    )


def snapshot_json(problem: HorizonProblem, d: DecisionVector | None = None) -> str:
    """Serializable view of a window (debugging, regression goldens)."""
    doc = {
        "start": problem.start,
        "horizon": problem.horizon,
        "prior": problem.prior.tolist(),
        "measurements": problem.measurements.tolist(),
    }
    if d is not None:
        doc["candidate"] = {
            "chi0": d.chi0.tolist(),
            "omegas": d.omegas.tolist(),
        }
    return json.dumps(doc, sort_keys=True)
