"""Iteration-budgeted window solver: warm start, never worse than it.

Projected descent with a monotone Armijo backtracking line search. Every
accepted step keeps the iterate feasible (chi0 and omegas are projected
onto their boxes, steps whose residuals or intermediate states leave
their sets are rejected), so any budget - including zero - returns a
feasible point whose cost does not exceed the warm start's.

Three direction rules share that machinery: "gn" (default) takes
Gauss-Newton steps built from the forward sensitivities, which reach the
accuracy of a fully converged solve within a handful of iterations;
"bb" is projected gradient descent with the spectral (Barzilai-Borwein)
steplength; "fixed" is plain projected gradient descent. The iterate
path is deterministic and independent of the budget, so a longer budget
always extends a shorter one's cost trace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import accel
from .dynamics import NumericsError
from .mhe import (
    FEASIBILITY_TOL,
    DecisionVector,
    HorizonProblem,
    check_feasible,
    eval_cost,
    _rollout_generic,
)


class InfeasibleCandidateError(ValueError):
    """The warm start violates the window constraints."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 500
    convergence_tol: float = 1e-8  # projected-gradient norm
    cost_tol: float = 1e-10  # cost decrease per iteration
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 40
    initial_step: float = 1.0
    step_rule: str = "gn"  # "gn", "bb" (spectral gradient) or "fixed"
    converged_cap: int = 500

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must be in (0, 1)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must be in (0, 1)")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.step_rule not in ("gn", "bb", "fixed"):
            raise ValueError("step_rule must be 'gn', 'bb' or 'fixed'")


@dataclass(frozen=True, eq=False)
class IterationReport:
    iterations_used: int
    cost_trace: np.ndarray  # leading entry is the warm-start cost
    converged: bool
    feasibility_residual: float


def cost_gradient(
    problem: HorizonProblem, d: DecisionVector
) -> tuple[np.ndarray, np.ndarray]:
    """Exact cost gradient w.r.t. (chi0, omegas) by reverse accumulation."""
    g_chi, g_om, _ = _gradient_with_cost(problem, d.chi0, d.omegas)
    return g_chi, g_om


def _gradient_with_cost(problem: HorizonProblem, chi0, omegas):
    kernels = accel.window_kernels(problem.model) if problem.cost.quad else None
    if kernels is not None:
        q = problem.cost.quad
        g_chi, g_om, value = kernels.gradient(
            chi0, omegas, problem.measurements, problem.prior,
            q.prior, q.disturbance, q.noise,
        )
    else:
        g_chi, g_om, value = _gradient_generic(problem, chi0, omegas)
    if not (np.all(np.isfinite(g_chi)) and np.all(np.isfinite(g_om))):
        raise NumericsError("cost gradient is non-finite")
    return g_chi, g_om, float(value)


def _require_gradients(problem: HorizonProblem) -> None:
    model = problem.model
    cost = problem.cost
    if model.f_jac is None or model.h_jac is None:
        raise ValueError("model Jacobians are required for gradient-based solving")
    if cost.gamma_grad is None or cost.stage_grad_w is None or cost.stage_grad_v is None:
        raise ValueError("cost gradients are required for gradient-based solving")


def _gradient_generic(problem: HorizonProblem, chi0, omegas):
    model = problem.model
    cost = problem.cost
    _require_gradients(problem)
    d = DecisionVector(chi0, omegas)
    states, resids = _rollout_generic(problem, d)
    total = float(cost.gamma(chi0, problem.prior))
    m = problem.horizon
    lam = np.zeros(model.n)
    g_om = np.empty_like(omegas)
    for i in range(m):
        total += float(cost.stage(omegas[i], resids[i]))
    for i in range(m - 1, -1, -1):
        g_om[i] = cost.stage_grad_w(omegas[i], resids[i]) + lam
        g_nu = cost.stage_grad_v(omegas[i], resids[i])
        lam = model.f_jac(states[i]).T @ lam - model.h_jac(states[i]).T @ g_nu
    g_chi = cost.gamma_grad(chi0, problem.prior) + lam
    return g_chi, g_om, total


def _gn_direction_generic(problem: HorizonProblem, chi0, omegas):
    """Gauss-Newton step for quadratic costs on the numpy path."""
    model = problem.model
    q = problem.cost.quad
    d = DecisionVector(chi0, omegas)
    states, _ = _rollout_generic(problem, d)
    m = problem.horizon
    n = model.n
    dim = n + m * n
    hess = np.zeros((dim, dim))
    hess[:n, :n] = 2.0 * q.prior
    sens = np.zeros((n, dim))
    sens[:, :n] = np.eye(n)
    for i in range(m):
        lo = n + i * n
        hess[lo : lo + n, lo : lo + n] += 2.0 * q.disturbance
        u = model.h_jac(states[i]) @ sens
        hess += 2.0 * (u.T @ (q.noise @ u))
        sens = model.f_jac(states[i]) @ sens
        sens[:, lo : lo + n] += np.eye(n)
    g_chi, g_om, total = _gradient_generic(problem, chi0, omegas)
    grad = np.concatenate([g_chi, g_om.ravel()])
    step = np.linalg.solve(hess, -grad)
    return step[:n], step[n:].reshape(m, n), g_chi, g_om, total


def _linesearch_generic(
    problem, chi0, omegas, dir_chi, dir_om, g_chi, g_om, cost_now, step, cfg
):
    model = problem.model
    x_lo, x_hi = model.state_set.lower, model.state_set.upper
    w_lo, w_hi = model.disturbance_set.lower, model.disturbance_set.upper
    alpha = step
    for _ in range(cfg.max_backtracks + 1):
        t_chi = np.clip(chi0 + alpha * dir_chi, x_lo, x_hi)
        t_om = np.clip(omegas + alpha * dir_om, w_lo, w_hi)
        descent = float(g_chi @ (t_chi - chi0)) + float(np.sum(g_om * (t_om - omegas)))
        d = DecisionVector(t_chi, t_om)
        with np.errstate(over="ignore", invalid="ignore"):
            # overlong trial steps may overflow transiently; they are rejected
            states, resids = _rollout_generic(problem, d)
        feasible = bool(
            np.all(np.isfinite(states))
            and np.all(resids >= model.noise_set.lower - FEASIBILITY_TOL)
            and np.all(resids <= model.noise_set.upper + FEASIBILITY_TOL)
            and np.all(states >= x_lo - FEASIBILITY_TOL)
            and np.all(states <= x_hi + FEASIBILITY_TOL)
        )
        if feasible:
            total = problem.cost.gamma(t_chi, problem.prior)
            for i in range(problem.horizon):
                total += problem.cost.stage(t_om[i], resids[i])
            if np.isfinite(total) and total <= cost_now + cfg.armijo_c * descent:
                return t_chi, t_om, float(total), alpha, True
        alpha *= cfg.backtrack_factor
    return chi0.copy(), omegas.copy(), cost_now, 0.0, False


def _projected_gradient_norm(problem, chi0, omegas, g_chi, g_om) -> float:
    model = problem.model
    step_chi = chi0 - np.clip(
        chi0 - g_chi, model.state_set.lower, model.state_set.upper
    )
    step_om = omegas - np.clip(
        omegas - g_om, model.disturbance_set.lower, model.disturbance_set.upper
    )
    return float(np.sqrt(np.sum(step_chi**2) + np.sum(step_om**2)))


def _solve_core(
    problem: HorizonProblem,
    candidate: DecisionVector,
    cfg: SolverConfig,
    limit: int,
    checkpoints: Sequence[int] = (),
):
    """Shared iteration loop; snapshots the iterate at the given budgets."""
    report = check_feasible(problem, candidate)
    if not report.feasible:
        raise InfeasibleCandidateError(
            f"candidate violates the window constraints by {report.max_violation:.3e}"
        )
    kernels = accel.window_kernels(problem.model) if problem.cost.quad else None
    q = problem.cost.quad
    model = problem.model
    use_gn = cfg.step_rule == "gn" and q is not None
    if use_gn and kernels is None:
        _require_gradients(problem)

    chi = candidate.chi0.copy()
    om = candidate.omegas.copy()
    cost_now = eval_cost(problem, candidate)
    trace = [cost_now]
    converged = False
    it = 0

    snaps: dict[int, tuple] = {}

    def snap(budget: int):
        snaps[budget] = (chi.copy(), om.copy(), it, list(trace), converged)

    pending = sorted(set(int(b) for b in checkpoints))
    for b in [b for b in pending if b <= 0]:
        snap(b)
    pending = [b for b in pending if b > 0]

    def evaluate(c, o):
        """Direction (gn or steepest descent), gradient and cost at (c, o)."""
        if use_gn:
            if kernels is not None:
                d_chi, d_om, g_chi, g_om, value = kernels.gn_direction(
                    c, o, problem.measurements, problem.prior,
                    q.prior, q.disturbance, q.noise,
                )
            else:
                d_chi, d_om, g_chi, g_om, value = _gn_direction_generic(problem, c, o)
            if not (np.all(np.isfinite(d_chi)) and np.all(np.isfinite(d_om))):
                d_chi, d_om = -g_chi, -g_om
        else:
            g_chi, g_om, value = _gradient_with_cost(problem, c, o)
            d_chi, d_om = -g_chi, -g_om
        if not (np.all(np.isfinite(g_chi)) and np.all(np.isfinite(g_om))):
            raise NumericsError("cost gradient is non-finite")
        return d_chi, d_om, g_chi, g_om, float(value)

    if limit > 0:
        dir_chi, dir_om, g_chi, g_om, _ = evaluate(chi, om)
        prev_step = None  # (s_chi, s_om, y_chi, y_om) for the spectral rule
        while it < limit:
            pg = _projected_gradient_norm(problem, chi, om, g_chi, g_om)
            if pg <= cfg.convergence_tol:
                converged = True
                break
            if cfg.step_rule == "bb" and prev_step is not None:
                s_chi, s_om, y_chi, y_om = prev_step
                sty = float(s_chi @ y_chi) + float(np.sum(s_om * y_om))
                sts = float(s_chi @ s_chi) + float(np.sum(s_om * s_om))
                if sty > 1e-300 and np.isfinite(sty):
                    alpha0 = min(max(sts / sty, 1e-12), 1e12)
                else:
                    alpha0 = cfg.initial_step
            else:
                alpha0 = cfg.initial_step
            if kernels is not None:
                n_chi, n_om, n_cost, _, ok = kernels.linesearch(
                    chi, om, problem.measurements, problem.prior,
                    q.prior, q.disturbance, q.noise,
                    dir_chi, dir_om, g_chi, g_om, cost_now, alpha0,
                    cfg.backtrack_factor, cfg.armijo_c, cfg.max_backtracks,
                    model.state_set.lower, model.state_set.upper,
                    model.disturbance_set.lower, model.disturbance_set.upper,
                    model.noise_set.lower, model.noise_set.upper,
                    FEASIBILITY_TOL,
                )
            else:
                n_chi, n_om, n_cost, _, ok = _linesearch_generic(
                    problem, chi, om, dir_chi, dir_om, g_chi, g_om,
                    cost_now, alpha0, cfg,
                )
            if not ok:
                break
            n_dir_chi, n_dir_om, ng_chi, ng_om, _ = evaluate(n_chi, n_om)
            prev_step = (n_chi - chi, n_om - om, ng_chi - g_chi, ng_om - g_om)
            decrease = cost_now - float(n_cost)
            chi, om, cost_now = n_chi, n_om, float(n_cost)
            dir_chi, dir_om, g_chi, g_om = n_dir_chi, n_dir_om, ng_chi, ng_om
            it += 1
            trace.append(cost_now)
            if decrease <= cfg.cost_tol:
                converged = True
            while pending and pending[0] == it:
                snap(pending.pop(0))
            if converged:
                break

    for b in pending:
        snap(b)

    final = (chi, om, it, list(trace), converged)
    return snaps, final


def _pack(problem, candidate, state) -> tuple[DecisionVector, IterationReport]:
    chi, om, it, trace, converged = state
    if it == 0:
        d = candidate
    else:
        d = DecisionVector(chi, om)
    feas = check_feasible(problem, d)
    report = IterationReport(
        iterations_used=it,
        cost_trace=np.asarray(trace, dtype=np.float64),
        converged=converged,
        feasibility_residual=feas.max_violation,
    )
    return d, report


def solve_suboptimal(
    problem: HorizonProblem, candidate: DecisionVector, cfg: SolverConfig
) -> tuple[DecisionVector, IterationReport]:
    """At most ``cfg.max_iterations`` descent steps from the warm start;
    with a zero budget the candidate is returned unchanged."""
    _, final = _solve_core(problem, candidate, cfg, limit=cfg.max_iterations)
    return _pack(problem, candidate, final)


def solve_converged(
    problem: HorizonProblem, candidate: DecisionVector, cfg: SolverConfig
) -> tuple[DecisionVector, IterationReport]:
    """Iterate until the projected-gradient norm or the per-iteration cost
    decrease falls below tolerance, capped at ``cfg.converged_cap`` steps."""
    _, final = _solve_core(problem, candidate, cfg, limit=cfg.converged_cap)
    return _pack(problem, candidate, final)


def solve_with_checkpoints(
    problem: HorizonProblem,
    candidate: DecisionVector,
    cfg: SolverConfig,
    budgets: Sequence[int],
    converged: bool = True,
):
    """One pass that snapshots the shared iterate path at several budgets.

    Because the iteration map does not depend on the budget, the snapshot at
    budget b is identical to a standalone ``solve_suboptimal`` run with
    ``max_iterations=b``. Returns (per-budget dict, converged result or None).
    """
    limit = cfg.converged_cap if converged else max(budgets, default=0)
    snaps, final = _solve_core(
        problem, candidate, cfg, limit=limit, checkpoints=budgets
    )
    results = {b: _pack(problem, candidate, snaps[b]) for b in snaps}
    final_result = _pack(problem, candidate, final) if converged else None
    return results, final_result
