"""Stability bookkeeping: envelope constants, cost bounds, accuracy metrics.

Two exponential-envelope notions appear throughout: the observer's
robust-stability envelope (constants C_p, C_w, C_v and decay rho) and the
plant's exponential detectability envelope (c_p, c_w, c_v, eta). From
those, the cost of the observer-based warm start admits an explicit upper
bound, and the budgeted estimator inherits an envelope of the same shape
whose constants are computed here in closed form.

All norms are Euclidean. Fitted envelope constants validate consistency
with observed data only; they are labeled as fitted, never certified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_RHO_GRID = tuple(np.round(np.arange(0.50, 1.00, 0.01), 2)) + (0.999,)


@dataclass(frozen=True)
class RgesConstants:
    """Exponential error envelope: initial-error, disturbance and noise gains
    plus the decay rate. ``fitted`` marks constants estimated from data."""

    c_p: float
    c_w: float
    c_v: float
    rho: float
    fitted: bool = False

    def __post_init__(self):
        if not (self.c_p > 0 and self.c_w > 0 and self.c_v > 0):
            raise ValueError("envelope gains must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("decay rate must lie in (0, 1)")


@dataclass(frozen=True)
class DetectabilityConstants:
    """Exponential incremental detectability envelope of the plant."""

    c_p: float
    c_w: float
    c_v: float
    eta: float

    def __post_init__(self):
        if not (self.c_p > 0 and self.c_w > 0 and self.c_v > 0):
            raise ValueError("detectability gains must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")


@dataclass(frozen=True)
class CostBoundConstants:
    """Cost-bound ingredients: power-bound constants of the cost, the output
    map's Lipschitz constant and the observer gain bound."""

    a: float
    c_p_lo: float
    c_w_lo: float
    c_v_lo: float
    c_w_hi: float
    c_v_hi: float
    lipschitz_h: float
    kappa: float

    def __post_init__(self):
        for name in ("a", "c_p_lo", "c_w_lo", "c_v_lo", "c_w_hi", "c_v_hi",
                     "lipschitz_h", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_parts(cls, cost, model, observer) -> "CostBoundConstants":
        if model.lipschitz_h is None:
            raise ValueError("model.lipschitz_h is required for the cost bound")
        return cls(
            a=cost.a,
            c_p_lo=cost.c_p_lo,
            c_w_lo=cost.c_w_lo,
            c_v_lo=cost.c_v_lo,
            c_w_hi=cost.c_w_hi,
            c_v_hi=cost.c_v_hi,
            lipschitz_h=model.lipschitz_h,
            kappa=observer.kappa,
        )


def _check_factor_args(rho: float, a: float, horizon: int) -> None:
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    if not a > 0:
        raise ValueError("a must be positive")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")


def horizon_factor_initial(rho: float, a: float, horizon: int) -> float:
    """Geometric window sum amplifying the decayed initial-error term:
    (rho^(-a*N) - 1) / (1 - rho^a), equal to sum_{k=1..N} rho^(-a*k)."""
    _check_factor_args(rho, a, horizon)
    ra = rho**a
    return (rho ** (-a * horizon) - 1.0) / (1.0 - ra)


def horizon_factor_disturbance(rho: float, a: float, horizon: int) -> float:
    """Geometric window sum amplifying the discounted disturbance terms:
    (rho^(-a*(N-1)) - rho^a) / (1 - rho^a), equal to sum_{j=1..N} (rho^a)^(j-N)."""
    _check_factor_args(rho, a, horizon)
    ra = rho**a
    return (rho ** (-a * (horizon - 1)) - ra) / (1.0 - ra)


def stage_envelope_scale(cbc: CostBoundConstants, rc: RgesConstants) -> float:
    """Common scale of the warm-start cost bound:
    (3*Lbar)^a * (c_w_hi * kappa^a + c_v_hi) with Lbar = max(L_h, 1/C_v)."""
    lbar = max(cbc.lipschitz_h, 1.0 / rc.c_v)
    return (3.0 * lbar) ** cbc.a * (
        cbc.c_w_hi * cbc.kappa**cbc.a + cbc.c_v_hi
    )


def _discounted_sums(rho: float, seq_norms: np.ndarray, t: int, offset: int) -> float:
    """sum_{tau=1..t} rho^(tau-offset) * |seq(t-tau)| with offset 0 or 1."""
    if t == 0:
        return 0.0
    taus = np.arange(1, t + 1)
    return float(np.sum(rho ** (taus - offset) * seq_norms[t - taus]))


def _norm_rows(seq) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(seq, dtype=np.float64))
    return np.sqrt(np.sum(arr * arr, axis=1))


def suboptimal_cost_bound(
    cbc: CostBoundConstants,
    rc: RgesConstants,
    horizon: int,
    t: int,
    initial_error: float,
    disturbances,
    noises,
) -> float:
    """Upper bound on the accepted window cost at time t.

    Three terms: the decayed initial estimation error plus the discounted
    disturbance and noise histories, each raised to the cost exponent and
    amplified by the corresponding geometric window factor.
    """
    w_norms = _norm_rows(disturbances)
    v_norms = _norm_rows(noises)
    if t > w_norms.shape[0] or t > v_norms.shape[0]:
        raise ValueError("histories shorter than t")
    a = cbc.a
    cbar = stage_envelope_scale(cbc, rc)
    r1 = horizon_factor_initial(rc.rho, a, horizon)
    r2 = horizon_factor_disturbance(rc.rho, a, horizon)
    sum_w = _discounted_sums(rc.rho, w_norms, t, offset=1)
    sum_v = _discounted_sums(rc.rho, v_norms, t, offset=1)
    return (
        rc.c_p**a * cbar * r1 * initial_error**a * rc.rho ** (a * t)
        + rc.c_w**a * cbar * r2 * sum_w**a
        + rc.c_v**a * cbar * r2 * sum_v**a
    )


def envelope_constants(
    dc: DetectabilityConstants,
    rc: RgesConstants,
    cbc: CostBoundConstants,
    horizon: int,
) -> RgesConstants:
    """Closed-form error envelope of the budgeted estimator.

    Combines the detectability envelope, the observer envelope and the
    warm-start cost bound into (C1, C2, C3, lambda); each gain is the
    maximum of its full-window and growing-window expressions, and the
    decay is lambda = max(eta, rho).
    """
    a = cbc.a
    lam = max(dc.eta, rc.rho)
    eta_bar = dc.eta / (1.0 - dc.eta)
    cbar = stage_envelope_scale(cbc, rc)
    r1 = horizon_factor_initial(rc.rho, a, horizon)
    r2 = horizon_factor_disturbance(rc.rho, a, horizon)
    cap_p = rc.c_p * (3.0 * cbar * r1) ** (1.0 / a)
    cap_w = rc.c_w / rc.rho * (3.0 * cbar * r2) ** (1.0 / a)
    cap_v = rc.c_v / rc.rho * (3.0 * cbar * r2) ** (1.0 / a)

    mix_full = (
        dc.c_p * dc.eta**horizon * cbc.c_p_lo ** (-1.0 / a)
        + dc.c_w * eta_bar * cbc.c_w_lo ** (-1.0 / a)
        + dc.c_v * eta_bar * cbc.c_v_lo ** (-1.0 / a)
    )
    obs_full = dc.c_p * (dc.eta / lam) ** horizon
    c1_full = mix_full * cap_p + obs_full * rc.c_p
    c2_full = mix_full * cap_w + obs_full * rc.c_w + dc.c_w
    c3_full = mix_full * cap_v + obs_full * rc.c_v + dc.c_v

    mix_grow = (
        dc.c_p * cbc.c_p_lo ** (-1.0 / a)
        + dc.c_w * eta_bar * cbc.c_w_lo ** (-1.0 / a)
        + dc.c_v * eta_bar * cbc.c_v_lo ** (-1.0 / a)
    )
    c1_grow = dc.c_p + mix_grow * cap_p
    c2_grow = dc.c_w + mix_grow * cap_w
    c3_grow = dc.c_v + mix_grow * cap_v

    return RgesConstants(
        c_p=max(c1_full, c1_grow),
        c_w=max(c2_full, c2_grow),
        c_v=max(c3_full, c3_grow),
        rho=lam,
    )


@dataclass(frozen=True, eq=False)
class EnvelopeReport:
    """Per-step comparison of an error trajectory against its envelope."""

    errors: np.ndarray
    bounds: np.ndarray
    margins: np.ndarray
    min_margin: float
    argmin: int

    @property
    def satisfied(self) -> bool:
        return self.min_margin >= 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,error,bound,margin\n")
            for t in range(self.errors.shape[0]):
                fh.write(
                    f"{t},{self.errors[t]:.17g},{self.bounds[t]:.17g},"
                    f"{self.margins[t]:.17g}\n"
                )


def check_rges_envelope(
    errors,
    disturbances,
    noises,
    constants: RgesConstants,
    initial_error: float | None = None,
) -> EnvelopeReport:
    """Margins bound(t) - error(t) of an exponential envelope over a run.

    ``errors`` holds |x(t) - estimate(t)| for t = 0..T; the disturbance and
    noise histories must cover t-1 entries ahead of each checked t.
    """
    err = np.asarray(errors, dtype=np.float64)
    w_norms = _norm_rows(disturbances)
    v_norms = _norm_rows(noises)
    steps = err.shape[0]
    if w_norms.shape[0] < steps - 1 or v_norms.shape[0] < steps - 1:
        raise ValueError("histories shorter than the error trajectory")
    e0 = float(err[0]) if initial_error is None else float(initial_error)
    bounds = np.empty(steps)
    for t in range(steps):
        bounds[t] = (
            constants.c_p * e0 * constants.rho**t
            + constants.c_w * _discounted_sums(constants.rho, w_norms, t, offset=0)
            + constants.c_v * _discounted_sums(constants.rho, v_norms, t, offset=0)
        )
    margins = bounds - err
    argmin = int(np.argmin(margins))
    return EnvelopeReport(
        errors=err,
        bounds=bounds,
        margins=margins,
        min_margin=float(margins[argmin]),
        argmin=argmin,
    )


def fit_observer_envelope(
    trajectories: Sequence[tuple],
    rho_grid: Sequence[float] = DEFAULT_RHO_GRID,
) -> RgesConstants:
    """Smallest single envelope gain covering the given error trajectories.

    Each trajectory is (errors, disturbances, noises) with errors indexed
    t = 0..T and histories of length >= T; an optional fourth element
    overrides the initial error fed to the envelope (default errors[0]).
    For each grid decay rate the minimal common gain is the pointwise
    maximum of error/denominator ratios (the envelope is linear in its
    gains at fixed decay); the rate with the smallest gain wins, ties
    favoring faster decay. The result is flagged fitted: it validates
    consistency with this data, nothing more.
    """
    if not trajectories:
        raise ValueError("at least one trajectory is required")
    prepared = []
    for traj in trajectories:
        errors, disturbances, noises = traj[:3]
        err = np.asarray(errors, dtype=np.float64)
        e0 = float(traj[3]) if len(traj) > 3 else float(err[0])
        prepared.append((err, _norm_rows(disturbances), _norm_rows(noises), e0))

    best: tuple[float, float] | None = None  # (gain, rho)
    any_error = any(np.any(err > 1e-12) for err, _, _, _ in prepared)
    if not any_error:
        return RgesConstants(1.0, 1.0, 1.0, rho=float(rho_grid[0]), fitted=True)

    for rho in rho_grid:
        worst = 0.0
        feasible = True
        for err, w_norms, v_norms, e0 in prepared:
            for t in range(err.shape[0]):
                denom = (
                    e0 * rho**t
                    + _discounted_sums(rho, w_norms, t, offset=0)
                    + _discounted_sums(rho, v_norms, t, offset=0)
                )
                if denom <= 0.0:
                    if err[t] > 1e-12:
                        feasible = False
                        break
                    continue
                worst = max(worst, float(err[t]) / denom)
            if not feasible:
                break
        if feasible and (best is None or worst < best[0] - 1e-15):
            best = (worst, float(rho))
    if best is None:
        raise ValueError("no decay rate in the grid admits finite envelope gains")
    gain = max(best[0], 1e-12)
    return RgesConstants(gain, gain, gain, rho=best[1], fitted=True)


@dataclass(frozen=True, eq=False)
class RmseResult:
    per_component: np.ndarray
    aggregate: float


def rmse(truth, estimates, skip: int = 0) -> RmseResult:
    """Root-mean-square estimation error, per component and aggregate.

    ``skip`` drops the leading transient steps from the average.
    """
    xt = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    xe = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    if xt.shape != xe.shape:
        raise ValueError("truth and estimate trajectories differ in shape")
    diff = (xt - xe)[skip:]
    if diff.shape[0] == 0:
        raise ValueError("skip removes every sample")
    per = np.sqrt(np.mean(diff**2, axis=0))
    agg = float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
    return RmseResult(per_component=per, aggregate=agg)
