"""Disturbed discrete-time system models, simulation and noise generation.

The built-in example plant is a constant-volume batch reactor with the
reversible reaction 2A <-> B, measured through the total concentration
y = x1 + x2, discretized by a classical Runge-Kutta step.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import accel

REACTOR_K1 = 0.16
REACTOR_K2 = 0.64
DEFAULT_DT = 0.1


class NumericsError(RuntimeError):
    """A computation produced non-finite values."""


def _as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} must have dimension {dim}, got {v.shape[0]}")
    return v


@dataclass(frozen=True, eq=False)
class BoxSet:
    """Axis-aligned box, possibly unbounded per entry.

    Membership is an elementwise interval check; projection clips to the
    closest point of the box.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lower, name="lower")
        hi = _as_vector(self.upper, dim=lo.shape[0], name="upper")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int) -> "BoxSet":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        below = np.maximum(self.lower - x, 0.0)
        above = np.maximum(x - self.upper, 0.0)
        return float(np.max(np.maximum(below, above), initial=0.0))

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.violation(x) <= tol

    def project(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Discrete-time plant x+ = f(x) + w, y = h(x) + v with box constraint sets.

    ``jit_maps`` optionally holds compiled (f, h, f_jac, h_jac) used by the
    fused window kernels; the plain callables are always present.
    """

    n: int
    p: int
    f: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    state_set: BoxSet
    disturbance_set: BoxSet
    noise_set: BoxSet
    lipschitz_h: float | None = None
    f_jac: Callable[[np.ndarray], np.ndarray] | None = None
    h_jac: Callable[[np.ndarray], np.ndarray] | None = None
    jit_maps: tuple | None = None
    name: str = ""

    def __post_init__(self):
        if self.state_set.dim != self.n:
            raise ValueError("state_set dimension does not match n")
        if self.disturbance_set.dim != self.n:
            raise ValueError("disturbance_set dimension does not match n")
        if self.noise_set.dim != self.p:
            raise ValueError("noise_set dimension does not match p")
        if self.lipschitz_h is not None and not self.lipschitz_h > 0:
            raise ValueError("lipschitz_h must be positive when supplied")


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    """States, outputs and the exact noise realizations of one simulation."""

    states: np.ndarray  # (T+1, n)
    outputs: np.ndarray  # (T, p)
    disturbances: np.ndarray  # (T, n)
    noises: np.ndarray  # (T, p)
    excursions: tuple[int, ...] = ()

    def __post_init__(self):
        T = self.outputs.shape[0]
        if self.states.shape[0] != T + 1:
            raise ValueError("need T+1 states for T outputs")
        if self.disturbances.shape[0] != T or self.noises.shape[0] != T:
            raise ValueError("disturbance/noise sequences must have length T")

    @property
    def steps(self) -> int:
        return self.outputs.shape[0]

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Gaussian noise covariances plus the seed that fixes the realization."""

    covariance_w: np.ndarray
    covariance_v: np.ndarray
    seed: int

    def __post_init__(self):
        cw = np.ascontiguousarray(self.covariance_w, dtype=np.float64)
        cv = np.ascontiguousarray(self.covariance_v, dtype=np.float64)
        for name, c in (("covariance_w", cw), ("covariance_v", cv)):
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ValueError(f"{name} must be square")
            _psd_factor(c, name)
        object.__setattr__(self, "covariance_w", cw)
        object.__setattr__(self, "covariance_v", cv)


def _psd_factor(cov: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Factor L with L L^T = cov; raises on indefinite input."""
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    floor = -1e-10 * max(1.0, float(np.max(np.abs(vals), initial=0.0)))
    if np.any(vals < floor):
        raise ValueError(f"{name} is not positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def batch_reactor_drift(x) -> np.ndarray:
    """Continuous-time reactor kinetics for 2A <-> B in concentration units."""
    x = _as_vector(x, dim=2)
    drift = _reactor_maps(DEFAULT_DT, accel.numba_enabled())[4]
    return drift(x)


def rk4_step(drift: Callable[[np.ndarray], np.ndarray], x, dt: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of ``drift`` from ``x``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    k1 = drift(x)
    k2 = drift(x + 0.5 * dt * k1)
    k3 = drift(x + 0.5 * dt * k2)
    k4 = drift(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericsError("rk4_step produced a non-finite state")
    return out


@functools.lru_cache(maxsize=None)
def _reactor_maps(dt: float, jit: bool):
    """Reactor transition/output maps and exact Jacobians, optionally compiled."""
    if jit and accel.numba_available():
        deco = accel.njit(cache=True)
    else:
        deco = lambda fn: fn  # noqa: E731

    k1c = REACTOR_K1
    k2c = REACTOR_K2

    @deco
    def drift(x):
        a = k1c * x[0] * x[0]
        b = k2c * x[1]
        return np.array([-2.0 * a + 2.0 * b, a - b])

    @deco
    def drift_jac(x):
        da = 2.0 * k1c * x[0]
        return np.array([[-2.0 * da, 2.0 * k2c], [da, -k2c]])

    @deco
    def f(x):
        s1 = drift(x)
        s2 = drift(x + 0.5 * dt * s1)
        s3 = drift(x + 0.5 * dt * s2)
        s4 = drift(x + dt * s3)
        return x + (dt / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4)

    @deco
    def h(x):
        return np.array([x[0] + x[1]])

    @deco
    def f_jac(x):
        eye = np.eye(2)
        s1 = drift(x)
        j1 = drift_jac(x)
        x2 = x + 0.5 * dt * s1
        s2 = drift(x2)
        j2 = drift_jac(x2) @ (eye + 0.5 * dt * j1)
        x3 = x + 0.5 * dt * s2
        s3 = drift(x3)
        j3 = drift_jac(x3) @ (eye + 0.5 * dt * j2)
        x4 = x + dt * s3
        j4 = drift_jac(x4) @ (eye + dt * j3)
        return eye + (dt / 6.0) * (j1 + 2.0 * j2 + 2.0 * j3 + j4)

    @deco
    def h_jac(x):
        return np.array([[1.0, 1.0]])

    return f, h, f_jac, h_jac, drift


@functools.lru_cache(maxsize=None)
def _cached_reactor_model(dt: float, jit: bool) -> SystemModel:
    f, h, f_jac, h_jac, _ = _reactor_maps(dt, jit)
    return SystemModel(
        n=2,
        p=1,
        f=f,
        h=h,
        state_set=BoxSet.unbounded(2),
        disturbance_set=BoxSet.unbounded(2),
        noise_set=BoxSet.unbounded(1),
        lipschitz_h=float(np.sqrt(2.0)),
        f_jac=f_jac,
        h_jac=h_jac,
        jit_maps=(f, h, f_jac, h_jac) if (jit and accel.numba_available()) else None,
        name="batch_reactor",
    )


def batch_reactor_model(dt: float = DEFAULT_DT, jit: bool | None = None) -> SystemModel:
    """The discretized batch reactor (all constraint sets unbounded)."""
    if jit is None:
        jit = accel.numba_enabled()
    return _cached_reactor_model(float(dt), bool(jit))


def simulate(
    model: SystemModel,
    x0,
    disturbances,
    noises,
    steps: int,
) -> TrajectoryLog:
    """Roll the plant forward, logging everything needed for exact replay.

    A state leaving the state set is reported via ``warnings`` and recorded
    in the log, not projected: clipping would silently break replay.
    """
    x0 = _as_vector(x0, dim=model.n, name="x0")
    w = np.ascontiguousarray(disturbances, dtype=np.float64)
    v = np.ascontiguousarray(noises, dtype=np.float64)
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if w.shape[0] < steps or v.shape[0] < steps:
        raise ValueError("noise sequences shorter than the simulation horizon")
    if not model.state_set.contains(x0, tol=1e-12):
        raise ValueError("x0 is outside the state set")

    states = np.empty((steps + 1, model.n))
    outputs = np.empty((steps, model.p))
    states[0] = x0
    excursions: list[int] = []
    x = x0
    for k in range(steps):
        outputs[k] = model.h(x) + v[k]
        x = model.f(x) + w[k]
        if not np.all(np.isfinite(x)):
            raise NumericsError(f"state became non-finite at step {k + 1}")
        if not model.state_set.contains(x, tol=1e-12):
            excursions.append(k + 1)
        states[k + 1] = x
    if excursions:
        warnings.warn(
            f"state left the state set at {len(excursions)} step(s); "
            "trajectory logged without projection",
            RuntimeWarning,
            stacklevel=2,
        )
    return TrajectoryLog(
        states=states,
        outputs=outputs,
        disturbances=w[:steps].copy(),
        noises=v[:steps].copy(),
        excursions=tuple(excursions),
    )


def draw_noise(
    spec: NoiseSpec,
    steps: int,
    clip_to: tuple[BoxSet, BoxSet] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw Gaussian (w, v) sequences; same seed gives bit-identical output.

    With ``clip_to=(disturbance_set, noise_set)`` the draws are projected
    onto the sets and the number of clipped samples is reported via a
    warning (the default example uses unbounded sets, so nothing clips).
    """
    factor_w = _psd_factor(spec.covariance_w, "covariance_w")
    factor_v = _psd_factor(spec.covariance_v, "covariance_v")
    rng = np.random.default_rng(spec.seed)
    w = rng.standard_normal((steps, spec.covariance_w.shape[0])) @ factor_w.T
    v = rng.standard_normal((steps, spec.covariance_v.shape[0])) @ factor_v.T
    if clip_to is not None:
        w_set, v_set = clip_to
        w_clipped = np.clip(w, w_set.lower, w_set.upper)
        v_clipped = np.clip(v, v_set.lower, v_set.upper)
        n_clipped = int(np.sum(np.any(w_clipped != w, axis=1))) + int(
            np.sum(np.any(v_clipped != v, axis=1))
        )
        if n_clipped:
            warnings.warn(
                f"projected {n_clipped} noise sample(s) onto the bounded sets",
                RuntimeWarning,
                stacklevel=2,
            )
        w, v = w_clipped, v_clipped
    return w, v


def write_trajectory_csv(log: TrajectoryLog, path) -> None:
    """CSV with header t,x1..xn,y1..yp,w1..wn,v1..vp (final state row padded with nan)."""
    n = log.states.shape[1]
    p = log.outputs.shape[1]
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"y{i + 1}" for i in range(p)]
        + [f"w{i + 1}" for i in range(n)]
        + [f"v{i + 1}" for i in range(p)]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(log.steps + 1):
            row = [str(t)] + [f"{x:.17g}" for x in log.states[t]]
            if t < log.steps:
                row += [f"{y:.17g}" for y in log.outputs[t]]
                row += [f"{w:.17g}" for w in log.disturbances[t]]
                row += [f"{v:.17g}" for v in log.noises[t]]
            else:
                row += ["nan"] * (p + n + p)
            fh.write(",".join(row) + "\n")
