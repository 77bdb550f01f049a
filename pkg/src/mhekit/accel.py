"""Compiled hot-path kernels with a pure-numpy fallback.

The window rollout, quadratic cost, its gradient and the Armijo line
search dominate runtime (they run once or more per solver iteration, per
time step, per budget, per seed). When numba is importable and the
``MHEKIT_NUMBA`` environment variable is not ``0``, these are compiled
per model with ``@njit``; otherwise the generic numpy implementations in
:mod:`mhekit.mhe` and :mod:`mhekit.solver` are used. ``force_generic()``
switches the fallback on temporarily (tests, benchmarks).
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, NamedTuple

import numpy as np

ENV_FLAG = "MHEKIT_NUMBA"

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


_ENV_ON = os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "no")
_FORCED_GENERIC = False


def numba_available() -> bool:
    return _HAVE_NUMBA


def numba_enabled() -> bool:
    """True when compiled kernels are active (import, env flag, override)."""
    return _HAVE_NUMBA and _ENV_ON and not _FORCED_GENERIC


@contextmanager
def force_generic():
    """Run the enclosed block on the pure-numpy path."""
    global _FORCED_GENERIC
    previous = _FORCED_GENERIC
    _FORCED_GENERIC = True
    try:
        yield
    finally:
        _FORCED_GENERIC = previous


def maybe_jit(fn: Callable) -> Callable:
    """Apply ``@njit(cache=True)`` when the compiled path is active at import."""
    if _HAVE_NUMBA and _ENV_ON:
        return njit(cache=True)(fn)
    return fn


class WindowKernels(NamedTuple):
    """Fused kernels specialized to one model's transition/output maps."""

    rollout: Callable
    cost: Callable
    gradient: Callable
    gn_direction: Callable
    linesearch: Callable


def build_window_kernels(f, h, f_jac, h_jac, jit: bool = True) -> WindowKernels:
    """Build the fused window kernels around the given model maps.

    ``f``/``h``/``f_jac``/``h_jac`` must be callable from compiled code when
    ``jit`` is true (i.e. themselves ``@njit`` functions). With ``jit=False``
    the same source runs as plain Python, which is what the benchmark uses
    to compare backends.
    """
    deco = njit(cache=False) if (jit and _HAVE_NUMBA) else (lambda fn: fn)

    def _rollout(chi0, omegas, ys):
        m = omegas.shape[0]
        n = chi0.shape[0]
        p = ys.shape[1]
        states = np.empty((m + 1, n))
        resids = np.empty((m, p))
        x = chi0.copy()
        states[0] = x
        for i in range(m):
            resids[i] = ys[i] - h(x)
            x = f(x) + omegas[i]
            states[i + 1] = x
        return states, resids

    def _cost(chi0, omegas, ys, prior, pw, winv, vinv):
        m = omegas.shape[0]
        dx = chi0 - prior
        total = dx @ (pw @ dx)
        x = chi0.copy()
        for i in range(m):
            nu = ys[i] - h(x)
            om = omegas[i]
            total += om @ (winv @ om) + nu @ (vinv @ nu)
            x = f(x) + om
        return total

    def _gradient(chi0, omegas, ys, prior, pw, winv, vinv):
        m, n = omegas.shape
        p = ys.shape[1]
        states = np.empty((m + 1, n))
        resids = np.empty((m, p))
        dx = chi0 - prior
        total = dx @ (pw @ dx)
        x = chi0.copy()
        states[0] = x
        for i in range(m):
            nu = ys[i] - h(x)
            resids[i] = nu
            om = omegas[i]
            total += om @ (winv @ om) + nu @ (vinv @ nu)
            x = f(x) + om
            states[i + 1] = x
        # Reverse sweep: lam holds d(total)/d(state i+1) of the tail cost.
        lam = np.zeros(n)
        g_om = np.empty((m, n))
        for i in range(m - 1, -1, -1):
            g_om[i] = 2.0 * (winv @ omegas[i]) + lam
            g_nu = 2.0 * (vinv @ resids[i])
            lam = f_jac(states[i]).T @ lam - h_jac(states[i]).T @ g_nu
        g_chi = 2.0 * (pw @ (chi0 - prior)) + lam
        return g_chi, g_om, total

    def _gn_direction(chi0, omegas, ys, prior, pw, winv, vinv):
        """Gauss-Newton direction of the quadratic-cost window problem.

        Builds the (always positive-definite) Gauss-Newton Hessian from the
        forward sensitivities of the shooting recursion and solves for the
        step; also returns the exact gradient and the cost.
        """
        m, n = omegas.shape
        p = ys.shape[1]
        dim = n + m * n
        states = np.empty((m + 1, n))
        resids = np.empty((m, p))
        dx = chi0 - prior
        total = dx @ (pw @ dx)
        x = chi0.copy()
        states[0] = x
        hess = np.zeros((dim, dim))
        hess[:n, :n] = 2.0 * pw
        sens = np.zeros((n, dim))
        for j in range(n):
            sens[j, j] = 1.0
        for i in range(m):
            nu = ys[i] - h(x)
            resids[i] = nu
            om = omegas[i]
            total += om @ (winv @ om) + nu @ (vinv @ nu)
            lo = n + i * n
            hess[lo : lo + n, lo : lo + n] += 2.0 * winv
            u = h_jac(states[i]) @ sens  # (p, dim): d(nu_i)/d(decision) = -u
            hess += 2.0 * (u.T @ (vinv @ u))
            sens = f_jac(states[i]) @ sens
            for j in range(n):
                sens[j, lo + j] += 1.0
            x = f(x) + om
            states[i + 1] = x
        # Reverse sweep for the gradient.
        lam = np.zeros(n)
        g_om = np.empty((m, n))
        grad = np.empty(dim)
        for i in range(m - 1, -1, -1):
            g_om[i] = 2.0 * (winv @ omegas[i]) + lam
            g_nu = 2.0 * (vinv @ resids[i])
            lam = f_jac(states[i]).T @ lam - h_jac(states[i]).T @ g_nu
        g_chi = 2.0 * (pw @ (chi0 - prior)) + lam
        grad[:n] = g_chi
        for i in range(m):
            grad[n + i * n : n + (i + 1) * n] = g_om[i]
        step = np.linalg.solve(hess, -grad)
        d_chi = step[:n]
        d_om = step[n:].reshape((m, n)).copy()
        return d_chi, d_om, g_chi, g_om, total

    def _linesearch(
        chi0,
        omegas,
        ys,
        prior,
        pw,
        winv,
        vinv,
        dir_chi,
        dir_om,
        g_chi,
        g_om,
        cost_now,
        step,
        shrink,
        armijo_c,
        max_backtracks,
        x_lo,
        x_hi,
        w_lo,
        w_hi,
        v_lo,
        v_hi,
        feas_tol,
    ):
        m, n = omegas.shape
        alpha = step
        for _ in range(max_backtracks + 1):
            t_chi = np.minimum(np.maximum(chi0 + alpha * dir_chi, x_lo), x_hi)
            t_om = np.minimum(np.maximum(omegas + alpha * dir_om, w_lo), w_hi)
            descent = g_chi @ (t_chi - chi0)
            for i in range(m):
                descent += g_om[i] @ (t_om[i] - omegas[i])
            dx = t_chi - prior
            total = dx @ (pw @ dx)
            x = t_chi.copy()
            feasible = True
            for i in range(m):
                nu = ys[i] - h(x)
                for j in range(nu.shape[0]):
                    if nu[j] < v_lo[j] - feas_tol or nu[j] > v_hi[j] + feas_tol:
                        feasible = False
                om = t_om[i]
                total += om @ (winv @ om) + nu @ (vinv @ nu)
                x = f(x) + om
                for j in range(n):
                    if x[j] < x_lo[j] - feas_tol or x[j] > x_hi[j] + feas_tol:
                        feasible = False
                if not feasible:
                    break
            if feasible and np.isfinite(total):
                if total <= cost_now + armijo_c * descent:
                    return t_chi, t_om, total, alpha, True
            alpha *= shrink
        return chi0.copy(), omegas.copy(), cost_now, 0.0, False

    return WindowKernels(
        deco(_rollout),
        deco(_cost),
        deco(_gradient),
        deco(_gn_direction),
        deco(_linesearch),
    )


_KERNEL_CACHE: dict[tuple[int, ...], tuple[tuple, WindowKernels]] = {}


def window_kernels(model) -> WindowKernels | None:
    """Cached compiled kernels for ``model``, or None on the fallback path."""
    if not numba_enabled():
        return None
    maps = getattr(model, "jit_maps", None)
    if maps is None:
        return None
    key = tuple(id(fn) for fn in maps)
    hit = _KERNEL_CACHE.get(key)
    if hit is not None:
        return hit[1]
    kernels = build_window_kernels(*maps, jit=True)
    # Keep a strong reference to the maps so the id() key stays valid.
    _KERNEL_CACHE[key] = (maps, kernels)
    return kernels
