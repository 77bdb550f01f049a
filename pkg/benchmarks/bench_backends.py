#!/usr/bin/env python3
"""Compare the compiled window kernels against the pure-numpy fallback.

Three configurations run the same case-study workload:
  numba    - fused @njit kernels (the default when numba imports)
  generic  - the numpy fallback algorithms calling compiled model maps
  python   - the numpy fallback with plain-Python model maps
             (what you get with MHEKIT_NUMBA=0)

Usage: python benchmarks/bench_backends.py [repeats]
"""

import sys
import time

import numpy as np

import mhekit as mk
from mhekit import accel
from mhekit.dynamics import NoiseSpec


def build_workload(jit: bool):
    model = mk.batch_reactor_model(jit=jit)
    observer = mk.batch_reactor_observer(jit=jit)
    cost = mk.quadratic_cost(100.0 * np.eye(2), [[25.0]])
    w, v = mk.draw_noise(NoiseSpec(0.01 * np.eye(2), [[0.04]], seed=77), 40)
    truth = mk.simulate(model, [5.0, 2.0], w, v, 40)
    olog = mk.run_observer(observer, [3.0, 0.0], truth.outputs)
    problem = mk.advance_window(model, cost, 10, truth.outputs, olog, 30)
    candidate = mk.build_candidate(olog, problem.start, problem.horizon)
    return problem, candidate


def time_call(fn, repeats: int) -> float:
    fn()  # warm (JIT compilation, caches)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench(problem, candidate, repeats) -> dict:
    cfg = mk.SolverConfig()
    return {
        "cost eval": time_call(lambda: mk.eval_cost(problem, candidate), repeats),
        "gradient": time_call(lambda: mk.cost_gradient(problem, candidate), repeats),
        "solve converged": time_call(
            lambda: mk.solve_converged(problem, candidate, cfg), max(1, repeats // 10)
        ),
    }


def main() -> int:
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    rows = {}
    if accel.numba_enabled():
        problem, candidate = build_workload(jit=True)
        rows["numba"] = bench(problem, candidate, repeats)
        with accel.force_generic():
            rows["generic"] = bench(problem, candidate, repeats)
    else:
        print("numba disabled or unavailable; benchmarking the fallback only")
    problem_py, candidate_py = build_workload(jit=False)
    rows["python"] = bench(problem_py, candidate_py, repeats)

    ops = list(next(iter(rows.values())))
    width = max(len(op) for op in ops)
    header = f"{'operation':<{width}}" + "".join(f"{k:>14}" for k in rows)
    if "numba" in rows:
        header += f"{'speedup':>10}"
    print(header)
    for op in ops:
        line = f"{op:<{width}}"
        for k in rows:
            line += f"{rows[k][op] * 1e6:>12.1f}us"
        if "numba" in rows:
            line += f"{rows['python'][op] / rows['numba'][op]:>9.1f}x"
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
