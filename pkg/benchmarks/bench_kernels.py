"""Compiled versus plain-numpy hot loops.

Times one short-interval Picard solve and one Riccati sweep on each path and
checks that both paths produce the same numbers.  Run with

    python benchmarks/bench_kernels.py [--n 64] [--repeat 3]

MFGFLOW_DISABLE_NUMBA=1 makes the "numba" rows fall back to numpy as well.
"""

import argparse
import time

import numpy as np

from mfgflow.measure import gaussian
from mfgflow.model import nonlq_model
from mfgflow.solver import SolverSettings, TimeGrid, linearize, solve_local, terminal_jacobian
from mfgflow.kernels import riccati_backward
from mfgflow.verify import compute_cascade


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=64, help="particles")
    ap.add_argument("--steps", type=int, default=125, help="grid steps on the interval")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    model = nonlq_model()
    cascade = compute_cascade(model)
    mu = gaussian(0.0, 1.0, args.n, 7)
    grid = TimeGrid(0.0, args.steps * 1e-3, args.steps)
    rows = []
    results = {}
    for label, flag in (("numba", True), ("numpy", False)):
        settings = SolverSettings(use_numba=flag)
        solve_local(model, cascade, mu, grid, settings=settings)  # warm-up / compile
        t_solve, sol = best_of(lambda: solve_local(model, cascade, mu, grid, settings=settings), args.repeat)
        node, mid = linearize(model, sol.X, sol.Z, sol.alpha, sol.F, sol.G, sol.weights, grid.step, settings)
        PT = terminal_jacobian(model, sol.X[-1], sol.weights)
        riccati_backward(PT, grid.step, node, mid, True, flag)
        t_ric, (_, Ps, _) = best_of(lambda: riccati_backward(PT, grid.step, node, mid, True, flag), args.repeat)
        results[label] = (sol.Z, Ps)
        rows.append((label, t_solve, t_ric))

    print(f"NonLQ, {args.n} particles, {args.steps} steps, best of {args.repeat}")
    print(f"{'path':<8}{'picard solve [s]':>18}{'riccati [s]':>14}")
    for label, ts, tr in rows:
        print(f"{label:<8}{ts:>18.4f}{tr:>14.4f}")
    (_, s1, r1), (_, s2, r2) = rows
    print(f"speed-up: solve x{s2 / s1:.1f}, riccati x{r2 / r1:.1f}")
    dz = np.max(np.abs(results["numba"][0] - results["numpy"][0]))
    dp = np.max(np.abs(results["numba"][1] - results["numpy"][1]))
    print(f"max |Z numba - Z numpy| = {dz:.2e}, max |P numba - P numpy| = {dp:.2e}")


if __name__ == "__main__":
    main()
