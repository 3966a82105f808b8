"""Time the compiled ADMM kernel against the NumPy fallback.

Runs a fixed iteration count (no early exit, no polishing) on random
strictly convex QPs and on a two-tank MPC problem, so both backends do
identical work.

    python3 benchmarks/bench_admm.py [--repeats 5]
"""
import argparse
import time

import numpy as np

from signdyn.el_model import ELModel
from signdyn.mpc import MpcSpec, build_qp
from signdyn.qp import QPProblem, QPSolver, available_backends
from signdyn.signs import two_tank_pattern


def random_problem(rng, n, m):
    M = rng.normal(size=(n, n))
    A = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)
    return QPProblem(M @ M.T + 0.1 * np.eye(n), rng.normal(size=n), A, A @ z0 - 1.0, A @ z0 + 1.0)


def mpc_problem(horizon):
    m = ELModel.create(two_tank_pattern(), rng=0, random_layers=True)
    spec = MpcSpec(horizon, 2, 1, w_req=1.0, w_u=1e-3, x_req=[0.3, 0.3], u_lo=0.0, u_hi=9.0,
                   x_lo=0.0, x_hi=1.0)
    return build_qp(m, spec, [0.1, 0.1]).qp


def time_backend(backend, p, iters, repeats):
    solver = QPSolver(backend=backend, polish=False, max_iter=iters, check_every=iters,
                      tol_prim=0.0, tol_dual=0.0)
    solver.solve(p)  # factorization and import warm-up
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        sol = solver.solve(p)
        best = min(best, time.perf_counter() - t)
    return best, sol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--iters", type=int, default=2000)
    args = ap.parse_args()
    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernel not built; only the NumPy fallback is timed")
    rng = np.random.default_rng(0)
    cases = [("random n=6 m=10", random_problem(rng, 6, 10)),
             ("random n=40 m=60", random_problem(rng, 40, 60)),
             ("two-tank MPC N=10", mpc_problem(10)),
             ("two-tank MPC N=50", mpc_problem(50))]
    print(f"{'problem':<20}{'n':>5}{'m':>5}" + "".join(f"{b + ' [ms]':>16}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    for name, p in cases:
        times, sols = [], []
        for b in backends:
            t, sol = time_backend(b, p, args.iters, args.repeats)
            times.append(t)
            sols.append(sol)
        row = f"{name:<20}{p.n:>5}{p.m:>5}" + "".join(f"{1e3 * t:>16.2f}" for t in times)
        if len(backends) > 1:
            assert np.allclose(sols[0].z, sols[1].z, atol=1e-9), "backends disagree"
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
