"""Independent reference implementations used by the tests."""
import itertools

import numpy as np


def active_set_qp(P, q, A, l, u, tol=1e-9):
    """Exhaustive active-set solution of a strictly convex QP ``l <= Az <= u``.

    Candidate active sets are enumerated by increasing size; each is solved
    as an equality-constrained KKT system and accepted once it is primal
    feasible with correctly signed multipliers. Returns ``(z, y)`` or None.
    """
    n, m = len(q), len(l)
    eq = [i for i in range(m) if abs(u[i] - l[i]) <= 1e-12]
    ineq = [i for i in range(m) if i not in eq]
    for size in range(len(ineq) + 1):
        for rows in itertools.combinations(ineq, size):
            sides = [[s for s, b in (("l", l[r]), ("u", u[r])) if np.isfinite(b)] for r in rows]
            for choice in itertools.product(*sides):
                act = eq + list(rows)
                rhs_b = [l[r] for r in eq] + [l[r] if c == "l" else u[r] for r, c in zip(rows, choice)]
                Aa = A[act] if act else np.zeros((0, n))
                k = len(act)
                K = np.block([[P, Aa.T], [Aa, np.zeros((k, k))]])
                rhs = np.concatenate([-q, rhs_b])
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
                if np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-8 * (1 + np.abs(rhs).max(initial=0)):
                    continue  # inconsistent (over-determined) active set
                z = sol[:n]
                Az = A @ z
                if np.any(Az < l - tol) or np.any(Az > u + tol):
                    continue
                y = np.zeros(m)
                y[act] = sol[n:]
                ok = all((c == "l" and y[r] <= tol) or (c == "u" and y[r] >= -tol)
                         for r, c in zip(rows, choice))
                if ok:
                    return z, y
    return None


def fd_grad(fun, params: dict, key: str, idx, h=1e-6):
    """Central difference of ``fun()`` w.r.t. one entry of ``params[key]`` (mutated in place)."""
    arr = params[key]
    old = arr[idx]
    arr[idx] = old + h
    fp = fun()
    arr[idx] = old - h
    fm = fun()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def random_qp(rng, n=None, m=None, with_eq=True):
    n = n or int(rng.integers(1, 7))
    m = m if m is not None else int(rng.integers(0, 11))
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)  # guarantees feasibility
    Az0 = A @ z0
    l = Az0 - rng.uniform(0.0, 2.0, m)
    u = Az0 + rng.uniform(0.0, 2.0, m)
    kind = rng.integers(0, 4, m)
    l[kind == 1] = -np.inf
    u[kind == 2] = np.inf
    if with_eq and m:
        e = rng.random(m) < 0.15
        l[e] = u[e] = np.where(np.isfinite(Az0[e]), Az0[e], 0.0)
    return P, q, A, l, u
