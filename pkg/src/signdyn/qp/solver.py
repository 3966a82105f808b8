"""Operator-splitting (ADMM) solver for convex QPs

    minimize    1/2 z^T P z + q^T z
    subject to  l <= A z <= u

with Ruiz equilibration of the data, a cached Cholesky factorization of the
reduced linear system, fixed penalties, over-relaxation, active-set
polishing and a primal infeasibility certificate. Termination is decided on
the residuals of the unscaled problem. Problems are stored dense: at the sizes used
here (a few hundred variables at most) dense factorizations are cheaper
than sparse bookkeeping.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _backend

log = logging.getLogger(__name__)

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"

RHO_EQ_FACTOR = 1e3
RHO_MIN = 1e-6
SCALING_ITERS = 10


class QPError(ValueError):
    """Malformed QP data (asymmetric / indefinite P, l > u, shape mismatch)."""


def _dense(M, shape=None) -> np.ndarray:
    if sp.issparse(M):
        M = M.toarray()
    M = np.asarray(M, dtype=float)
    if shape is not None:
        M = M.reshape(shape)
    return M


@dataclass
class QPProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.q = _dense(self.q).reshape(-1)
        n = self.q.size
        self.P = _dense(self.P, (n, n))
        self.A = _dense(self.A, (-1, n)) if np.size(self.A) else np.zeros((0, n))
        m = self.A.shape[0]
        self.l = _dense(self.l).reshape(-1) if m else np.zeros(0)
        self.u = _dense(self.u).reshape(-1) if m else np.zeros(0)
        if self.l.size != m or self.u.size != m:
            raise QPError("bounds must have one entry per constraint row")
        if np.any(self.l > self.u):
            raise QPError("lower bound exceeds upper bound")
        if np.any(np.isnan(self.l)) or np.any(np.isnan(self.u)):
            raise QPError("NaN in bounds")
        scale = max(1.0, float(np.max(np.abs(self.P)))) if n else 1.0
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > 1e-9 * scale:
            raise QPError("P is not symmetric")
        self.P = 0.5 * (self.P + self.P.T)
        if n and np.linalg.eigvalsh(self.P)[0] < -1e-8 * scale:
            raise QPError("P is not positive semidefinite")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, z) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)

    def residuals(self, z, y) -> tuple[float, float]:
        """(max distance of Az to [l, u], max |Pz + q + A^T y|)."""
        Az = self.A @ z
        prim = float(np.max(np.maximum(self.l - Az, 0.0) + np.maximum(Az - self.u, 0.0), initial=0.0))
        dual = float(np.max(np.abs(self.P @ z + self.q + self.A.T @ y), initial=0.0))
        return prim, dual


@dataclass
class QPSolution:
    z: np.ndarray
    y: np.ndarray
    status: str
    residuals: tuple
    iterations: int
    objective: float = float("nan")
    polished: bool = False
    slack: np.ndarray | None = field(default=None, repr=False)

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


def _rho_vector(l, u, rho):
    r = np.full(l.size, rho)
    r[(l == -np.inf) & (u == np.inf)] = RHO_MIN
    r[np.abs(u - l) <= 1e-12] = rho * RHO_EQ_FACTOR
    return r


def ruiz_scaling(P, A, iters: int = SCALING_ITERS):
    """Diagonal D (variables), E (rows) and cost factor c equilibrating the KKT matrix."""
    n, m = P.shape[0], A.shape[0]
    D, E = np.ones(n), np.ones(m)
    Ps, As = P.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        dx = 1.0 / np.sqrt(np.clip(np.where(col > 0, col, 1.0), 1e-4, 1e4))
        row = np.abs(As).max(axis=1, initial=0.0)
        de = 1.0 / np.sqrt(np.clip(np.where(row > 0, row, 1.0), 1e-4, 1e4))
        Ps = dx[:, None] * Ps * dx[None, :]
        As = de[:, None] * As * dx[None, :]
        D *= dx
        E *= de
    mean_col = float(np.mean(np.abs(Ps).max(axis=0, initial=0.0))) if n else 0.0
    c = 1.0 / float(np.clip(mean_col if mean_col > 0 else 1.0, 1e-4, 1e4))
    return D, E, c


class QPSolver:
    """Reusable solver workspace; refactors only when P, A or the row kinds change."""

    def __init__(self, rho: float = 1.0, sigma: float = 1e-6, alpha: float = 1.6,
                 tol_prim: float = 1e-8, tol_dual: float = 1e-8, max_iter: int = 50000,
                 check_every: int = 25, polish: bool = True, backend: str | None = None,
                 scaling: bool = True):
        self.rho = rho
        self.sigma = sigma
        self.alpha = alpha
        self.tol_prim = tol_prim
        self.tol_dual = tol_dual
        self.max_iter = max_iter
        self.check_every = check_every
        self.polish = polish
        self.scaling = scaling
        self.kernel = _backend.get_kernel(backend)
        self._key = None
        self._L = None
        self._scaled = None
        self.n_factorizations = 0

    def _prepare(self, p: QPProblem, rho_vec):
        """Scaled (P, A), scaling vectors and the Cholesky factor, cached across solves."""
        key = (p.P.tobytes(), p.A.tobytes(), rho_vec.tobytes())
        if key != self._key:
            if self.scaling:
                D, E, c = ruiz_scaling(p.P, p.A)
            else:
                D, E, c = np.ones(p.n), np.ones(p.m), 1.0
            Ps = np.ascontiguousarray(c * D[:, None] * p.P * D[None, :])
            As = np.ascontiguousarray(E[:, None] * p.A * D[None, :])
            K = Ps + self.sigma * np.eye(p.n) + As.T @ (rho_vec[:, None] * As)
            self._L = np.ascontiguousarray(np.linalg.cholesky(K))
            self._scaled = (Ps, As, D, E, c)
            self._key = key
            self.n_factorizations += 1
        return self._L, self._scaled

    def solve(self, p: QPProblem, warm: QPSolution | None = None) -> QPSolution:
        n, m = p.n, p.m
        rho_vec = _rho_vector(p.l, p.u, self.rho)
        L, (P, A, D, E, c) = self._prepare(p, rho_vec)
        q = np.ascontiguousarray(c * D * p.q)
        l = np.ascontiguousarray(E * p.l)
        u = np.ascontiguousarray(E * p.u)
        if warm is not None and warm.z.size == n and warm.y.size == m:
            x = warm.z.astype(float) / D
            y = c * warm.y.astype(float) / E
            s0 = p.A @ warm.z if warm.slack is None else warm.slack
            s = np.clip(E * s0, l, u).astype(float)
        else:
            x = np.zeros(n)
            y = np.zeros(m)
            s = np.clip(np.zeros(m), l, u)
        dy = np.zeros(m)

        def unscale():
            return D * x, E * y / c

        iters = 0
        status = MAX_ITER
        best = None
        last_active = None
        chunk = max(self.check_every, 200)
        while iters < self.max_iter:
            k, conv, prim, dual = self.kernel(L, P, q, A, l, u, rho_vec, self.sigma, self.alpha,
                                              x, s, y, dy, min(chunk, self.max_iter - iters),
                                              self.check_every, self.tol_prim, self.tol_dual)
            iters += int(k)
            if not (np.isfinite(prim) and np.isfinite(dual)):
                break
            if conv:
                res = p.residuals(*unscale())
                if res[0] <= self.tol_prim and res[1] <= self.tol_dual:
                    status = SOLVED
                    break
            if self.polish:
                active = _active_set(s, y, l, u, rho_vec)
                if last_active is None or not all(np.array_equal(a, b) for a, b in zip(active, last_active)):
                    last_active = active
                    best = self._polish(p, active)
                    if best is not None:
                        status = SOLVED
                        break
            if m and _primal_infeasible(A, l, u, dy):
                status = PRIMAL_INFEASIBLE
                break
        if best is None and status == SOLVED and self.polish:
            best = self._polish(p, _active_set(s, y, l, u, rho_vec))
        if best is not None:
            z_out, y_out = best
            return QPSolution(z_out, y_out, SOLVED, p.residuals(z_out, y_out), iters,
                              p.objective(z_out), True, np.clip(p.A @ z_out, p.l, p.u))
        z_out, y_out = unscale()
        res = p.residuals(z_out, y_out)
        return QPSolution(z_out, y_out, status, res, iters, p.objective(z_out), False, s / E)

    def _polish(self, p: QPProblem, active, rounds: int = 10):
        """Solve the equality-constrained KKT system of a guessed active set.

        The guess is refined a few times: violated inactive rows are added and
        rows whose multiplier has the wrong sign are released. Returns
        ``(z, y)`` when the result meets both tolerances, else None.
        """
        lower, upper = (a.copy() for a in active)
        eq = np.abs(p.u - p.l) <= 1e-12
        lower |= eq
        upper &= ~lower
        tol = max(self.tol_dual, 1e-10)
        for _ in range(rounds):
            z, y = self._kkt(p, lower, upper)
            Az = p.A @ z
            below = (Az < p.l - self.tol_prim) & ~lower & ~upper
            above = (Az > p.u + self.tol_prim) & ~lower & ~upper
            wrong_l = lower & ~eq & (y > tol)
            wrong_u = upper & (y < -tol)
            if not (below.any() or above.any() or wrong_l.any() or wrong_u.any()):
                y[lower & ~eq] = np.minimum(y[lower & ~eq], 0.0)
                y[upper] = np.maximum(y[upper], 0.0)
                prim, dual = p.residuals(z, y)
                if prim <= self.tol_prim and dual <= self.tol_dual:
                    return z, y
                return None
            lower = (lower | below) & ~wrong_l
            upper = (upper | above) & ~wrong_u
        return None

    @staticmethod
    def _kkt(p: QPProblem, lower, upper):
        idx = np.flatnonzero(lower | upper)
        n = p.n
        Aa = p.A[idx]
        k = idx.size
        K = np.zeros((n + k, n + k))
        K[:n, :n] = p.P
        K[:n, n:] = Aa.T
        K[n:, :n] = Aa
        rhs = np.concatenate([-p.q, np.where(lower, p.l, p.u)[idx]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        for _ in range(3):  # iterative refinement
            sol = sol + np.linalg.lstsq(K, rhs - K @ sol, rcond=None)[0]
        y = np.zeros(p.m)
        y[idx] = sol[n:]
        return sol[:n], y


def _active_set(s, y, l, u, rho):
    lower = (s - l < -y / rho) & np.isfinite(l)
    upper = (u - s < y / rho) & np.isfinite(u)
    eq = np.abs(u - l) <= 1e-12
    lower = lower | eq
    upper = upper & ~lower
    return lower, upper


def _primal_infeasible(A, l, u, dy, eps: float = 1e-6) -> bool:
    norm = np.max(np.abs(dy), initial=0.0)
    if norm <= 1e-12:
        return False
    d = dy / norm
    if np.max(np.abs(A.T @ d), initial=0.0) > eps:
        return False
    pos = np.maximum(d, 0.0)
    neg = np.minimum(d, 0.0)
    if np.any((pos > eps) & ~np.isfinite(u)) or np.any((neg < -eps) & ~np.isfinite(l)):
        return False
    val = np.sum(np.where(pos > 0, u, 0.0) * pos) + np.sum(np.where(neg < 0, l, 0.0) * neg)
    return bool(val < -eps)


def solve(p: QPProblem, tol_prim: float = 1e-8, tol_dual: float = 1e-8, max_iter: int = 50000,
          warm: QPSolution | None = None, **kw) -> QPSolution:
    return QPSolver(tol_prim=tol_prim, tol_dual=tol_dual, max_iter=max_iter, **kw).solve(p, warm)


def dump_triplets(p: QPProblem, path) -> None:
    """Plain-text dump: one section per matrix/vector, nonzeros as ``i j value``."""
    with open(path, "w") as fh:
        fh.write(f"# qp n={p.n} m={p.m}\n")
        for name, M in (("P", p.P), ("A", p.A)):
            rows, cols = np.nonzero(M)
            fh.write(f"{name} {M.shape[0]} {M.shape[1]} {rows.size}\n")
            for i, j in zip(rows, cols):
                fh.write(f"{i} {j} {float(M[i, j])!r}\n")
        for name, v in (("q", p.q), ("l", p.l), ("u", p.u)):
            fh.write(f"{name} {v.size}\n")
            fh.write(" ".join(repr(float(t)) for t in v) + "\n")


def load_triplets(path) -> QPProblem:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    it = iter(lines)
    data = {}
    for name in ("P", "A"):
        _, r, c, nnz = next(it).split()
        M = np.zeros((int(r), int(c)))
        for _ in range(int(nnz)):
            i, j, v = next(it).split()
            M[int(i), int(j)] = float(v)
        data[name] = M
    for name in ("q", "l", "u"):
        _, size = next(it).split()
        data[name] = np.array([float(t) for t in next(it).split()]) if int(size) else np.zeros(0)
    return QPProblem(data["P"], data["q"], data["A"], data["l"], data["u"])
