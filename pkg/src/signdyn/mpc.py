"""Convex MPC for exactly-linearizable models.

In the coordinates ``xi = Phi(x)``, ``v = Psi(u; x)`` the model is linear,
so a tracking problem with box constraints becomes a QP over

    z = [xi(1..N), v(0..N-1), g_up(0..N-1), g_lo(0..N-1)]

where ``g_up`` / ``g_lo`` are slacks of the soft upper / lower state bounds
(only for components that have one). Monotone transforms map boxes to
boxes: ``lo <= x <= hi  <=>  Phi(lo) <= xi <= Phi(hi)``.

Time indexing: state-indexed arrays have ``N + 1`` rows (t = 0..N),
input-indexed arrays ``N`` rows (t = 0..N-1). Stage costs run over
t = 0..N-1 (no terminal cost); hard state bounds apply to x(1..N).
When Psi depends on x, input bounds are imposed at t = 0 only (using the
measured state) unless ``psi_bound_fallback`` asks for the x0-frozen image
at later stages as well.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .el_model import ConfigError, ELModel
from .qp import QPProblem, QPSolution, QPSolver
from .transforms import TransformOverflow

log = logging.getLogger(__name__)


def _rows(a, n_rows: int, n_cols: int, fill: float) -> np.ndarray:
    if a is None:
        return np.full((n_rows, n_cols), fill)
    a = np.asarray(a, dtype=float)
    if a.ndim <= 1:
        a = np.broadcast_to(a.reshape(1, -1) if a.ndim else a, (n_rows, n_cols))
    if a.shape != (n_rows, n_cols):
        raise ConfigError(f"expected shape {(n_rows, n_cols)}, got {a.shape}")
    return np.array(a, dtype=float)


def _vec(a, n: int, fill: float) -> np.ndarray:
    if a is None:
        return np.full(n, fill)
    return np.array(np.broadcast_to(np.asarray(a, dtype=float), (n,)))


@dataclass
class MpcSpec:
    horizon: int
    n_x: int
    n_u: int
    w_req: np.ndarray | float = 1.0
    w_u: np.ndarray | float = 1e-3
    w_soft: np.ndarray | float = 0.0
    x_req: np.ndarray | None = None
    x_soft_hi: np.ndarray | None = None
    x_soft_lo: np.ndarray | None = None
    x_lo: np.ndarray | None = None
    x_hi: np.ndarray | None = None
    u_lo: np.ndarray | None = None
    u_hi: np.ndarray | None = None
    x_nonneg: np.ndarray | bool = False
    u_nonneg: np.ndarray | bool = False
    psi_bound_fallback: bool = False

    def __post_init__(self):
        N, n_x, n_u = self.horizon, self.n_x, self.n_u
        if N < 1:
            raise ConfigError("horizon must be >= 1")
        self.w_req = _vec(self.w_req, n_x, 0.0)
        self.w_u = _vec(self.w_u, n_u, 0.0)
        self.w_soft = _vec(self.w_soft, n_x, 0.0)
        if min(self.w_req.min(), self.w_u.min(), self.w_soft.min()) < 0:
            raise ConfigError("weights must be nonnegative")
        self.x_req = _rows(self.x_req, N + 1, n_x, 0.0)
        self.x_soft_hi = _rows(self.x_soft_hi, N + 1, n_x, np.inf)
        self.x_soft_lo = _rows(self.x_soft_lo, N + 1, n_x, -np.inf)
        self.x_lo = _rows(self.x_lo, N + 1, n_x, -np.inf)
        self.x_hi = _rows(self.x_hi, N + 1, n_x, np.inf)
        self.u_lo = _rows(self.u_lo, N, n_u, -np.inf)
        self.u_hi = _rows(self.u_hi, N, n_u, np.inf)
        self.x_nonneg = np.broadcast_to(np.asarray(self.x_nonneg, dtype=bool), (n_x,)).copy()
        self.u_nonneg = np.broadcast_to(np.asarray(self.u_nonneg, dtype=bool), (n_u,)).copy()
        if np.any(self.x_lo > self.x_hi) or np.any(self.u_lo > self.u_hi):
            raise ConfigError("inconsistent bounds (lower > upper)")

    @property
    def soft_hi_components(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.x_soft_hi).any(axis=0) & (self.w_soft > 0))

    @property
    def soft_lo_components(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.x_soft_lo).any(axis=0) & (self.w_soft > 0))

    def with_reference(self, ref: np.ndarray, k: int) -> "MpcSpec":
        """Copy whose ``x_req`` is ``ref[k : k+N+1]`` (last row repeated past the end)."""
        idx = np.minimum(np.arange(k, k + self.horizon + 1), len(ref) - 1)
        return replace(self, x_req=np.asarray(ref, dtype=float)[idx])

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = np.where(np.isfinite(v), v, np.sign(v) * 1e300).tolist() if v.dtype != bool else v.tolist()
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MpcSpec":
        kw = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = np.asarray(v, dtype=float if k not in ("x_nonneg", "u_nonneg") else bool)
                if v.dtype == float:
                    v = np.where(v >= 1e300, np.inf, np.where(v <= -1e300, -np.inf, v))
            kw[k] = v
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "MpcSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _map_bounds(fn, vals: np.ndarray) -> np.ndarray:
    """Apply a componentwise increasing map to a bound row, keeping +-inf (and overflow) infinite."""
    vals = np.asarray(vals, dtype=float)
    fin = np.isfinite(vals)
    out = np.where(fin, 0.0, vals)
    if not fin.any():
        return out
    try:
        mapped = fn(np.where(fin, vals, 0.0))
        return np.where(fin, mapped, vals)
    except TransformOverflow:
        for i in np.flatnonzero(fin):
            probe = np.zeros_like(vals)
            probe[i] = vals[i]
            try:
                out[i] = fn(probe)[i]
            except TransformOverflow:
                out[i] = np.inf if vals[i] > 0 else -np.inf
        return out


@dataclass
class TransformedQP:
    qp: QPProblem
    model: ELModel
    spec: MpcSpec
    x0: np.ndarray
    xi0: np.ndarray
    xi_req: np.ndarray
    n_soft_hi: int
    n_soft_lo: int
    const_cost: float
    row_kinds: list = field(default_factory=list)

    @property
    def n_xi(self) -> int:
        return self.spec.horizon * self.spec.n_x

    @property
    def n_v(self) -> int:
        return self.spec.horizon * self.spec.n_u

    def split(self, z):
        N, n_x, n_u = self.spec.horizon, self.spec.n_x, self.spec.n_u
        xi = z[: self.n_xi].reshape(N, n_x)
        v = z[self.n_xi: self.n_xi + self.n_v].reshape(N, n_u)
        rest = z[self.n_xi + self.n_v:]
        g_up = rest[: N * self.n_soft_hi].reshape(N, self.n_soft_hi)
        g_lo = rest[N * self.n_soft_hi:].reshape(N, self.n_soft_lo)
        return xi, v, g_up, g_lo

    def decode(self, z):
        """Predicted states x(0..N) and inputs u(0..N-1) in original coordinates."""
        xi, v, _, _ = self.split(np.asarray(z, dtype=float))
        m = self.model
        X = np.vstack([self.x0, m.phi.inverse(xi)])
        U = np.vstack([m.psi.inverse(v[t], X[t]) for t in range(self.spec.horizon)])
        return X, U

    def xi_cost(self, z) -> float:
        return float(self.qp.objective(np.asarray(z, dtype=float)) + self.const_cost)

    def x_cost(self, X, U) -> float:
        s = self.spec
        N = s.horizon
        track = np.sum(s.w_req * (X[:N] - s.x_req[:N]) ** 2)
        effort = np.sum(s.w_u * U ** 2)
        hi = np.where(np.isfinite(s.x_soft_hi[:N]), np.maximum(X[:N] - s.x_soft_hi[:N], 0.0), 0.0)
        lo = np.where(np.isfinite(s.x_soft_lo[:N]), np.maximum(s.x_soft_lo[:N] - X[:N], 0.0), 0.0)
        return float(track + effort + np.sum(s.w_soft * (hi ** 2 + lo ** 2)))


def build_qp(m: ELModel, spec: MpcSpec, x0) -> TransformedQP:
    rep = m.verify_structural()
    if not rep.passed:
        raise ConfigError(f"model fails structural checks: {rep.to_json()}")
    if not (spec.w_req.any() or spec.w_u.any() or spec.w_soft.any()):
        raise ConfigError("all MPC weights are zero; the problem has no meaningful optimum")
    if spec.n_x != m.n_x or spec.n_u != m.n_u:
        raise ConfigError("MPC spec dimensions do not match the model")
    N, n_x, n_u = spec.horizon, m.n_x, m.n_u
    x0 = np.asarray(x0, dtype=float).reshape(n_x)
    lin = m.core.effective()
    xi0 = m.phi.forward(x0)
    tracked = spec.w_req > 0
    xi_req = np.vstack([np.where(tracked, _map_bounds(m.phi.forward, np.where(tracked, r, 0.0)), 0.0)
                        for r in spec.x_req])
    shi, slo = spec.soft_hi_components, spec.soft_lo_components
    n_sh, n_sl = shi.size, slo.size
    n_xi, n_v = N * n_x, N * n_u
    n = n_xi + n_v + N * (n_sh + n_sl)

    def xi_idx(t):  # t = 1..N
        return np.arange((t - 1) * n_x, t * n_x)

    def v_idx(t):  # t = 0..N-1
        return n_xi + np.arange(t * n_u, (t + 1) * n_u)

    def gh_idx(t):
        return n_xi + n_v + np.arange(t * n_sh, (t + 1) * n_sh)

    def gl_idx(t):
        return n_xi + n_v + N * n_sh + np.arange(t * n_sl, (t + 1) * n_sl)

    # objective 1/2 z'Pz + q'z with stage costs t = 0..N-1
    pdiag = np.zeros(n)
    q = np.zeros(n)
    const = float(np.sum(spec.w_req * (xi0 - xi_req[0]) ** 2))
    for t in range(1, N):
        pdiag[xi_idx(t)] = 2.0 * spec.w_req
        q[xi_idx(t)] = -2.0 * spec.w_req * xi_req[t]
        const += float(np.sum(spec.w_req * xi_req[t] ** 2))
    for t in range(N):
        pdiag[v_idx(t)] = 2.0 * spec.w_u
        pdiag[gh_idx(t)] = 2.0 * spec.w_soft[shi]
        pdiag[gl_idx(t)] = 2.0 * spec.w_soft[slo]
    P = np.diag(pdiag)

    rows, lo, hi, kinds = [], [], [], []

    def add(row, l, u, kind):
        rows.append(row)
        lo.append(l)
        hi.append(u)
        kinds.append(kind)

    # dynamics xi(t+1) = A xi(t) + B v(t) + c
    for t in range(N):
        blk = np.zeros((n_x, n))
        blk[:, xi_idx(t + 1)] = np.eye(n_x)
        blk[:, v_idx(t)] = -lin.B
        rhs = lin.c.copy()
        if t == 0:
            rhs = rhs + lin.A @ xi0
        else:
            blk[:, xi_idx(t)] = -lin.A
        for i in range(n_x):
            add(blk[i], rhs[i], rhs[i], ("dyn", t, i))

    # hard state bounds on xi(1..N)
    x_floor = np.where(spec.x_nonneg, 0.0, -np.inf)
    for t in range(1, N + 1):
        l_t = np.maximum(_map_bounds(m.phi.forward, spec.x_lo[t]), x_floor)
        u_t = _map_bounds(m.phi.forward, spec.x_hi[t])
        for i in np.flatnonzero(np.isfinite(l_t) | np.isfinite(u_t)):
            row = np.zeros(n)
            row[xi_idx(t)[i]] = 1.0
            add(row, l_t[i], u_t[i], ("xbound", t, i))

    # input bounds on v(t)
    u_floor = np.where(spec.u_nonneg, 0.0, -np.inf)
    for t in range(N):
        if m.conditioned and t > 0 and not spec.psi_bound_fallback:
            l_t, u_t = u_floor, np.full(n_u, np.inf)
        else:
            fwd = (lambda u: m.psi.forward(u, x0)) if m.conditioned else m.psi.forward
            l_t = np.maximum(_map_bounds(fwd, spec.u_lo[t]), u_floor)
            u_t = _map_bounds(fwd, spec.u_hi[t])
        for i in np.flatnonzero(np.isfinite(l_t) | np.isfinite(u_t)):
            row = np.zeros(n)
            row[v_idx(t)[i]] = 1.0
            add(row, l_t[i], u_t[i], ("ubound", t, i))

    # soft bounds: g >= 0 and xi - Phi(soft_hi) <= g_up,  Phi(soft_lo) - xi <= g_lo
    for t in range(N):
        s_hi = _map_bounds(m.phi.forward, spec.x_soft_hi[t])
        s_lo = _map_bounds(m.phi.forward, spec.x_soft_lo[t])
        for k, i in enumerate(shi):
            row = np.zeros(n)
            row[gh_idx(t)[k]] = 1.0
            if t == 0:
                add(row, max(0.0, xi0[i] - s_hi[i]), np.inf, ("soft_hi", t, i))
                continue
            add(row.copy(), 0.0, np.inf, ("slack_nonneg", t, i))
            row[xi_idx(t)[i]] = -1.0
            add(row, -s_hi[i], np.inf, ("soft_hi", t, i))
        for k, i in enumerate(slo):
            row = np.zeros(n)
            row[gl_idx(t)[k]] = 1.0
            if t == 0:
                add(row, max(0.0, s_lo[i] - xi0[i]), np.inf, ("soft_lo", t, i))
                continue
            add(row.copy(), 0.0, np.inf, ("slack_nonneg", t, i))
            row[xi_idx(t)[i]] = 1.0
            add(row, s_lo[i], np.inf, ("soft_lo", t, i))

    A = np.array(rows) if rows else np.zeros((0, n))
    qp = QPProblem(P, q, A, np.array(lo, dtype=float), np.array(hi, dtype=float))
    return TransformedQP(qp, m, spec, x0, xi0, xi_req, n_sh, n_sl, const, kinds)


@dataclass
class StepDiagnostics:
    status: str
    residuals: tuple
    iterations: int
    predicted_x: np.ndarray
    predicted_u: np.ndarray
    cost_xi: float
    cost_x: float
    clipped: float
    solution: QPSolution

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def _clip_to_bounds(u0, spec: MpcSpec, tol: float):
    lo = np.maximum(spec.u_lo[0], np.where(spec.u_nonneg, 0.0, -np.inf))
    hi = spec.u_hi[0]
    clipped = np.clip(u0, lo, hi)
    delta = float(np.max(np.abs(clipped - u0), initial=0.0))
    return (clipped if delta <= tol else u0), delta


def control_step(m: ELModel, spec: MpcSpec, x, warm: QPSolution | None = None,
                 solver: QPSolver | None = None, clip_tol: float = 1e-6):
    """Solve the horizon problem from state ``x``; return ``(u0, diagnostics)``.

    ``u0`` is recovered with the closed-form inverse of Psi. Bound excursions
    below ``clip_tol`` (solver round-off) are projected back into the box.
    """
    tq = build_qp(m, spec, x)
    solver = solver or QPSolver()
    sol = solver.solve(tq.qp, warm)
    X, U = tq.decode(sol.z)
    u0, delta = _clip_to_bounds(U[0], spec, clip_tol)
    diag = StepDiagnostics(sol.status, sol.residuals, sol.iterations, X, U,
                           tq.xi_cost(sol.z), tq.x_cost(X, U), delta, sol)
    if not sol.solved:
        log.warning("MPC solve ended with status %s", sol.status)
    return u0, diag


class MpcController:
    """Receding-horizon controller; keeps one solver workspace and warm-starts it.

    ``spec`` is an :class:`MpcSpec` (optionally with a ``reference`` array that
    is windowed at each step) or a callable ``k -> MpcSpec``.
    """

    def __init__(self, model: ELModel, spec, reference=None, solver: QPSolver | None = None):
        self.model = model
        self.spec = spec
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self.solver = solver or QPSolver()
        self.warm = None

    def spec_at(self, k: int) -> MpcSpec:
        if callable(self.spec):
            return self.spec(k)
        if self.reference is not None:
            return self.spec.with_reference(self.reference, k)
        return self.spec

    def __call__(self, x, k: int = 0):
        u0, diag = control_step(self.model, self.spec_at(k), x, self.warm, self.solver)
        self.warm = diag.solution
        return u0, diag

    def reset(self) -> None:
        self.warm = None


@dataclass
class ClosedLoopLog:
    states: np.ndarray
    inputs: np.ndarray
    status: list
    primal_res: list
    dual_res: list
    iterations: list
    diagnostics: list = field(default_factory=list, repr=False)
    error: str | None = None

    @property
    def steps(self) -> int:
        return len(self.inputs)

    def to_csv(self, path=None) -> str | None:
        n_x = self.states.shape[1]
        n_u = self.inputs.shape[1] if self.inputs.ndim == 2 and self.inputs.size else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step"] + [f"x_{i + 1}" for i in range(n_x)] + [f"u_{j + 1}" for j in range(n_u)]
                   + ["solver_status", "primal_res", "dual_res", "solve_iterations"])
        for k in range(self.steps):
            w.writerow([k] + [repr(float(v)) for v in self.states[k]]
                       + [repr(float(v)) for v in self.inputs[k]]
                       + [self.status[k], repr(float(self.primal_res[k])),
                          repr(float(self.dual_res[k])), self.iterations[k]])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", newline="") as fh:
            fh.write(text)
        return None


def closed_loop(plant: Callable, controller: Callable, x_init, steps: int) -> ClosedLoopLog:
    """Alternate ``controller(x, k) -> (u, diag)`` and ``plant(x, u) -> x+``.

    Any exception ends the run early; the partial log carries the message.
    """
    x = np.asarray(x_init, dtype=float).copy()
    xs, us, st, pr, dr, it, diags = [x.copy()], [], [], [], [], [], []
    error = None
    for k in range(steps):
        try:
            u, diag = controller(x, k)
            x = np.asarray(plant(x, u), dtype=float)
        except Exception as exc:  # plant or solver failure ends the run
            error = f"step {k}: {type(exc).__name__}: {exc}"
            log.error("closed loop stopped at %s", error)
            break
        us.append(np.asarray(u, dtype=float).copy())
        xs.append(x.copy())
        st.append(diag.status)
        pr.append(diag.residuals[0])
        dr.append(diag.residuals[1])
        it.append(diag.iterations)
        diags.append(diag)
    n_u = len(us[0]) if us else 0
    return ClosedLoopLog(np.array(xs), np.array(us).reshape(len(us), n_u), st, pr, dr, it, diags,
                         error)


def lipschitz_probe(policy: Callable, x, radius: float, n: int = 100, seed: int = 0,
                    scale=None) -> float:
    """Largest ``|k(x+d) - k(x)| / |d|`` over ``n`` random directions with ``|d| = radius``."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    scale = np.ones_like(x) if scale is None else np.asarray(scale, dtype=float)
    k0 = np.asarray(policy(x), dtype=float)
    best = 0.0
    for _ in range(n):
        d = rng.normal(size=x.shape) * scale
        d *= radius / np.linalg.norm(d)
        best = max(best, float(np.linalg.norm(np.asarray(policy(x + d)) - k0) / radius))
    return best


# --------------------------------------------------------------------------
# hybrid powertrain problem

@dataclass
class PowertrainMpcConfig:
    """Objective weights and constraint data of the powertrain speed-tracking problem.

    Speed-dependent quantities are evaluated at the requested speed. The
    regenerable-SoC table is a placeholder (kinetic energy recoverable by the
    surrogate's motor), not calibrated data.
    """

    horizon: int = 10
    w_speed: float = 1.0
    w_eng: float = 1e-4
    w_mot: float = 1e-4
    w_brk: float = 1e-4
    w_soc: float = 1e3
    soc_ref: float = 0.6
    soc_lo: float = 0.3
    soc_hi: float = 0.9
    tau_mot_lo: float = -198.0
    tau_mot_hi: float = 196.0
    p_mot_lo: float = -2.0e3   # [W], regeneration power limit (per m/s * N m scale)
    p_mot_hi: float = 2.0e3
    tau_eng_cmd_hi: float = 198.0
    tau_brk_hi: float = 442.0
    tau_eng_table: tuple = ((0.0, 10.0, 20.0, 40.0), (198.0, 190.0, 170.0, 150.0))
    s_reg_table: tuple = ((0.0, 10.0, 20.0, 30.0, 40.0), (0.0, 0.0135, 0.054, 0.1215, 0.216))

    def tau_eng_max(self, v):
        return np.interp(v, *self.tau_eng_table)

    def s_reg(self, v):
        return np.interp(v, *self.s_reg_table)

    def spec(self, v_req_window) -> MpcSpec:
        """MpcSpec for requested speeds ``v_req(t)``, t = 0..N (length N + 1)."""
        N = self.horizon
        v = np.asarray(v_req_window, dtype=float)
        if v.shape != (N + 1,):
            raise ConfigError(f"need {N + 1} requested speeds, got {v.shape}")
        x_req = np.zeros((N + 1, 3))
        x_req[:, 1] = v
        x_hi = np.full((N + 1, 3), np.inf)
        x_hi[:, 0] = self.tau_eng_max(v)
        x_hi[:, 2] = self.soc_hi
        x_lo = np.full((N + 1, 3), -np.inf)
        x_lo[:, 2] = self.soc_lo
        soft_lo = np.full((N + 1, 3), -np.inf)
        soft_lo[:, 2] = self.soc_ref - self.s_reg(v)
        vs = np.maximum(v[:N], 1e-3)
        u_lo = np.tile([0.0, 0.0, 0.0], (N, 1))
        u_hi = np.tile([self.tau_eng_cmd_hi, 0.0, self.tau_brk_hi], (N, 1))
        u_lo[:, 1] = np.maximum(self.tau_mot_lo, self.p_mot_lo / vs)
        u_hi[:, 1] = np.minimum(self.tau_mot_hi, self.p_mot_hi / vs)
        return MpcSpec(
            N, 3, 3,
            w_req=[0.0, self.w_speed, 0.0],
            w_u=[self.w_eng, self.w_mot, self.w_brk],
            w_soft=[0.0, 0.0, self.w_soc],
            x_req=x_req, x_soft_lo=soft_lo, x_lo=x_lo, x_hi=x_hi,
            u_lo=u_lo, u_hi=u_hi,
            x_nonneg=True, u_nonneg=[True, False, True],
        )

    def spec_fn(self, v_req_profile) -> Callable[[int], MpcSpec]:
        prof = np.asarray(v_req_profile, dtype=float)

        def at(k: int) -> MpcSpec:
            idx = np.minimum(np.arange(k, k + self.horizon + 1), len(prof) - 1)
            return self.spec(prof[idx])

        return at
