"""Sign-set algebra and empirical checkers for sign-constrained dynamics.

A sign constraint restricts the sign of every Jacobian entry of a map
``f(x, u)`` (and of ``f(0, 0)``) to a prescribed subset of ``{+1, -1, 0}``.
Linear systems are checked entry by entry; black-box maps are probed with
central finite differences at random points of a user-supplied box.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DISCRETE = "discrete"
CONTINUOUS = "continuous"

DEFAULT_SIGN_TOL = 1e-7
DEFAULT_FD_STEP = 1e-5


class SignError(ValueError):
    """Raised for malformed sign sets, patterns or dimension mismatches."""


@dataclass(frozen=True)
class SignSet:
    """Nonempty subset of ``{+1, -1, 0}``."""

    members: frozenset

    def __post_init__(self):
        members = frozenset(int(m) for m in self.members)
        if not members:
            raise SignError("sign set must be nonempty")
        if not members <= {1, -1, 0}:
            raise SignError(f"invalid sign set members {sorted(members)}")
        object.__setattr__(self, "members", members)

    def __contains__(self, s: int) -> bool:
        return s in self.members

    @classmethod
    def of(cls, *signs: int) -> "SignSet":
        return cls(frozenset(signs))

    @classmethod
    def parse(cls, text) -> "SignSet":
        """Parse ``"+"``, ``"-"``, ``"0"``, ``"+0"``, ``"-0"``, ``"+-0"`` or a list of ints."""
        if isinstance(text, SignSet):
            return text
        if isinstance(text, (list, tuple, set, frozenset)):
            return cls(frozenset(int(t) for t in text))
        mapping = {"+": 1, "-": -1, "0": 0}
        try:
            return cls(frozenset(mapping[ch] for ch in str(text).strip()))
        except KeyError as exc:
            raise SignError(f"cannot parse sign set {text!r}") from exc

    def to_str(self) -> str:
        return "".join(ch for ch, s in (("+", 1), ("-", -1), ("0", 0)) if s in self.members)

    @property
    def is_free(self) -> bool:
        return self.members == {1, -1, 0}

    def __repr__(self) -> str:
        return f"SignSet({self.to_str()!r})"


FREE = SignSet.of(1, -1, 0)
NONNEG = SignSet.of(1, 0)
NONPOS = SignSet.of(-1, 0)
ZERO = SignSet.of(0)
POS = SignSet.of(1)
NEG = SignSet.of(-1)


def _grid(rows: Iterable[Iterable], n_rows: int, n_cols: int, name: str) -> tuple:
    grid = tuple(tuple(SignSet.parse(s) for s in row) for row in rows)
    if len(grid) != n_rows or any(len(r) != n_cols for r in grid):
        raise SignError(f"{name} must be {n_rows}x{n_cols}")
    return grid


@dataclass(frozen=True)
class SignPattern:
    """Sign sets for state Jacobian, input Jacobian and the value at the origin.

    With ``time_kind == "continuous"`` the diagonal of ``s_state`` is ignored
    by every check (Kamke convention).
    """

    s_state: tuple
    s_input: tuple
    s_zero: tuple
    time_kind: str = DISCRETE

    def __post_init__(self):
        n_x = len(self.s_state)
        n_u = len(self.s_input[0]) if self.s_input else 0
        object.__setattr__(self, "s_state", _grid(self.s_state, n_x, n_x, "s_state"))
        object.__setattr__(self, "s_input", _grid(self.s_input, n_x, n_u, "s_input"))
        zero = tuple(SignSet.parse(s) for s in self.s_zero)
        if len(zero) != n_x:
            raise SignError("s_zero must have length n_x")
        object.__setattr__(self, "s_zero", zero)
        if self.time_kind not in (DISCRETE, CONTINUOUS):
            raise SignError(f"unknown time_kind {self.time_kind!r}")

    @property
    def n_x(self) -> int:
        return len(self.s_state)

    @property
    def n_u(self) -> int:
        return len(self.s_input[0]) if self.s_input else 0

    def state_exempt(self, i: int, j: int) -> bool:
        return self.time_kind == CONTINUOUS and i == j

    @property
    def state_unconstrained(self) -> bool:
        return all(
            s.is_free or self.state_exempt(i, j)
            for i, row in enumerate(self.s_state)
            for j, s in enumerate(row)
        )

    def as_continuous(self) -> "SignPattern":
        return SignPattern(self.s_state, self.s_input, self.s_zero, CONTINUOUS)

    def to_dict(self) -> dict:
        return {
            "s_state": [[s.to_str() for s in row] for row in self.s_state],
            "s_input": [[s.to_str() for s in row] for row in self.s_input],
            "s_zero": [s.to_str() for s in self.s_zero],
            "time_kind": self.time_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SignPattern":
        return cls(d["s_state"], d["s_input"], d["s_zero"], d.get("time_kind", DISCRETE))

    @classmethod
    def uniform(cls, n_x: int, n_u: int, state=FREE, inputs=FREE, zero=FREE,
                time_kind: str = DISCRETE) -> "SignPattern":
        return cls(
            [[state] * n_x for _ in range(n_x)],
            [[inputs] * n_u for _ in range(n_x)],
            [zero] * n_x,
            time_kind,
        )

    @classmethod
    def free(cls, n_x: int, n_u: int, time_kind: str = DISCRETE) -> "SignPattern":
        return cls.uniform(n_x, n_u, time_kind=time_kind)

    @classmethod
    def monotone(cls, n_x: int, n_u: int, positive: bool = False) -> "SignPattern":
        return cls.uniform(n_x, n_u, NONNEG, NONNEG, NONNEG if positive else FREE)


def two_tank_pattern() -> SignPattern:
    """Discrete-time pattern of the coupled two-tank plant (levels h1, h2; pump voltage)."""
    return SignPattern(
        [["+0", "0"], ["+0", "+0"]],
        [["+0"], ["0"]],
        ["0", "0"],
    )


def powertrain_pattern() -> SignPattern:
    """Pattern for state (engine driveshaft torque, speed, SoC), input (engine cmd, motor, brake)."""
    return SignPattern(
        [["+-0"] * 3 for _ in range(3)],
        [["+0", "0", "0"], ["+0", "+0", "-0"], ["0", "-0", "0"]],
        ["0", "0", "0"],
    )


@dataclass
class LinearSystem:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    time_kind: str = DISCRETE

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.A.shape[0] != self.A.shape[1] or self.c.shape[0] != self.A.shape[0]:
            raise SignError("inconsistent linear system dimensions")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all() and np.isfinite(self.c).all()):
            raise SignError("linear system entries must be finite")

    def __call__(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ self.A.T + u @ self.B.T + self.c


@dataclass
class Violation:
    role: str  # "state" | "input" | "zero"
    index: tuple
    observed: int
    allowed: SignSet
    witness: tuple | None = None
    value: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "index": list(self.index),
            "observed": self.observed,
            "allowed": self.allowed.to_str(),
            "witness": None if self.witness is None else [list(map(float, w)) for w in self.witness],
            "value": self.value,
        }


@dataclass
class ConstraintReport:
    violations: list = field(default_factory=list)
    seed: int | None = None
    n_samples: int = 0
    tolerances: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def roles(self) -> set:
        return {(v.role, v.index) for v in self.violations}

    def merge(self, other: "ConstraintReport") -> "ConstraintReport":
        return ConstraintReport(
            self.violations + other.violations,
            self.seed if self.seed is not None else other.seed,
            self.n_samples + other.n_samples,
            {**self.tolerances, **other.tolerances},
        )

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "violations": [v.to_dict() for v in self.violations],
            "seed": self.seed,
            "n_samples": self.n_samples,
            "tolerances": self.tolerances,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def __bool__(self) -> bool:
        return self.passed


def sign_of(value: float, tol: float = 0.0) -> int:
    if tol < 0:
        raise SignError("tol must be nonnegative")
    value = float(value)
    if not math.isfinite(value):
        raise SignError(f"non-finite value {value}")
    if abs(value) <= tol:
        return 0
    return 1 if value > 0 else -1


def _signs(values: np.ndarray, tol: float) -> np.ndarray:
    if not np.isfinite(values).all():
        raise SignError("non-finite value in sign evaluation")
    out = np.sign(values).astype(int)
    out[np.abs(values) <= tol] = 0
    return out


def check_linear(sys: LinearSystem, pattern: SignPattern, tol: float = 0.0) -> ConstraintReport:
    """Entrywise check of ``A``, ``B`` and ``c`` against the pattern."""
    n_x = sys.A.shape[0]
    if n_x != pattern.n_x or sys.B.shape[1] != pattern.n_u:
        raise SignError(
            f"system is {n_x}x{sys.B.shape[1]} but pattern is {pattern.n_x}x{pattern.n_u}"
        )
    viol = []
    for role, mat, sets in (("state", sys.A, pattern.s_state), ("input", sys.B, pattern.s_input)):
        sg = _signs(mat, tol)
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                if role == "state" and pattern.state_exempt(i, j):
                    continue
                if sg[i, j] not in sets[i][j]:
                    viol.append(Violation(role, (i, j), int(sg[i, j]), sets[i][j], value=float(mat[i, j])))
    sg = _signs(sys.c, tol)
    for i in range(n_x):
        if sg[i] not in pattern.s_zero[i]:
            viol.append(Violation("zero", (i,), int(sg[i]), pattern.s_zero[i], value=float(sys.c[i])))
    return ConstraintReport(viol, tolerances={"sign_tol": tol})


def _as_bounds(box, n: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise SignError(f"{name} box is empty")
    return lo, hi


def fd_jacobians(f: Callable, x: np.ndarray, u: np.ndarray, fd_step: float = DEFAULT_FD_STEP):
    """Central-difference Jacobians of ``f`` at one point, relative step ``fd_step*(1+|coord|)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f0 = np.asarray(f(x, u), dtype=float)
    jx = np.empty((f0.size, x.size))
    ju = np.empty((f0.size, u.size))
    for j in range(x.size):
        h = fd_step * (1.0 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        jx[:, j] = (np.asarray(f(x + e, u)) - np.asarray(f(x - e, u))) / (2 * h)
    for j in range(u.size):
        h = fd_step * (1.0 + abs(u[j]))
        e = np.zeros_like(u)
        e[j] = h
        ju[:, j] = (np.asarray(f(x, u + e)) - np.asarray(f(x, u - e))) / (2 * h)
    return jx, ju


def _batched_fd(f, X, U, fd_step):
    """Central differences over a batch. ``f`` must accept ``(B, n_x), (B, n_u)`` arrays."""
    n, n_x = X.shape
    n_u = U.shape[1]
    Jx = np.empty((n, n_x, n_x))
    Ju = np.empty((n, n_x, n_u))
    for j in range(n_x):
        h = fd_step * (1.0 + np.abs(X[:, j]))
        Xp, Xm = X.copy(), X.copy()
        Xp[:, j] += h
        Xm[:, j] -= h
        Jx[:, :, j] = (np.asarray(f(Xp, U)) - np.asarray(f(Xm, U))) / (2 * h)[:, None]
    for j in range(n_u):
        h = fd_step * (1.0 + np.abs(U[:, j]))
        Up, Um = U.copy(), U.copy()
        Up[:, j] += h
        Um[:, j] -= h
        Ju[:, :, j] = (np.asarray(f(X, Up)) - np.asarray(f(X, Um))) / (2 * h)[:, None]
    return Jx, Ju


def _batched(f: Callable, batched: bool) -> Callable:
    if batched:
        return f

    def fb(X, U):
        return np.stack([np.asarray(f(x, u), dtype=float) for x, u in zip(X, U)])

    return fb


def check_sampled(
    f: Callable,
    pattern: SignPattern,
    box: tuple,
    n_samples: int = 1000,
    fd_step: float = DEFAULT_FD_STEP,
    tol: float = DEFAULT_SIGN_TOL,
    seed: int = 0,
    batched: bool = False,
    max_violations: int = 50,
) -> ConstraintReport:
    """Probe Jacobian signs of ``f`` at uniform random points of ``box``.

    ``box`` is ``((x_lo, x_hi), (u_lo, u_hi))``. With ``batched=True`` the map
    is called on ``(B, n_x), (B, n_u)`` arrays. At most one violation is
    recorded per (role, index) entry, with the first offending sample as
    witness. This is a falsifier, not a certificate.
    """
    if n_samples < 1:
        raise SignError("n_samples must be >= 1")
    n_x, n_u = pattern.n_x, pattern.n_u
    x_lo, x_hi = _as_bounds(box[0], n_x, "state")
    u_lo, u_hi = _as_bounds(box[1], n_u, "input")
    rng = np.random.default_rng(seed)
    X = rng.uniform(x_lo, x_hi, size=(n_samples, n_x))
    U = rng.uniform(u_lo, u_hi, size=(n_samples, n_u))
    fb = _batched(f, batched)
    try:
        Jx, Ju = _batched_fd(fb, X, U, fd_step)
    except SignError:
        raise
    except Exception as exc:  # locate the failing point for the caller
        for x, u in zip(X, U):
            try:
                fb(x[None], u[None])
            except Exception:
                raise RuntimeError(f"evaluation failed at x={x.tolist()}, u={u.tolist()}") from exc
        raise
    viol = []
    seen = set()
    for role, J, sets in (("state", Jx, pattern.s_state), ("input", Ju, pattern.s_input)):
        S = _signs(J, tol)
        for i in range(n_x):
            for j in range(J.shape[2]):
                if role == "state" and pattern.state_exempt(i, j):
                    continue
                allowed = np.array([s in sets[i][j] for s in S[:, i, j]])
                bad = np.flatnonzero(~allowed)
                if bad.size and (role, (i, j)) not in seen and len(viol) < max_violations:
                    k = int(bad[0])
                    seen.add((role, (i, j)))
                    viol.append(Violation(role, (i, j), int(S[k, i, j]), sets[i][j],
                                          (X[k].copy(), U[k].copy()), float(J[k, i, j])))
    if np.all(x_lo <= 0) and np.all(x_hi >= 0) and np.all(u_lo <= 0) and np.all(u_hi >= 0):
        f0 = np.asarray(fb(np.zeros((1, n_x)), np.zeros((1, n_u))), dtype=float).reshape(-1)
        s0 = _signs(f0, tol)
        for i in range(n_x):
            if s0[i] not in pattern.s_zero[i]:
                viol.append(Violation("zero", (i,), int(s0[i]), pattern.s_zero[i],
                                      (np.zeros(n_x), np.zeros(n_u)), float(f0[i])))
    return ConstraintReport(viol, seed, n_samples, {"sign_tol": tol, "fd_step": fd_step})


def check_positivity_empirical(
    f: Callable,
    state_box: tuple,
    input_box: tuple,
    horizon: int = 200,
    n_rollouts: int = 100,
    tol: float = 1e-9,
    seed: int = 0,
    hold: int = 10,
    batched: bool = False,
) -> ConstraintReport:
    """Roll out random nonnegative trajectories and flag any state below ``-tol``.

    Inputs are piecewise constant, redrawn every ``hold`` steps. All rollouts
    advance together when ``batched``.
    """
    s_lo, s_hi = (np.asarray(b, dtype=float) for b in state_box)
    i_lo, i_hi = (np.asarray(b, dtype=float) for b in input_box)
    if np.any(s_lo < 0) or np.any(i_lo < 0):
        raise SignError("positivity boxes must lie in the nonnegative orthant")
    rng = np.random.default_rng(seed)
    n_x = s_lo.size
    fb = _batched(f, batched)
    X = rng.uniform(s_lo, s_hi, size=(n_rollouts, n_x))
    viol = []
    U = None
    for t in range(horizon):
        if t % hold == 0:
            U = rng.uniform(i_lo, i_hi, size=(n_rollouts, i_lo.size))
        Xn = np.asarray(fb(X, U), dtype=float)
        bad = np.argwhere(Xn < -tol)
        if bad.size:
            r, i = (int(v) for v in bad[0])
            # index is (state component, step at which it went negative)
            viol.append(Violation("zero", (i, t + 1), -1, NONNEG, (X[r].copy(), U[r].copy()),
                                  float(Xn[r, i])))
            break
        X = Xn
    return ConstraintReport(viol, seed, n_rollouts * horizon, {"neg_tol": tol})


def discrete_to_continuous(f_d: Callable, dt: float) -> Callable:
    """Vector field ``(f_d(x, u) - x) / dt``; batched if ``f_d`` is."""
    if dt <= 0:
        raise SignError("dt must be positive")

    def f_c(x, u):
        x = np.asarray(x, dtype=float)
        return (np.asarray(f_d(x, u), dtype=float) - x) / dt

    return f_c


def order_preserving_pairs(
    f: Callable,
    box: tuple,
    n_pairs: int = 100,
    seed: int = 0,
    tol: float = 1e-9,
    batched: bool = False,
) -> bool:
    """Check ``x <= x', u <= u'  =>  f(x, u) <= f(x', u')`` on random ordered pairs."""
    rng = np.random.default_rng(seed)
    x_lo, x_hi = (np.asarray(b, dtype=float) for b in box[0])
    u_lo, u_hi = (np.asarray(b, dtype=float) for b in box[1])
    X1 = rng.uniform(x_lo, x_hi, size=(n_pairs, x_lo.size))
    X2 = rng.uniform(X1, x_hi)
    U1 = rng.uniform(u_lo, u_hi, size=(n_pairs, u_lo.size))
    U2 = rng.uniform(U1, u_hi)
    fb = _batched(f, batched)
    return bool(np.all(np.asarray(fb(X1, U1)) <= np.asarray(fb(X2, U2)) + tol))

