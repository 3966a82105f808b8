"""Discrete exactly-linearizable model with a sign-reparameterized linear core.

    x+ = Phi^{-1}( A Phi(x) + B Psi(u; x) + c )

Phi and Psi are sinh-layer stacks (see :mod:`signdyn.transforms`); the
entries of A, B and c are obtained from free raw parameters so that every
entry sign lies in its sign set for any raw value.
"""
from __future__ import annotations

import json

import numpy as np

from .signs import (
    ConstraintReport,
    LinearSystem,
    SignPattern,
    SignSet,
    Violation,
    check_linear,
)
from .transforms import ConditionedTransform, MonotoneTransform, transform_from_dict

SCHEMA = "signdyn.model/1"
DEFAULT_CORE_EPS = 1e-3


class ConfigError(ValueError):
    """Model or experiment configuration is inconsistent."""


def _entry_modes(sets, eps: float):
    """Per-entry (relu mask, linear mask, sign multiplier, constant offset, two-sided mask)."""
    shape = (len(sets), len(sets[0]) if sets and isinstance(sets[0], tuple) else 0)
    flat = [s for row in sets for s in row] if shape[1] else list(sets)
    relu = np.zeros(len(flat), bool)
    lin = np.zeros(len(flat), bool)
    two = np.zeros(len(flat), bool)
    mult = np.zeros(len(flat))
    off = np.zeros(len(flat))
    for k, s in enumerate(flat):
        m = s.members
        if m == {1, -1, 0}:
            lin[k], mult[k] = True, 1.0
        elif m == {1, -1}:
            lin[k], two[k], mult[k] = True, True, 1.0
        elif m == {0}:
            pass
        elif m in ({1}, {-1}):
            relu[k], mult[k] = True, float(next(iter(m)))
            off[k] = mult[k] * eps
        else:  # {1, 0} or {-1, 0}
            relu[k], mult[k] = True, float(max(m, key=abs))
    out_shape = shape if shape[1] else (len(flat),)
    return tuple(a.reshape(out_shape) for a in (relu, lin, mult, off, two))


class SignedLinearCore:
    """Raw parameters of (A, B, c) plus the pattern that shapes them.

    Entry rules: singleton {s} (s != 0) -> s*(ReLU(raw)+eps); {0} -> 0;
    {1,0} -> ReLU(raw); {-1,0} -> -ReLU(raw); {1,-1,0} -> raw;
    {1,-1} -> raw +/- eps (away from zero on the side of raw).
    """

    def __init__(self, A_raw, B_raw, c_raw, pattern: SignPattern, eps: float = DEFAULT_CORE_EPS):
        self.A_raw = np.array(A_raw, dtype=float).reshape(pattern.n_x, pattern.n_x)
        self.B_raw = np.array(B_raw, dtype=float).reshape(pattern.n_x, pattern.n_u)
        self.c_raw = np.array(c_raw, dtype=float).reshape(pattern.n_x)
        if eps <= 0:
            raise ConfigError("core eps must be positive")
        self.pattern = pattern
        self.eps = float(eps)
        self._modes = {
            "A": _entry_modes(pattern.s_state, eps),
            "B": _entry_modes(pattern.s_input, eps),
            "c": _entry_modes(pattern.s_zero, eps),
        }

    @classmethod
    def init(cls, pattern: SignPattern, rng=None, eps: float = DEFAULT_CORE_EPS,
             identity_diag: bool = True) -> "SignedLinearCore":
        """Raws ~ U(-0.1, 0.1); ReLU-shaped entries shifted to U(eps, 0.1+eps) so none start dead.

        With ``identity_diag`` the diagonal of A starts near 1 where the sign set admits it.
        """
        rng = np.random.default_rng(rng)
        raws = []
        for key, shape in (("A", (pattern.n_x, pattern.n_x)), ("B", (pattern.n_x, pattern.n_u)),
                           ("c", (pattern.n_x,))):
            relu = cls._static_modes(pattern, key, eps)[0]
            r = rng.uniform(-0.1, 0.1, size=shape)
            r = np.where(relu, np.abs(r) + eps, r)
            raws.append(r)
        core = cls(*raws, pattern, eps)
        if identity_diag:
            for i in range(pattern.n_x):
                if 1 in pattern.s_state[i][i]:
                    relu, lin, mult, off, _ = core._modes["A"]
                    core.A_raw[i, i] = 1.0 - (off[i, i] if relu[i, i] else 0.0)
        return core

    @staticmethod
    def _static_modes(pattern, key, eps):
        sets = {"A": pattern.s_state, "B": pattern.s_input, "c": pattern.s_zero}[key]
        return _entry_modes(sets, eps)

    def _apply(self, key: str, raw: np.ndarray) -> np.ndarray:
        relu, lin, mult, off, two = self._modes[key]
        out = np.where(relu, mult * np.maximum(raw, 0.0), 0.0)
        out = np.where(lin, raw, out)
        out = out + off + np.where(two, np.where(raw >= 0, self.eps, -self.eps), 0.0)
        return out

    def _dapply(self, key: str, raw: np.ndarray) -> np.ndarray:
        relu, lin, mult, _, _ = self._modes[key]
        return np.where(relu, mult * (raw > 0), np.where(lin, 1.0, 0.0))

    def effective(self) -> LinearSystem:
        return LinearSystem(self._apply("A", self.A_raw), self._apply("B", self.B_raw),
                            self._apply("c", self.c_raw))

    def raw_grads(self, gA, gB, gc, prefix: str = "core.") -> dict:
        return {
            f"{prefix}A_raw": gA * self._dapply("A", self.A_raw),
            f"{prefix}B_raw": gB * self._dapply("B", self.B_raw),
            f"{prefix}c_raw": gc * self._dapply("c", self.c_raw),
        }

    def params(self, prefix: str = "core.") -> dict:
        return {f"{prefix}A_raw": self.A_raw, f"{prefix}B_raw": self.B_raw, f"{prefix}c_raw": self.c_raw}

    @property
    def n_params(self) -> int:
        return self.A_raw.size + self.B_raw.size + self.c_raw.size

    def to_dict(self) -> dict:
        return {"A_raw": self.A_raw.tolist(), "B_raw": self.B_raw.tolist(),
                "c_raw": self.c_raw.tolist(), "eps": self.eps, "pattern": self.pattern.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SignedLinearCore":
        return cls(d["A_raw"], d["B_raw"], d["c_raw"], SignPattern.from_dict(d["pattern"]), d["eps"])


def effective_core(core: SignedLinearCore) -> LinearSystem:
    return core.effective()


class ELModel:
    """Exactly-linearizable model ``x+ = Phi^{-1}(A Phi(x) + B Psi(u;x) + c)``.

    ``loss_scale`` divides the residual componentwise inside the training
    loss (ones gives the plain mean squared one-step error).
    """

    family = "el"

    def __init__(self, phi: MonotoneTransform, psi, core: SignedLinearCore, loss_scale=None):
        if phi.n != core.pattern.n_x or psi.n != core.pattern.n_u:
            raise ConfigError("transform dimensions do not match the core pattern")
        if getattr(psi, "conditioned", False) and not core.pattern.state_unconstrained:
            raise ConfigError(
                "a state-dependent input transform requires unconstrained state sign sets"
            )
        self.phi = phi
        self.psi = psi
        self.core = core
        self.loss_scale = np.ones(phi.n) if loss_scale is None else np.asarray(loss_scale, float)

    # construction ------------------------------------------------------
    @classmethod
    def create(cls, pattern: SignPattern, n_phi_layers: int = 2, n_psi_layers: int = 2,
               conditioned: bool = False, hidden: int = 3, rng=None, layer_eps: float = 1e-2,
               core_eps: float = DEFAULT_CORE_EPS, x_scale=None, u_scale=None,
               random_layers: bool = False) -> "ELModel":
        rng = np.random.default_rng(rng)
        n_x, n_u = pattern.n_x, pattern.n_u
        if random_layers:
            phi = MonotoneTransform.random(n_x, n_phi_layers, rng, layer_eps, x_scale)
        else:
            phi = MonotoneTransform.identity_like(n_x, n_phi_layers, layer_eps, x_scale)
        if conditioned:
            psi = ConditionedTransform.create(n_u, n_x, n_psi_layers, hidden, 3, rng, layer_eps,
                                              scale=u_scale, cond_scale=x_scale,
                                              out_scale=0.5 if random_layers else 0.01)
        elif random_layers:
            psi = MonotoneTransform.random(n_u, n_psi_layers, rng, layer_eps, u_scale)
        else:
            psi = MonotoneTransform.identity_like(n_u, n_psi_layers, layer_eps, u_scale)
        core = SignedLinearCore.init(pattern, rng, core_eps, identity_diag=not random_layers)
        if random_layers:
            for key in ("A_raw", "B_raw", "c_raw"):
                arr = getattr(core, key)
                arr[...] = rng.normal(0.0, 0.7, arr.shape)
        return cls(phi, psi, core, x_scale)

    @classmethod
    def linear(cls, pattern: SignPattern, rng=None, core_eps: float = DEFAULT_CORE_EPS,
               x_scale=None, u_scale=None) -> "ELModel":
        """Linear model: both transforms are fixed diagonal scalings."""
        return cls(MonotoneTransform.identity(pattern.n_x, x_scale),
                   MonotoneTransform.identity(pattern.n_u, u_scale),
                   SignedLinearCore.init(pattern, rng, core_eps), x_scale)

    @property
    def n_x(self) -> int:
        return self.phi.n

    @property
    def n_u(self) -> int:
        return self.psi.n

    @property
    def pattern(self) -> SignPattern:
        return self.core.pattern

    @property
    def conditioned(self) -> bool:
        return bool(getattr(self.psi, "conditioned", False))

    def params(self) -> dict:
        out = {}
        out.update(self.phi.params("phi."))
        out.update(self.psi.params("psi."))
        out.update(self.core.params("core."))
        return out

    @property
    def n_params(self) -> int:
        return self.phi.n_params + self.psi.n_params + self.core.n_params

    # evaluation ----------------------------------------------------------
    def transformed_input(self, u, x):
        return self.psi.forward(u, x)

    def predict(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lin = self.core.effective()
        xi = self.phi.forward(x)
        v = self.psi.forward(u, x)
        return self.phi.inverse(xi @ lin.A.T + v @ lin.B.T + lin.c)

    __call__ = predict

    def jacobians(self, x, u):
        """Analytic (d x+/d x, d x+/d u) at one point."""
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        lin = self.core.effective()
        nxt = self.predict(x, u)
        d_phi = self.phi.diag_jacobian(x)
        d_inv = 1.0 / self.phi.diag_jacobian(nxt)
        d_psi = self.psi.diag_jacobian(u, x)
        jx = lin.A * d_phi[None, :]
        if self.conditioned:
            jx = jx + lin.B @ self.psi.x_jacobian(u, x)
        return d_inv[:, None] * jx, d_inv[:, None] * lin.B * d_psi[None, :]

    # training support ----------------------------------------------------
    def loss(self, X, U, Xn) -> float:
        r = (self.predict(X, U) - Xn) / self.loss_scale
        return float(np.sum(r * r) / len(X))

    def loss_and_grad(self, X, U, Xn):
        """Mean squared one-step error and exact gradients w.r.t. every raw parameter."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        n = X.shape[0]
        lin = self.core.effective()
        xi, phi_cache = self.phi.forward_cache(X)
        v, psi_cache = self.psi.forward_cache(U, X)
        eta = xi @ lin.A.T + v @ lin.B.T + lin.c
        pred, inv_cache = self.phi.inverse_cache(eta)
        r = (pred - Xn) / self.loss_scale
        loss = float(np.sum(r * r) / n)
        g_pred = 2.0 * r / self.loss_scale / n

        g_eta, grads = self.phi.inverse_backward(inv_cache, g_pred, "phi.")
        g_xi = g_eta @ lin.A
        g_v = g_eta @ lin.B
        _, _, g_phi = self.phi.backward(phi_cache, g_xi, "phi.")
        for k, g in g_phi.items():
            grads[k] = grads[k] + g
        _, _, g_psi = self.psi.backward(psi_cache, g_v, "psi.")
        grads.update(g_psi)
        grads.update(self.core.raw_grads(g_eta.T @ xi, g_eta.T @ v, g_eta.sum(axis=0)))
        return loss, grads

    # structure -------------------------------------------------------------
    def verify_structural(self, pattern: SignPattern | None = None, zero_tol: float = 1e-12,
                          n_cond_probes: int = 16, seed: int = 0) -> ConstraintReport:
        """Certify sign constraints from structure alone (no Jacobian sampling).

        Passes iff the effective core satisfies the pattern entrywise, every
        layer weight is at least its eps, and Phi(0) = 0, Psi(0; x) = 0.
        """
        pattern = self.pattern if pattern is None else pattern
        report = check_linear(self.core.effective(), pattern)
        viol = report.violations
        structure = SignSet.of(1)

        if self.conditioned and not pattern.state_unconstrained:
            viol.append(Violation("structure", ("psi", "depends-on-x"), 0, structure))
        margins = [("phi", self.phi.min_weight_margin())]
        rng = np.random.default_rng(seed)
        probes = np.vstack([np.zeros((1, self.n_x)),
                            rng.normal(0.0, 1.0, (n_cond_probes, self.n_x)) * self.phi.scale])
        if self.conditioned:
            margins.append(("psi", self.psi.min_weight_margin(probes)))
            eps_ok = self.psi.eps > 0
        else:
            margins.append(("psi", self.psi.min_weight_margin()))
            eps_ok = all(l.eps > 0 for l in self.psi.layers)
        eps_ok = eps_ok and all(l.eps > 0 for l in self.phi.layers)
        for name, m in margins:
            if m < 0 or not eps_ok:
                viol.append(Violation("structure", (name, "weight"), -1, structure, value=m))

        phi0 = self.phi.forward(np.zeros(self.n_x))
        if np.max(np.abs(phi0)) > zero_tol:
            viol.append(Violation("structure", ("phi", "zero"), 1, structure,
                                  value=float(np.max(np.abs(phi0)))))
        psi0 = self.psi.forward(np.zeros((len(probes), self.n_u)), probes)
        if np.max(np.abs(psi0)) > zero_tol:
            viol.append(Violation("structure", ("psi", "zero"), 1, structure,
                                  value=float(np.max(np.abs(psi0)))))
        report.tolerances["zero_tol"] = zero_tol
        return report

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "family": self.family,
            "dims": {"n_x": self.n_x, "n_u": self.n_u},
            "pattern": self.pattern.to_dict(),
            "core": self.core.to_dict(),
            "phi": self.phi.to_dict(),
            "psi": self.psi.to_dict(),
            "loss_scale": self.loss_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ELModel":
        if d.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported model schema {d.get('schema')!r}")
        return cls(transform_from_dict(d["phi"]), transform_from_dict(d["psi"]),
                   SignedLinearCore.from_dict(d["core"]), d.get("loss_scale"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def predict(m: ELModel, x, u):
    return m.predict(x, u)


def jacobians(m: ELModel, x, u):
    return m.jacobians(x, u)


def verify_structural(m: ELModel, pattern: SignPattern | None = None) -> ConstraintReport:
    return m.verify_structural(pattern)
