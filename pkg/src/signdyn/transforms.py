"""Invertible componentwise-increasing sinh-layer transformations.

One layer acts on each coordinate independently:

    y = asinh(a + sinh(w*z + b)) - asinh(a + sinh(b)),    w = ReLU(w_raw) + eps

so it fixes the origin, is strictly increasing, and has the closed-form inverse

    z = (asinh(sinh(y + asinh(a + sinh(b))) - a) - b) / w.

Stacks of layers are used for the state map Phi and the input map Psi. The
input map may take its layer parameters from small networks of the state
("conditioned" transform). Every transform also carries a fixed positive
input scale, which keeps all structural properties and conditions the data.

All routines operate on ``(batch, n)`` arrays; layer parameters broadcast,
so conditioned layers simply pass ``(batch, n)`` parameter arrays.
"""
from __future__ import annotations

import numpy as np

from .nets import MLP

SCHEMA = "signdyn.transform/1"
OVERFLOW_LIMIT = 700.0
DEFAULT_LAYER_EPS = 1e-2


class TransformOverflow(ArithmeticError):
    """sinh argument beyond the float64 range guard."""


def _guard(s: np.ndarray) -> None:
    if not np.all(np.abs(s) <= OVERFLOW_LIMIT):
        if np.isnan(s).any():
            raise TransformOverflow("NaN inside sinh layer")
        raise TransformOverflow(
            f"sinh argument {float(np.max(np.abs(s))):.4g} exceeds {OVERFLOW_LIMIT}"
        )


def effective_weight(w_raw, eps):
    return np.maximum(w_raw, 0.0) + eps


def sinh_forward(z, a, b, w):
    s = w * z + b
    _guard(s)
    _guard(b)
    return np.arcsinh(a + np.sinh(s)) - np.arcsinh(a + np.sinh(b))


def sinh_inverse(y, a, b, w):
    _guard(b)
    t = y + np.arcsinh(a + np.sinh(b))
    _guard(t)
    # exact at the origin, like the forward map
    return np.where(y == 0, 0.0, (np.arcsinh(np.sinh(t) - a) - b) / w)


def sinh_partials(z, a, b, w):
    """Partial derivatives of one layer output w.r.t. (z, a, b, w) at input ``z``."""
    s = w * z + b
    _guard(s)
    p = a + np.sinh(s)
    q = a + np.sinh(b)
    rp = 1.0 / np.hypot(1.0, p)
    rq = 1.0 / np.hypot(1.0, q)
    cs = np.cosh(s) * rp
    return w * cs, rp - rq, cs - np.cosh(b) * rq, z * cs


class SinhLayer:
    def __init__(self, a, b, w_raw, eps: float = DEFAULT_LAYER_EPS):
        self.a = np.array(a, dtype=float).reshape(-1)
        self.b = np.array(b, dtype=float).reshape(-1)
        self.w_raw = np.array(w_raw, dtype=float).reshape(-1)
        if not (self.a.shape == self.b.shape == self.w_raw.shape):
            raise ValueError("layer parameter shapes differ")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)

    @classmethod
    def identity_like(cls, n: int, eps: float = DEFAULT_LAYER_EPS) -> "SinhLayer":
        """a = 0, b = 0, w_raw = 1: a pure scaling by ``1 + eps``."""
        return cls(np.zeros(n), np.zeros(n), np.ones(n), eps)

    @classmethod
    def random(cls, n: int, rng, eps: float = DEFAULT_LAYER_EPS, spread: float = 1.0) -> "SinhLayer":
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0, spread, n), rng.normal(0, spread, n),
                   rng.uniform(0.2, 1.5, n), eps)

    @property
    def n(self) -> int:
        return self.a.size

    @property
    def weight(self) -> np.ndarray:
        return effective_weight(self.w_raw, self.eps)

    def forward(self, z):
        return sinh_forward(np.asarray(z, dtype=float), self.a, self.b, self.weight)

    def inverse(self, y):
        return sinh_inverse(np.asarray(y, dtype=float), self.a, self.b, self.weight)

    def derivative(self, z):
        return sinh_partials(np.asarray(z, dtype=float), self.a, self.b, self.weight)[0]

    def param_partials(self, z) -> dict:
        """Elementwise derivatives of the output w.r.t. the raw parameters."""
        _, da, db, dw = sinh_partials(np.asarray(z, dtype=float), self.a, self.b, self.weight)
        return {"a": da, "b": db, "w_raw": dw * (self.w_raw > 0)}

    def params(self, prefix: str = "") -> dict:
        return {f"{prefix}a": self.a, f"{prefix}b": self.b, f"{prefix}w_raw": self.w_raw}

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "w_raw": self.w_raw.tolist(),
                "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "SinhLayer":
        return cls(d["a"], d["b"], d["w_raw"], d["eps"])


class MonotoneTransform:
    """Composition ``layer_L o ... o layer_1`` applied to ``z / scale``.

    With no layers this is a fixed diagonal scaling (the identity by default).
    """

    conditioned = False

    def __init__(self, layers, scale=None, n: int | None = None):
        self.layers = list(layers)
        if n is None:
            if self.layers:
                n = self.layers[0].n
            elif scale is not None:
                n = np.size(scale)
            else:
                raise ValueError("dimension needed for an empty transform")
        self.n = int(n)
        self.scale = np.ones(self.n) if scale is None else np.array(scale, dtype=float).reshape(-1)
        if self.scale.size != self.n or np.any(self.scale <= 0):
            raise ValueError("scale must be positive with one entry per coordinate")
        if any(layer.n != self.n for layer in self.layers):
            raise ValueError("layer dimensions differ")

    @classmethod
    def identity(cls, n: int, scale=None) -> "MonotoneTransform":
        return cls([], scale, n)

    @classmethod
    def identity_like(cls, n: int, n_layers: int, eps: float = DEFAULT_LAYER_EPS, scale=None):
        return cls([SinhLayer.identity_like(n, eps) for _ in range(n_layers)], scale, n)

    @classmethod
    def random(cls, n: int, n_layers: int, rng, eps: float = DEFAULT_LAYER_EPS, scale=None,
               spread: float = 1.0):
        rng = np.random.default_rng(rng)
        return cls([SinhLayer.random(n, rng, eps, spread) for _ in range(n_layers)], scale, n)

    @property
    def n_params(self) -> int:
        return 3 * self.n * len(self.layers)

    def params(self, prefix: str = "") -> dict:
        out = {}
        for k, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}{k}."))
        return out

    # plain evaluation -------------------------------------------------
    def forward(self, z, x=None):
        h = np.asarray(z, dtype=float) / self.scale
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def inverse(self, y, x=None):
        h = np.asarray(y, dtype=float)
        for layer in reversed(self.layers):
            h = layer.inverse(h)
        return h * self.scale

    def diag_jacobian(self, z, x=None):
        h = np.asarray(z, dtype=float) / self.scale
        d = np.ones_like(h) / self.scale
        for layer in self.layers:
            d = d * layer.derivative(h)
            h = layer.forward(h)
        return d

    # reverse mode -----------------------------------------------------
    def forward_cache(self, z, x=None):
        h = np.asarray(z, dtype=float) / self.scale
        inputs = []
        for layer in self.layers:
            inputs.append(h)
            h = layer.forward(h)
        return h, inputs

    def backward(self, inputs, g, prefix: str = ""):
        """Backprop ``g = dL/dy`` through ``forward``; returns (dL/dz, dL/dx=None, grads)."""
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz, da, db, dw = sinh_partials(inputs[k], layer.a, layer.b, layer.weight)
            grads[f"{prefix}{k}.a"] = (g * da).sum(axis=0)
            grads[f"{prefix}{k}.b"] = (g * db).sum(axis=0)
            grads[f"{prefix}{k}.w_raw"] = (g * dw).sum(axis=0) * (layer.w_raw > 0)
            g = g * dz
        return g / self.scale, None, grads

    def inverse_cache(self, y, x=None):
        """Inverse plus the forward-layer inputs along the way (index k feeds layer k)."""
        h = np.asarray(y, dtype=float)
        inputs = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            h = self.layers[k].inverse(h)
            inputs[k] = h
        return h * self.scale, inputs

    def inverse_backward(self, inputs, g, prefix: str = ""):
        """Backprop ``g = dL/dz`` through ``inverse`` via implicit differentiation."""
        g = g * self.scale
        grads = {}
        for k, layer in enumerate(self.layers):
            dz, da, db, dw = sinh_partials(inputs[k], layer.a, layer.b, layer.weight)
            g = g / dz
            grads[f"{prefix}{k}.a"] = -(g * da).sum(axis=0)
            grads[f"{prefix}{k}.b"] = -(g * db).sum(axis=0)
            grads[f"{prefix}{k}.w_raw"] = -(g * dw).sum(axis=0) * (layer.w_raw > 0)
        return g, grads

    def min_weight_margin(self) -> float:
        """Smallest (effective weight - eps) over layers; negative means broken structure."""
        if not self.layers:
            return float("inf")
        return float(min(np.min(layer.weight - layer.eps) for layer in self.layers))

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "kind": "monotone", "n": self.n, "scale": self.scale.tolist(),
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneTransform":
        return cls([SinhLayer.from_dict(l) for l in d["layers"]], d["scale"], d["n"])


_FIELDS = ("a", "b", "w")


class ConditionedTransform:
    """Sinh-layer stack in ``u`` whose (a, b, w_raw) come from networks of ``x``.

    Each layer owns three separate networks ``x -> a(x)``, ``x -> b(x)``,
    ``x -> w_raw(x)``; the network input is ``x / cond_scale``.
    """

    conditioned = True

    def __init__(self, nets, n: int, n_cond: int, eps: float = DEFAULT_LAYER_EPS,
                 scale=None, cond_scale=None):
        self.nets = [dict(layer) for layer in nets]
        self.n = int(n)
        self.n_cond = int(n_cond)
        self.eps = float(eps)
        self.scale = np.ones(self.n) if scale is None else np.array(scale, dtype=float).reshape(-1)
        self.cond_scale = (np.ones(self.n_cond) if cond_scale is None
                           else np.array(cond_scale, dtype=float).reshape(-1))
        if np.any(self.scale <= 0) or np.any(self.cond_scale <= 0):
            raise ValueError("scales must be positive")
        for layer in self.nets:
            for f in _FIELDS:
                net = layer[f]
                if net.sizes[0] != self.n_cond or net.sizes[-1] != self.n:
                    raise ValueError("hypernet dimensions do not match transform")

    @classmethod
    def create(cls, n: int, n_cond: int, n_layers: int, hidden: int = 3, depth: int = 3,
               rng=None, eps: float = DEFAULT_LAYER_EPS, out_scale: float = 0.01,
               scale=None, cond_scale=None) -> "ConditionedTransform":
        """Networks with ``depth`` affine layers; outputs start near (a, b, w_raw) = (0, 0, 1)."""
        rng = np.random.default_rng(rng)
        sizes = [n_cond] + [hidden] * (depth - 1) + [n]
        nets = []
        for _ in range(n_layers):
            nets.append({
                "a": MLP(sizes, "tanh", rng, out_scale=out_scale),
                "b": MLP(sizes, "tanh", rng, out_scale=out_scale),
                "w": MLP(sizes, "tanh", rng, out_scale=out_scale, out_bias=1.0),
            })
        return cls(nets, n, n_cond, eps, scale, cond_scale)

    @property
    def n_layers(self) -> int:
        return len(self.nets)

    @property
    def n_params(self) -> int:
        return sum(layer[f].n_params for layer in self.nets for f in _FIELDS)

    def params(self, prefix: str = "") -> dict:
        out = {}
        for k, layer in enumerate(self.nets):
            for f in _FIELDS:
                out.update(layer[f].params(f"{prefix}{k}.{f}."))
        return out

    def layer_params(self, x, cache: bool = False):
        """Per-layer (a, b, w, w_raw) arrays at conditioning states ``x`` (batch, n_cond)."""
        xs = np.atleast_2d(np.asarray(x, dtype=float)) / self.cond_scale
        out, caches = [], []
        for layer in self.nets:
            a, ca = layer["a"].forward(xs, cache=True)
            b, cb = layer["b"].forward(xs, cache=True)
            w_raw, cw = layer["w"].forward(xs, cache=True)
            out.append((a, b, effective_weight(w_raw, self.eps), w_raw))
            caches.append((ca, cb, cw))
        return (out, caches) if cache else out

    def materialize(self, x) -> MonotoneTransform:
        """The x-independent transform induced at a single conditioning state."""
        params = self.layer_params(np.asarray(x, dtype=float).reshape(1, -1))
        layers = [SinhLayer(a[0], b[0], w_raw[0], self.eps) for a, b, _, w_raw in params]
        return MonotoneTransform(layers, self.scale, self.n)

    @staticmethod
    def _shape(u, x):
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        U = np.atleast_2d(u)
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if X.shape[0] == 1 and U.shape[0] > 1:
            X = np.repeat(X, U.shape[0], axis=0)
        return U, X, single

    def forward(self, u, x):
        U, X, single = self._shape(u, x)
        h = U / self.scale
        for a, b, w, _ in self.layer_params(X):
            h = sinh_forward(h, a, b, w)
        return h[0] if single else h

    def inverse(self, v, x):
        V, X, single = self._shape(v, x)
        h = V
        for a, b, w, _ in reversed(self.layer_params(X)):
            h = sinh_inverse(h, a, b, w)
        h = h * self.scale
        return h[0] if single else h

    def diag_jacobian(self, u, x):
        U, X, single = self._shape(u, x)
        h = U / self.scale
        d = np.ones_like(h) / self.scale
        for a, b, w, _ in self.layer_params(X):
            d = d * sinh_partials(h, a, b, w)[0]
            h = sinh_forward(h, a, b, w)
        return d[0] if single else d

    def forward_cache(self, u, x):
        U, X, _ = self._shape(u, x)
        params, net_caches = self.layer_params(X, cache=True)
        h = U / self.scale
        inputs = []
        for a, b, w, _ in params:
            inputs.append(h)
            h = sinh_forward(h, a, b, w)
        return h, (inputs, params, net_caches)

    def backward(self, cache, g, prefix: str = ""):
        """Backprop ``g = dL/dv``; returns (dL/du, dL/dx, grads)."""
        inputs, params, net_caches = cache
        grads = {}
        gx = 0.0
        for k in range(len(params) - 1, -1, -1):
            a, b, w, w_raw = params[k]
            dz, da, db, dw = sinh_partials(inputs[k], a, b, w)
            for f, gout, nc in (("a", g * da, net_caches[k][0]),
                                ("b", g * db, net_caches[k][1]),
                                ("w", g * dw * (w_raw > 0), net_caches[k][2])):
                gp, gxi = self.nets[k][f].backward(nc, gout, f"{prefix}{k}.{f}.")
                grads.update(gp)
                gx = gx + gxi
            g = g * dz
        return g / self.scale, gx / self.cond_scale, grads

    def x_jacobian(self, u, x):
        """d Psi / d x at a single point, shape (n, n_cond)."""
        u = np.asarray(u, dtype=float).reshape(1, -1)
        x = np.asarray(x, dtype=float).reshape(1, -1)
        _, cache = self.forward_cache(u, x)
        jac = np.empty((self.n, self.n_cond))
        for i in range(self.n):
            e = np.zeros((1, self.n))
            e[0, i] = 1.0
            jac[i] = self.backward(cache, e)[1][0]
        return jac

    def min_weight_margin(self, x) -> float:
        params = self.layer_params(x)
        return float(min(np.min(w - self.eps) for _, _, w, _ in params)) if params else float("inf")

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA, "kind": "conditioned", "n": self.n, "n_cond": self.n_cond,
            "eps": self.eps, "scale": self.scale.tolist(), "cond_scale": self.cond_scale.tolist(),
            "nets": [{f: layer[f].to_dict() for f in _FIELDS} for layer in self.nets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionedTransform":
        nets = [{f: MLP.from_dict(layer[f]) for f in _FIELDS} for layer in d["nets"]]
        return cls(nets, d["n"], d["n_cond"], d["eps"], d["scale"], d["cond_scale"])


def transform_from_dict(d: dict):
    if d.get("schema") != SCHEMA:
        raise ValueError(f"unsupported transform schema {d.get('schema')!r}")
    return ConditionedTransform.from_dict(d) if d["kind"] == "conditioned" else MonotoneTransform.from_dict(d)
