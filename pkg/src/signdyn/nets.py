"""Small fully connected networks with explicit forward/backward passes."""
from __future__ import annotations

import numpy as np

_ACT = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(float)),
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
}


class MLP:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``; activation on hidden layers only.

    ``MLP([3, 3, 3, 3])`` has three affine layers (two hidden activations).
    """

    def __init__(self, sizes, activation: str = "tanh", rng=None, init_scale: float = 1.0,
                 out_scale: float | None = None, out_bias: float = 0.0):
        if activation not in _ACT:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        self.sizes = list(sizes)
        self.activation = activation
        self.W = []
        self.b = []
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = init_scale / np.sqrt(n_in)
            if k == len(self.sizes) - 2 and out_scale is not None:
                scale = out_scale
            self.W.append(rng.normal(0.0, scale, size=(n_out, n_in)))
            self.b.append(np.zeros(n_out))
        self.b[-1] += out_bias

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.W, self.b))

    def params(self, prefix: str = "") -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.W, self.b)):
            out[f"{prefix}W{k}"] = w
            out[f"{prefix}b{k}"] = b
        return out

    def forward(self, X: np.ndarray, cache: bool = False):
        act, _ = _ACT[self.activation]
        hs = [X]
        h = X
        last = len(self.W) - 1
        for k, (w, b) in enumerate(zip(self.W, self.b)):
            h = h @ w.T + b
            if k < last:
                h = act(h)
            hs.append(h)
        return (h, hs) if cache else h

    __call__ = forward

    def backward(self, hs: list, g_out: np.ndarray, prefix: str = ""):
        """Return (parameter gradients, gradient w.r.t. the network input)."""
        _, dact = _ACT[self.activation]
        grads = {}
        g = g_out
        last = len(self.W) - 1
        for k in range(last, -1, -1):
            if k < last:
                g = g * dact(hs[k + 1])
            grads[f"{prefix}W{k}"] = g.T @ hs[k]
            grads[f"{prefix}b{k}"] = g.sum(axis=0)
            g = g @ self.W[k]
        return grads, g

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "W": [w.tolist() for w in self.W],
            "b": [b.tolist() for b in self.b],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls(d["sizes"], d["activation"], rng=0)
        net.W = [np.array(w, dtype=float).reshape(n_out, n_in)
                 for w, n_in, n_out in zip(d["W"], d["sizes"][:-1], d["sizes"][1:])]
        net.b = [np.array(b, dtype=float) for b in d["b"]]
        return net
