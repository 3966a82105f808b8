"""Splits, losses, Adam training with early stopping, baselines and R^2."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TrajectoryDataset
from .el_model import ConfigError, ELModel
from .nets import MLP
from .signs import SignPattern
from .transforms import TransformOverflow

log = logging.getLogger(__name__)

FAMILIES = ("el_signed", "el_free", "linear_signed", "linear_free", "nn_baseline")


# --------------------------------------------------------------------------
# splits

@dataclass
class SplitSpec:
    """``interpolation``: seeded shuffle then cut. ``extrapolation``: sort by
    ``sort_key`` ascending; the lowest ``1 - train_fraction`` share is the test set.

    ``sort_key`` is ``"min"`` (minimum over all state components and times)
    or ``"min:<k>"`` (minimum of state component k, zero-based).
    """

    kind: str = "interpolation"
    train_fraction: float = 0.85
    sort_key: str = "min"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("interpolation", "extrapolation"):
            raise ConfigError(f"unknown split kind {self.kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")


def _sort_value(states: np.ndarray, key: str) -> float:
    if key == "min":
        return float(states.min())
    if key.startswith("min:"):
        return float(states[:, int(key[4:])].min())
    raise ConfigError(f"unknown sort key {key!r}")


def split(ds: TrajectoryDataset, spec: SplitSpec) -> tuple[list, list]:
    if len(ds) < 2:
        raise ConfigError("need at least two trajectories to split")
    ids = ds.ids
    n_train = int(round(spec.train_fraction * len(ids)))
    if n_train < 1 or n_train >= len(ids):
        raise ConfigError("split leaves an empty side")
    if spec.kind == "interpolation":
        order = np.random.default_rng(spec.seed).permutation(len(ids))
        shuffled = [ids[k] for k in order]
        return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])
    keyed = sorted(ds.trajectories, key=lambda tr: (_sort_value(tr.states, spec.sort_key), tr.id))
    n_test = len(ids) - n_train
    return sorted(tr.id for tr in keyed[n_test:]), sorted(tr.id for tr in keyed[:n_test])


# --------------------------------------------------------------------------
# baseline network

class NNModel:
    """Plain network for the step map: ``x+ = x_scale * net([x / x_scale, u / u_scale])``."""

    family = "nn"

    def __init__(self, net: MLP, x_scale=None, u_scale=None):
        self.net = net
        n_x = net.sizes[-1]
        n_u = net.sizes[0] - n_x
        self.x_scale = np.ones(n_x) if x_scale is None else np.asarray(x_scale, dtype=float)
        self.u_scale = np.ones(n_u) if u_scale is None else np.asarray(u_scale, dtype=float)

    @classmethod
    def create(cls, n_x: int, n_u: int, hidden: int, n_hidden_layers: int, activation: str,
               rng=None, x_scale=None, u_scale=None) -> "NNModel":
        sizes = [n_x + n_u] + [hidden] * n_hidden_layers + [n_x]
        return cls(MLP(sizes, activation, rng), x_scale, u_scale)

    @property
    def n_x(self) -> int:
        return self.net.sizes[-1]

    @property
    def n_u(self) -> int:
        return self.net.sizes[0] - self.n_x

    @property
    def loss_scale(self) -> np.ndarray:
        return self.x_scale

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def params(self) -> dict:
        return self.net.params("net.")

    def _inp(self, x, u):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return np.hstack([x / self.x_scale, u / self.u_scale])

    def predict(self, x, u):
        single = np.ndim(x) == 1
        out = self.net.forward(self._inp(x, u)) * self.x_scale
        return out[0] if single else out

    __call__ = predict

    def loss(self, X, U, Xn) -> float:
        r = (self.predict(X, U) - Xn) / self.x_scale
        return float(np.sum(r * r) / len(X))

    def loss_and_grad(self, X, U, Xn):
        out, cache = self.net.forward(self._inp(X, U), cache=True)
        r = out - np.asarray(Xn) / self.x_scale
        n = len(r)
        grads, _ = self.net.backward(cache, 2.0 * r / n, "net.")
        return float(np.sum(r * r) / n), grads

    def to_dict(self) -> dict:
        return {"schema": "signdyn.nn/1", "family": self.family, "net": self.net.to_dict(),
                "x_scale": self.x_scale.tolist(), "u_scale": self.u_scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NNModel":
        return cls(MLP.from_dict(d["net"]), d["x_scale"], d["u_scale"])


# --------------------------------------------------------------------------
# model factory

@dataclass
class Architecture:
    n_phi_layers: int = 2
    n_psi_layers: int = 2
    conditioned: bool = False
    hyper_hidden: int = 3
    nn_hidden: int = 2
    nn_layers: int = 3
    nn_activation: str = "tanh"
    layer_eps: float = 1e-2
    core_eps: float = 1e-3


TWO_TANK_ARCH = Architecture()
POWERTRAIN_ARCH = Architecture(n_phi_layers=3, n_psi_layers=3, conditioned=True, hyper_hidden=3,
                               nn_hidden=15, nn_layers=2, nn_activation="relu")


def make_model(family: str, pattern: SignPattern, arch: Architecture = TWO_TANK_ARCH, rng=None,
               x_scale=None, u_scale=None):
    """Build an untrained model; ``*_free`` families use the all-permissive pattern."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown model family {family!r}")
    n_x, n_u = pattern.n_x, pattern.n_u
    if family == "nn_baseline":
        return NNModel.create(n_x, n_u, arch.nn_hidden, arch.nn_layers, arch.nn_activation, rng,
                              x_scale, u_scale)
    pat = pattern if family.endswith("signed") else SignPattern.free(n_x, n_u)
    if family.startswith("linear"):
        return ELModel.linear(pat, rng, arch.core_eps, x_scale, u_scale)
    return ELModel.create(pat, arch.n_phi_layers, arch.n_psi_layers, arch.conditioned,
                          arch.hyper_hidden, rng, arch.layer_eps, arch.core_eps, x_scale, u_scale)


def data_scales(ds: TrajectoryDataset, ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-component max |value| over the selected trajectories (floored at 1e-6)."""
    X, U, _ = ds.transitions(ids)
    return np.maximum(np.abs(X).max(axis=0), 1e-6), np.maximum(np.abs(U).max(axis=0), 1e-6)


# --------------------------------------------------------------------------
# losses and gradients

def loss(m, X, U, Xn) -> float:
    if len(X) == 0:
        raise ValueError("empty batch")
    return m.loss(X, U, Xn)


def gradients(m, X, U, Xn) -> dict:
    if len(X) == 0:
        raise ValueError("empty batch")
    return m.loss_and_grad(X, U, Xn)[1]


def flatten(d: dict, keys=None) -> np.ndarray:
    keys = sorted(d) if keys is None else keys
    return np.concatenate([np.ravel(d[k]) for k in keys]) if keys else np.zeros(0)


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 15
    val_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    stopped_early: bool = False
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tl!r},{vl!r}" for e, tl, vl in self.history]
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _snapshot(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for k, v in params.items():
        v[...] = snap[k]


def train(m, ds: TrajectoryDataset, train_ids=None, cfg: TrainConfig | None = None,
          callback=None) -> TrainResult:
    """Minibatch Adam on the one-step loss with early stopping on held-out trajectories.

    ``callback(epoch, model)`` runs after every epoch. The returned model
    carries the parameters of the best validation epoch.
    """
    cfg = cfg or TrainConfig()
    ids = list(ds.ids if train_ids is None else train_ids)
    if not ids:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(ids))
    n_val = int(round(cfg.val_fraction * len(ids))) if len(ids) > 1 else 0
    n_val = min(max(n_val, 1), len(ids) - 1) if len(ids) > 1 else 0
    val_ids = sorted(ids[k] for k in order[:n_val])
    fit_ids = sorted(ids[k] for k in order[n_val:])
    X, U, Xn = ds.transitions(fit_ids)
    Xv, Uv, Xnv = ds.transitions(val_ids) if val_ids else (X, U, Xn)

    params = m.params()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    stale = 0
    stopped_early = False
    n = len(X)
    try:
        val0 = m.loss(Xv, Uv, Xnv)
    except TransformOverflow as exc:
        raise TrainingDiverged(f"initial model overflows: {exc}", history) from exc
    best = (val0, 0, _snapshot(params))
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, n, cfg.batch_size):
                    b = perm[start:start + cfg.batch_size]
                    lval, grads = m.loss_and_grad(X[b], U[b], Xn[b])
                    if not np.isfinite(lval):
                        raise FloatingPointError("non-finite loss")
                    opt.step(grads)
                    total += lval * len(b)
                val = m.loss(Xv, Uv, Xnv)
        except (TransformOverflow, FloatingPointError) as exc:
            raise TrainingDiverged(f"diverged at epoch {epoch}: {exc}", history) from exc
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", history)
        history.append((epoch, total / n, val))
        if callback is not None:
            callback(epoch, m)
        if val < best[0]:
            best = (val, epoch, _snapshot(params))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped_early = True
                break
    _restore(params, best[2])
    log.info("trained %s: best epoch %d val %.3e", type(m).__name__, best[1], best[0])
    return TrainResult(m, history, best[1], stopped_early, fit_ids, val_ids)


# --------------------------------------------------------------------------
# evaluation

def r_squared(m, X, U, Xn) -> float:
    """Pooled R^2 of one-step state changes, each component standardized by its test std."""
    X, U, Xn = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (X, U, Xn))
    if len(X) < 2:
        raise ValueError("need at least two transitions")
    target = Xn - X
    pred = np.asarray(m.predict(X, U)) - X
    sd = target.std(axis=0)
    keep = sd > 0
    if not keep.any():
        raise ValueError("R^2 undefined: every state increment has zero variance")
    t = target[:, keep] / sd[keep]
    p = pred[:, keep] / sd[keep]
    ss_res = np.sum((t - p) ** 2)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2)
    return float(1.0 - ss_res / ss_tot)


def model_from_dict(d: dict):
    if d.get("schema", "").startswith("signdyn.nn"):
        return NNModel.from_dict(d)
    return ELModel.from_dict(d)
