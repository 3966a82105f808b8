"""Ground-truth plants and dataset generation.

* Coupled two-tank system (levels h1, h2 in m; pump voltage in V)::

      dh1/dt = -k1 sqrt(h1) + k4 Vp
      dh2/dt =  k2 sqrt(h1) - k3 sqrt(h2)

* A first-principles surrogate of a parallel hybrid powertrain with state
  (driveshaft engine torque, speed, SoC) and input (engine torque command,
  motor torque, brake torque). Only its sign structure is meant to match the
  real vehicle.

Both are integrated with classical fixed-step RK4 and accept batches.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Trajectory, TrajectoryDataset


def rk4(f, x, u, dt: float, substeps: int = 1, clamp=None):
    """Classical RK4 with ``substeps`` equal steps; ``clamp`` is applied after each."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    for _ in range(substeps):
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if clamp is not None:
            x = clamp(x)
    return x


# --------------------------------------------------------------------------
# two-tank

@dataclass(frozen=True)
class TwoTankParams:
    k1: float = 0.020
    k2: float = 0.009
    k3: float = 0.015
    k4: float = 0.0025

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4) <= 0:
            raise ValueError("two-tank coefficients must be positive")

    def equilibrium_voltage(self, h2: float) -> float:
        """Pump voltage holding tank 2 at ``h2`` in steady state."""
        h1 = (self.k3 / self.k2) ** 2 * h2
        return self.k1 * np.sqrt(h1) / self.k4


def two_tank_rhs(p: TwoTankParams, h, v_p):
    h = np.asarray(h, dtype=float)
    r1 = np.sqrt(np.maximum(h[..., 0], 0.0))
    r2 = np.sqrt(np.maximum(h[..., 1], 0.0))
    v = np.asarray(v_p, dtype=float)
    v = v[..., 0] if v.ndim and v.shape[-1:] == (1,) and v.ndim == h.ndim else v
    return np.stack([-p.k1 * r1 + p.k4 * v, p.k2 * r1 - p.k3 * r2], axis=-1)


def two_tank_step(p: TwoTankParams, h, v_p, dt: float = 1.0, substeps: int = 10):
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("tank levels must be nonnegative")
    return rk4(lambda x, u: two_tank_rhs(p, x, u), h, v_p, dt, substeps,
               clamp=lambda x: np.maximum(x, 0.0))


def two_tank_map(p: TwoTankParams | None = None, dt: float = 1.0, substeps: int = 10):
    """Batched discrete step map ``(h, u) -> h+`` with ``u`` of shape (..., 1)."""
    p = p or TwoTankParams()
    return lambda h, u: two_tank_step(p, np.maximum(h, 0.0), u, dt, substeps)


# --------------------------------------------------------------------------
# hybrid powertrain surrogate

@dataclass(frozen=True)
class PowertrainParams:
    T_e: float = 0.5      # engine torque lag [s]
    k_e: float = 1.0      # engine torque gain
    M_eff: float = 1500.0  # effective mass [kg]
    r: float = 0.3        # wheel radius incl. final drive [m]
    c0: float = 30.0      # rolling resistance [N]
    c1: float = 5.0       # viscous drag [N s/m]
    c2: float = 0.4       # aerodynamic drag [N s^2/m^2]
    k_s: float = 1e-6     # SoC drain per (N m * m/s * s)
    eta_r: float = 0.6    # regeneration efficiency
    v_sat: float = 0.5    # speed scale of the standstill saturation [m/s]

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ValueError("powertrain parameters must be positive")


POWERTRAIN_INPUT_BOX = (np.array([0.0, -198.0, 0.0]), np.array([198.0, 196.0, 442.0]))


def powertrain_rhs(p: PowertrainParams, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    tau, V = x[..., 0], np.maximum(x[..., 1], 0.0)
    cmd, mot, brk = u[..., 0], u[..., 1], u[..., 2]
    sat = np.tanh(V / p.v_sat)
    d_tau = (p.k_e * cmd - tau) / p.T_e
    force = (tau + mot) / p.r - brk / p.r * sat - p.c0 * sat - p.c1 * V - p.c2 * V * V
    d_v = force / p.M_eff
    power = mot * V
    d_s = -p.k_s * power * np.where(power < 0, p.eta_r, 1.0)
    return np.stack([d_tau, d_v, d_s], axis=-1)


def _powertrain_clamp(x):
    x = x.copy()
    x[..., 1] = np.maximum(x[..., 1], 0.0)
    x[..., 2] = np.clip(x[..., 2], 0.0, 1.0)
    return x


def powertrain_step(p: PowertrainParams, state, inputs, dt: float = 0.1, substeps: int = 1):
    return rk4(lambda x, u: powertrain_rhs(p, x, u), np.asarray(state, dtype=float),
               np.asarray(inputs, dtype=float), dt, substeps, clamp=_powertrain_clamp)


def powertrain_map(p: PowertrainParams | None = None, dt: float = 0.1, substeps: int = 1):
    p = p or PowertrainParams()
    return lambda x, u: powertrain_step(p, x, u, dt, substeps)


# --------------------------------------------------------------------------
# excitation signals and dataset generation

@dataclass
class SignalProtocol:
    """Random excitation, one independent signal per input component.

    ``square_wave``: the half-period is drawn once per trajectory from
    ``hold`` (in samples). With ``amplitude="per_trajectory"`` the signal
    alternates between ``low`` and one magnitude drawn from [low, high] for
    the whole trajectory (random phase); with ``"per_half_period"`` the level
    is redrawn uniformly from [low, high] at every half-period.

    ``trapezoid``: levels alternate hold / linear ramp with durations drawn
    from ``hold`` and ``ramp``; each level is zero with probability
    ``zero_prob``.
    """

    kind: str
    low: tuple
    high: tuple
    hold: tuple = (10, 50)
    ramp: tuple = (5, 30)
    zero_prob: tuple | None = None
    amplitude: str = "per_half_period"

    def __post_init__(self):
        if self.kind not in ("square_wave", "trapezoid"):
            raise ValueError(f"unknown protocol {self.kind!r}")
        if self.amplitude not in ("per_trajectory", "per_half_period"):
            raise ValueError(f"unknown amplitude mode {self.amplitude!r}")
        self.hold = tuple(int(h) for h in self.hold)
        self.ramp = tuple(int(r) for r in self.ramp)
        if self.zero_prob is not None:
            self.zero_prob = tuple(float(z) for z in self.zero_prob)
        self.low = tuple(np.atleast_1d(np.asarray(self.low, dtype=float)).tolist())
        self.high = tuple(np.atleast_1d(np.asarray(self.high, dtype=float)).tolist())
        if len(self.low) != len(self.high) or any(l > h for l, h in zip(self.low, self.high)):
            raise ValueError("invalid amplitude range")

    @property
    def n_u(self) -> int:
        return len(self.low)

    def generate(self, T: int, rng) -> np.ndarray:
        out = np.empty((T, self.n_u))
        zp = self.zero_prob or (0.0,) * self.n_u
        for j in range(self.n_u):
            lo, hi = self.low[j], self.high[j]
            if self.kind == "square_wave":
                half = int(rng.integers(self.hold[0], self.hold[1] + 1))
                n_seg = -(-T // half) + 2
                if self.amplitude == "per_trajectory":
                    levels = np.where(np.arange(n_seg) % 2 == 0, rng.uniform(lo, hi), lo)
                    shift = int(rng.integers(0, 2 * half))
                    out[:, j] = np.repeat(levels, half)[shift:shift + T]
                else:
                    levels = rng.uniform(lo, hi, n_seg)
                    out[:, j] = np.repeat(levels, half)[:T]
            else:
                sig = []
                level = 0.0 if rng.random() < zp[j] else rng.uniform(lo, hi)
                while len(sig) < T:
                    sig.extend([level] * int(rng.integers(self.hold[0], self.hold[1] + 1)))
                    nxt = 0.0 if rng.random() < zp[j] else rng.uniform(lo, hi)
                    n_ramp = int(rng.integers(self.ramp[0], self.ramp[1] + 1))
                    sig.extend(np.linspace(level, nxt, n_ramp + 1)[1:].tolist())
                    level = nxt
                out[:, j] = np.clip(sig[:T], lo, hi)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def two_tank_protocol() -> SignalProtocol:
    return SignalProtocol("square_wave", (0.0,), (9.0,), hold=(10, 50))


def powertrain_protocol() -> SignalProtocol:
    lo, hi = POWERTRAIN_INPUT_BOX
    return SignalProtocol("trapezoid", tuple(lo), tuple(hi), hold=(5, 30), ramp=(5, 30),
                          zero_prob=(0.2, 0.3, 0.6))


@dataclass
class PlantSpec:
    """A named plant: batched step map plus its initial-state box and protocol."""

    name: str
    step: object
    dt: float
    init_low: tuple
    init_high: tuple
    protocol: SignalProtocol
    params: dict = field(default_factory=dict)
    substeps: int = 1


def two_tank_plant(params: TwoTankParams | None = None, dt: float = 1.0, substeps: int = 10) -> PlantSpec:
    params = params or TwoTankParams()
    return PlantSpec("two_tank", two_tank_map(params, dt, substeps), dt, (0.0, 0.0), (0.5, 0.5),
                     two_tank_protocol(), asdict(params), substeps)


def powertrain_plant(params: PowertrainParams | None = None, dt: float = 0.1,
                     substeps: int = 1) -> PlantSpec:
    params = params or PowertrainParams()
    return PlantSpec("powertrain", powertrain_map(params, dt, substeps), dt,
                     (0.0, 0.0, 0.3), (100.0, 30.0, 0.8), powertrain_protocol(),
                     asdict(params), substeps)


def generate_dataset(plant: PlantSpec, n_traj: int, duration: float, seed: int = 0,
                     protocol: SignalProtocol | None = None) -> TrajectoryDataset:
    """Simulate ``n_traj`` trajectories of ``duration`` seconds sampled every ``plant.dt``.

    Trajectory ``k`` draws its initial state and input signal from the k-th
    child of ``SeedSequence(seed)``, so any trajectory is reproducible alone.
    """
    protocol = protocol or plant.protocol
    T = int(round(duration / plant.dt))
    if T < 1:
        raise ValueError("duration shorter than one sample")
    children = np.random.SeedSequence(seed).spawn(n_traj)
    lo, hi = np.asarray(plant.init_low), np.asarray(plant.init_high)
    X0 = np.empty((n_traj, lo.size))
    Useq = np.empty((n_traj, T, protocol.n_u))
    for k, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        X0[k] = rng.uniform(lo, hi)
        Useq[k] = protocol.generate(T, rng)
    states = np.empty((n_traj, T + 1, lo.size))
    states[:, 0] = X0
    for t in range(T):
        states[:, t + 1] = plant.step(states[:, t], Useq[:, t])
    trajectories = [Trajectory(k, states[k], Useq[k]) for k in range(n_traj)]
    meta = {
        "plant": plant.name,
        "plant_params": plant.params,
        "substeps": plant.substeps,
        "protocol": protocol.to_dict(),
        "seed": seed,
        "n_traj": n_traj,
        "duration": duration,
        "init_box": [list(plant.init_low), list(plant.init_high)],
    }
    return TrajectoryDataset(trajectories, plant.dt, meta)
