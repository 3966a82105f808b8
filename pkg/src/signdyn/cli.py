"""Command-line front end: ``signdyn generate|train|evaluate|verify|mpc|reproduce``.

Each run is described by an :class:`ExperimentConfig` (JSON via ``--config``,
overridable by flags). Every JSON artifact embeds the config hash and every
run writes ``manifest.json`` listing its files with their SHA-256 digests.
Failures exit nonzero after printing a JSON error report to stderr (and
writing ``error.json`` into the output directory).
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields

import click
import numpy as np

from . import plants
from .data import TrajectoryDataset
from .el_model import ConfigError, ELModel
from .mpc import MpcController, MpcSpec, PowertrainMpcConfig, closed_loop
from .signs import check_sampled, powertrain_pattern, two_tank_pattern
from .training import (
    FAMILIES,
    POWERTRAIN_ARCH,
    TWO_TANK_ARCH,
    Architecture,
    SplitSpec,
    TrainConfig,
    data_scales,
    make_model,
    model_from_dict,
    r_squared,
    split,
    train,
)

log = logging.getLogger("signdyn")

PLANTS = ("two_tank", "powertrain")
SPLITS = ("interpolation", "extrapolation")


@dataclass
class ExperimentConfig:
    plant: str = "two_tank"
    n_traj: int = 300
    duration: float | None = None
    protocol: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    family: str = "el_signed"
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.plant not in PLANTS:
            raise ConfigError(f"unknown plant {self.plant!r}; expected one of {PLANTS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.n_traj < 2:
            raise ConfigError("n_traj must be >= 2")
        if self.duration is None:
            self.duration = 200.0 if self.plant == "two_tank" else 60.0

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            d = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- resolved pieces

    def pattern(self):
        return two_tank_pattern() if self.plant == "two_tank" else powertrain_pattern()

    def plant_spec(self) -> plants.PlantSpec:
        ps = plants.two_tank_plant() if self.plant == "two_tank" else plants.powertrain_plant()
        if self.protocol:
            ps.protocol = plants.SignalProtocol(**{**ps.protocol.to_dict(), **self.protocol})
        return ps

    def architecture(self) -> Architecture:
        base = TWO_TANK_ARCH if self.plant == "two_tank" else POWERTRAIN_ARCH
        return Architecture(**{**asdict(base), **self.arch})

    def split_spec(self, kind: str | None = None) -> SplitSpec:
        d = {"seed": self.seed, **self.split}
        if kind is not None:
            d["kind"] = kind
        return SplitSpec(**d)

    def train_config(self) -> TrainConfig:
        patience = 15 if self.plant == "two_tank" else 10
        return TrainConfig(**{"seed": self.seed, "patience": patience, **self.train})


# --------------------------------------------------------------------------
# pipeline stages (usable without the CLI)

def generate(cfg: ExperimentConfig) -> TrajectoryDataset:
    return plants.generate_dataset(cfg.plant_spec(), cfg.n_traj, cfg.duration, cfg.seed)


def fit(cfg: ExperimentConfig, ds: TrajectoryDataset, family: str, kind: str):
    """Train one family on one split; return ``(model, TrainResult, test R^2)``."""
    train_ids, test_ids = split(ds, cfg.split_spec(kind))
    xs, us = data_scales(ds, train_ids)
    m = make_model(family, cfg.pattern(), cfg.architecture(), cfg.seed, xs, us)
    res = train(m, ds, train_ids, cfg.train_config())
    X, U, Xn = ds.transitions(test_ids)
    return m, res, r_squared(m, X, U, Xn)


def evaluate(cfg: ExperimentConfig, ds: TrajectoryDataset, families=FAMILIES, keep_models=False):
    """R^2 matrix ``{family: {split: value}}`` (optionally with trained models)."""
    table, models, histories = {}, {}, {}
    for fam in families:
        table[fam] = {}
        for kind in SPLITS:
            m, res, r2 = fit(cfg, ds, fam, kind)
            table[fam][kind] = r2
            histories[(fam, kind)] = res.history
            if keep_models:
                models[(fam, kind)] = m
    return table, models, histories


def format_table(table: dict) -> str:
    rows = [f"{'model':<16}{'interpolation':>15}{'extrapolation':>15}"]
    for fam, r in table.items():
        rows.append(f"{fam:<16}{r['interpolation']:>15.4f}{r['extrapolation']:>15.4f}")
    return "\n".join(rows)


def verify_model(m, pattern, box, n_samples: int = 2000, seed: int = 0) -> dict:
    out = {"structural": None}
    if isinstance(m, ELModel):
        out["structural"] = m.verify_structural(pattern).to_dict()
    sampled = check_sampled(m.predict, pattern, box, n_samples=n_samples, seed=seed, batched=True)
    out["sampled"] = sampled.to_dict()
    out["passed"] = bool(sampled.passed and (out["structural"] is None or out["structural"]["passed"]))
    return out


def default_box(cfg: ExperimentConfig):
    if cfg.plant == "two_tank":
        return (([0.0, 0.0], [0.5, 0.5]), ([0.0], [9.0]))
    lo, hi = plants.POWERTRAIN_INPUT_BOX
    ps = plants.powertrain_plant()
    return ((list(ps.init_low), list(ps.init_high)), (lo.tolist(), hi.tolist()))


def two_tank_mpc(cfg: ExperimentConfig, m: ELModel):
    """Controller, plant map, initial state, step count and tank-2 reference for a step test.

    The full-state reference pairs the tank-2 target with the tank-1 level
    that holds it in steady state.
    """
    d = {"horizon": 10, "w_req": 1.0, "w_u": 1e-4, "reference": 0.3, "u_hi": 9.0,
         "steps": 300, "x0": [0.05, 0.05], **cfg.mpc}
    p = plants.TwoTankParams(**{k: v for k, v in cfg.mpc.get("plant_params", {}).items()})
    ref = float(d["reference"])
    spec_keys = {f.name for f in fields(MpcSpec)} - {"horizon", "n_x", "n_u", "x_req"}
    extra = {k: v for k, v in d.items() if k in spec_keys}
    extra.setdefault("u_nonneg", True)
    spec = MpcSpec(d["horizon"], 2, 1, x_req=[(p.k3 / p.k2) ** 2 * ref, ref], **extra)
    steps = int(d["steps"])
    return (MpcController(m, spec), plants.two_tank_map(p), np.asarray(d["x0"], dtype=float), steps,
            np.full(steps + 1, ref))


def powertrain_speed_profile(steps: int, v_max: float = 10.0, dt: float = 0.1) -> np.ndarray:
    """Accelerate, cruise, brake to standstill (m/s), one value per step + horizon margin."""
    t = np.arange(steps + 40) * dt
    T = steps * dt
    return np.interp(t, [0.0, 0.15 * T, 0.55 * T, 0.8 * T, T], [0.0, v_max, v_max, 0.0, 0.0])


def powertrain_mpc(cfg: ExperimentConfig, m: ELModel):
    d = {"steps": 300, "v_max": 10.0, "x0": [0.0, 0.0, 0.6], **cfg.mpc}
    pc_keys = {f.name for f in fields(PowertrainMpcConfig)}
    pc = PowertrainMpcConfig(**{k: (tuple(map(tuple, v)) if isinstance(v, list) else v)
                                for k, v in d.items() if k in pc_keys})
    prof = np.asarray(d["v_req"], dtype=float) if "v_req" in d else \
        powertrain_speed_profile(int(d["steps"]), d["v_max"])
    ctl = MpcController(m, pc.spec_fn(prof))
    return ctl, plants.powertrain_map(), np.asarray(d["x0"], dtype=float), int(d["steps"]), prof


# --------------------------------------------------------------------------
# CLI plumbing

class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: str, command: str):
        self.cfg, self.out, self.command = cfg, out, command
        self.files = []
        os.makedirs(out, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def json(self, name: str, payload: dict) -> str:
        body = {"config_hash": self.cfg.hash(), **payload}
        with open(self.path(name), "w") as fh:
            json.dump(body, fh, indent=1, sort_keys=True, default=_json_default)
            fh.write("\n")
        return self.add(name)

    def add(self, name: str) -> str:
        self.files.append(name)
        return self.path(name)

    def finish(self) -> None:
        entries = {}
        for name in sorted(set(self.files)):
            with open(self.path(name), "rb") as fh:
                entries[name] = hashlib.sha256(fh.read()).hexdigest()
        with open(self.path("manifest.json"), "w") as fh:
            json.dump({"command": self.command, "config_hash": self.cfg.hash(),
                       "config": self.cfg.to_dict(), "files": entries}, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _load_config(config, seed, overrides) -> ExperimentConfig:
    d = ExperimentConfig.from_json(config).to_dict() if config else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if seed is not None:
        d["seed"] = seed
    return ExperimentConfig(**d)


def _fail(command: str, out: str | None, exc: BaseException, cfg_hash: str | None = None):
    report = {"status": "error", "command": command, "error": type(exc).__name__,
              "message": str(exc), "config_hash": cfg_hash,
              "traceback": traceback.format_exception_only(type(exc), exc)[-1].strip()}
    text = json.dumps(report, indent=1, sort_keys=True)
    click.echo(text, err=True)
    if out:
        with contextlib.suppress(OSError):
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "error.json"), "w") as fh:
                fh.write(text + "\n")
    sys.exit(1)


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def common(f):
    f = click.option("--threads", type=int, default=None, help="BLAS thread limit.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default="runs/out",
                     show_default=True, help="Output directory.")(f)
    f = click.option("--seed", type=int, default=None, help="Master seed (overrides config).")(f)
    f = click.option("--config", type=click.Path(dir_okay=False), default=None,
                     help="ExperimentConfig JSON file.")(f)
    return f


def staged(command: str):
    """Wrap a command body: config loading, thread limits, error report, manifest."""

    def deco(body):
        def run(config, seed, out, threads, **kw):
            cfg = None
            try:
                overrides = {k: kw.pop(k) for k in ("plant", "family", "n_traj") if k in kw}
                max_epochs = kw.pop("max_epochs", None)
                cfg = _load_config(config, seed, overrides)
                if max_epochs is not None:
                    cfg.train = {**cfg.train, "max_epochs": max_epochs}
                r = Run(cfg, out, command)
                with _threads(threads):
                    code = body(r, **kw)
                r.finish()
            except SystemExit:
                raise
            except Exception as exc:
                _fail(command, out, exc, cfg.hash() if cfg else None)
            sys.exit(code or 0)

        run.__name__ = body.__name__
        run.__doc__ = body.__doc__
        return run

    return deco


def _load_dataset(r: Run, data: str | None) -> TrajectoryDataset:
    if data:
        csv_path, man = os.path.join(data, "dataset.csv"), os.path.join(data, "dataset.json")
        for p in (csv_path, man):
            if not os.path.exists(p):
                raise ConfigError(f"missing dataset file {p}")
        return TrajectoryDataset.load(csv_path, man)
    ds = generate(r.cfg)
    _save_dataset(r, ds)
    return ds


def _save_dataset(r: Run, ds: TrajectoryDataset) -> None:
    ds.save(r.path("dataset.csv"))
    r.add("dataset.csv")
    r.json("dataset.json", {"dt": ds.dt, "n_traj": len(ds), **ds.meta})


def _load_model(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"model file {path} does not exist")
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def _closed_loop(r: Run, m: ELModel, plot: bool, prefix: str = "") -> dict:
    builder = two_tank_mpc if r.cfg.plant == "two_tank" else powertrain_mpc
    ctl, plant, x0, steps, ref = builder(r.cfg, m)
    lg = closed_loop(plant, ctl, x0, steps)
    lg.to_csv(r.path(prefix + "closed_loop.csv"))
    r.add(prefix + "closed_loop.csv")
    summary = {
        "steps_completed": lg.steps, "steps_requested": steps, "error": lg.error,
        "all_solved": all(s == "solved" for s in lg.status),
        "final_state": lg.states[-1], "max_primal_res": max(lg.primal_res, default=0.0),
        "cost_xi": [d.cost_xi for d in lg.diagnostics], "cost_x": [d.cost_x for d in lg.diagnostics],
    }
    r.json(prefix + "mpc_summary.json", summary)
    if plot:
        from .svg import line_chart
        k = np.arange(lg.steps + 1)
        if r.cfg.plant == "two_tank":
            panels = [("tank 1 level [m]", {"h1": lg.states[:, 0]}),
                      ("tank 2 level [m]", {"h2": lg.states[:, 1], "ref": ref[: lg.steps + 1]}),
                      ("pump voltage [V]", {"Vp": lg.inputs[:, 0]})]
        else:
            panels = [("speed [m/s]", {"V": lg.states[:, 1], "ref": ref[: lg.steps + 1]}),
                      ("state of charge", {"S": lg.states[:, 2]}),
                      ("torques [N m]", {"engine cmd": lg.inputs[:, 0], "motor": lg.inputs[:, 1],
                                         "brake": lg.inputs[:, 2]})]
        line_chart(panels, k, r.path(prefix + "closed_loop.svg"))
        r.add(prefix + "closed_loop.svg")
    return summary


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Sign-constrained exactly-linearizable models: identification and convex MPC."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


plant_opt = click.option("--plant", type=click.Choice(PLANTS), default=None)
family_opt = click.option("--family", type=click.Choice(FAMILIES), default=None)
ntraj_opt = click.option("--n-traj", "n_traj", type=int, default=None)
epochs_opt = click.option("--max-epochs", "max_epochs", type=int, default=None,
                          help="Epoch budget (early stopping still applies).")


@main.command("generate")
@common
@plant_opt
@ntraj_opt
@staged("generate")
def generate_cmd(r: Run):
    """Simulate a trajectory dataset (CSV + manifest)."""
    ds = generate(r.cfg)
    _save_dataset(r, ds)
    click.echo(f"wrote {len(ds)} trajectories to {r.path('dataset.csv')}")


@main.command("train")
@common
@plant_opt
@family_opt
@ntraj_opt
@epochs_opt
@click.option("--split", "kind", type=click.Choice(SPLITS), default="interpolation", show_default=True)
@click.option("--data", type=click.Path(file_okay=False), default=None,
              help="Directory with dataset.csv/dataset.json (generated when omitted).")
@staged("train")
def train_cmd(r: Run, kind, data):
    """Train one model family on one split."""
    ds = _load_dataset(r, data)
    m, res, r2 = fit(r.cfg, ds, r.cfg.family, kind)
    r.json("model.json", {"family": r.cfg.family, "split": kind, **m.to_dict()})
    with open(r.path("history.csv"), "w") as fh:
        fh.write(res.history_csv())
    r.add("history.csv")
    r.json("train_report.json", {"family": r.cfg.family, "split": kind, "test_r2": r2,
                                 "best_epoch": res.best_epoch, "epochs": len(res.history),
                                 "n_params": m.n_params})
    click.echo(f"{r.cfg.family} ({kind}): test R2 = {r2:.4f}")


@main.command("evaluate")
@common
@plant_opt
@ntraj_opt
@epochs_opt
@click.option("--data", type=click.Path(file_okay=False), default=None)
@click.option("--plot/--no-plot", default=False, help="Also write validation-loss curves (SVG).")
@staged("evaluate")
def evaluate_cmd(r: Run, data, plot):
    """R^2 matrix of all model families on both splits."""
    ds = _load_dataset(r, data)
    _write_table(r, ds, plot)


def _write_table(r: Run, ds: TrajectoryDataset, plot: bool, keep_models: bool = False):
    table, models, hist = evaluate(r.cfg, ds, keep_models=keep_models)
    lines = ["model,interpolation,extrapolation"]
    lines += [f"{f},{v['interpolation']!r},{v['extrapolation']!r}" for f, v in table.items()]
    with open(r.path("r2_table.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    r.add("r2_table.csv")
    r.json("r2_table.json", {"metric": "R2 of one-step state changes, per-component standardized",
                             "table": table})
    if plot:
        from .svg import line_chart
        n = max(len(h) for h in hist.values())
        panels = []
        for kind in SPLITS:
            series = {}
            for fam in table:
                v = np.full(n, np.nan)
                h = np.array([row[2] for row in hist[(fam, kind)]])
                v[: len(h)] = np.log10(h)
                series[fam] = v
            panels.append((f"log10 validation loss ({kind})", series))
        line_chart(panels, np.arange(1, n + 1), r.path("r2_training.svg"))
        r.add("r2_training.svg")
    click.echo(format_table(table))
    return table, models


@main.command("verify")
@common
@plant_opt
@family_opt
@click.option("--model", "model_path", type=click.Path(dir_okay=False), default=None,
              help="Trained model JSON (a fresh model of --family is built when omitted).")
@click.option("--n-samples", type=int, default=2000, show_default=True)
@staged("verify")
def verify_cmd(r: Run, model_path, n_samples):
    """Structural and sampled sign-constraint reports. Exit code 3 when violations exist."""
    cfg = r.cfg
    if model_path:
        m = _load_model(model_path)
    else:
        m = make_model(cfg.family, cfg.pattern(), cfg.architecture(), cfg.seed)
    # EL models are checked against their own pattern, the baseline against the plant's
    pattern = m.pattern if isinstance(m, ELModel) else cfg.pattern()
    rep = verify_model(m, pattern, default_box(cfg), n_samples, cfg.seed)
    r.json("verify_report.json", rep)
    click.echo("passed" if rep["passed"] else "FAILED: see verify_report.json")
    return 0 if rep["passed"] else 3


@main.command("mpc")
@common
@plant_opt
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--plot/--no-plot", default=False)
@staged("mpc")
def mpc_cmd(r: Run, model_path, plot):
    """Closed-loop MPC run with a trained exactly-linearizable model."""
    m = _load_model(model_path)
    if not isinstance(m, ELModel):
        raise ConfigError("MPC needs an exactly-linearizable model")
    s = _closed_loop(r, m, plot)
    click.echo(f"{s['steps_completed']} steps, all solved: {s['all_solved']}")
    return 0 if s["error"] is None else 1


@main.group("reproduce")
def reproduce():
    """End-to-end experiment pipelines."""


@reproduce.command("two-tank")
@common
@ntraj_opt
@epochs_opt
@click.option("--plot/--no-plot", default=True)
@staged("reproduce two-tank")
def reproduce_two_tank(r: Run, plot):
    """Generate data, fill the R^2 table, then run closed-loop MPC."""
    if r.cfg.plant != "two_tank":
        raise ConfigError("reproduce two-tank needs plant = two_tank")
    ds = generate(r.cfg)
    _save_dataset(r, ds)
    _, models = _write_table(r, ds, plot, keep_models=True)
    m = models[("el_signed", "interpolation")]
    r.json("model_el_signed.json", m.to_dict())
    rep = m.verify_structural()
    r.json("verify_report.json", rep.to_dict())
    s = _closed_loop(r, m, plot)
    click.echo(f"MPC: {s['steps_completed']} steps, all solved: {s['all_solved']}, "
               f"final levels {np.round(s['final_state'], 4).tolist()}")


if __name__ == "__main__":
    main()
