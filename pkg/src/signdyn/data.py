"""Multi-trajectory datasets and their CSV form.

CSV layout: header ``traj_id,t_index,x_1..x_n,u_1..u_m``; one row per sample
time; the final state row of each trajectory has empty input cells.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    id: int
    states: np.ndarray  # (T+1, n_x)
    inputs: np.ndarray  # (T, n_u)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(len(self.states) - 1, -1)
        if len(self.states) < 2:
            raise ValueError(f"trajectory {self.id} needs at least one transition")


@dataclass
class TrajectoryDataset:
    trajectories: list
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.trajectories:
            raise ValueError("empty dataset")
        n_x, n_u = self.n_x, self.n_u
        for tr in self.trajectories:
            if tr.states.shape[1] != n_x or tr.inputs.shape[1] != n_u:
                raise ValueError(f"trajectory {tr.id} has inconsistent dimensions")

    @property
    def n_x(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def n_u(self) -> int:
        return self.trajectories[0].inputs.shape[1]

    @property
    def ids(self) -> list:
        return [tr.id for tr in self.trajectories]

    def __len__(self) -> int:
        return len(self.trajectories)

    def by_id(self) -> dict:
        return {tr.id: tr for tr in self.trajectories}

    def subset(self, ids) -> "TrajectoryDataset":
        table = self.by_id()
        return TrajectoryDataset([table[i] for i in ids], self.dt, dict(self.meta))

    def transitions(self, ids=None):
        """Stacked (x(t), u(t), x(t+1)) over the selected trajectories."""
        trs = self.trajectories if ids is None else [self.by_id()[i] for i in ids]
        X = np.concatenate([tr.states[:-1] for tr in trs])
        U = np.concatenate([tr.inputs for tr in trs])
        Xn = np.concatenate([tr.states[1:] for tr in trs])
        return X, U, Xn

    def to_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["traj_id", "t_index"] + [f"x_{i + 1}" for i in range(self.n_x)]
                   + [f"u_{j + 1}" for j in range(self.n_u)])
        for tr in self.trajectories:
            T = len(tr.inputs)
            for t in range(T + 1):
                u = [repr(float(v)) for v in tr.inputs[t]] if t < T else [""] * self.n_u
                w.writerow([tr.id, t] + [repr(float(v)) for v in tr.states[t]] + u)
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)
        return None

    @classmethod
    def from_csv(cls, path, dt: float, meta: dict | None = None) -> "TrajectoryDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["traj_id", "t_index"]:
                raise ValueError("dataset CSV must start with traj_id,t_index")
            n_x = sum(h.startswith("x_") for h in header)
            rows: dict = {}
            for row in reader:
                rows.setdefault(int(row[0]), []).append(row)
        trs = []
        for tid, rs in rows.items():
            rs.sort(key=lambda r: int(r[1]))
            states = np.array([[float(v) for v in r[2:2 + n_x]] for r in rs])
            inputs = np.array([[float(v) for v in r[2 + n_x:]] for r in rs[:-1]])
            trs.append(Trajectory(tid, states, inputs))
        return cls(trs, dt, meta or {})

    def save(self, csv_path, manifest_path=None) -> None:
        self.to_csv(csv_path)
        if manifest_path is not None:
            with open(manifest_path, "w") as fh:
                json.dump({"dt": self.dt, "n_traj": len(self), **self.meta}, fh, indent=1,
                          sort_keys=True)

    @classmethod
    def load(cls, csv_path, manifest_path) -> "TrajectoryDataset":
        with open(manifest_path) as fh:
            meta = json.load(fh)
        return cls.from_csv(csv_path, meta["dt"], meta)
