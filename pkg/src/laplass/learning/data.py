"""Trajectory datasets: CSV I/O, normalization statistics and training windows."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-12


@dataclass
class TrajectoryDataset:
    """N trajectories of M rows, each row a (state, control) pair."""

    states: np.ndarray  # (N, M, n)
    controls: np.ndarray  # (N, M, m)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 3 or self.controls.ndim != 3:
            raise ValueError("states and controls must be (N, M, dim) arrays")
        if self.states.shape[:2] != self.controls.shape[:2]:
            raise ValueError("states and controls must share trajectory count and length")
        if self.states.shape[0] == 0 or self.states.shape[1] == 0:
            raise ValueError("dataset is empty")
        if not (np.isfinite(self.states).all() and np.isfinite(self.controls).all()):
            raise ValueError("dataset contains non-finite values")

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def length(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[2]

    @property
    def n_transitions(self) -> int:
        return self.n_traj * (self.length - 1)

    def state_stats(self):
        return _stats(self.states.reshape(-1, self.state_dim))

    def control_stats(self):
        # the last control of each trajectory is never applied
        return _stats(self.controls[:, :-1].reshape(-1, self.control_dim) if self.length > 1 else self.controls[:, 0])

    def windows(self, m: int):
        """All (x_t..x_{t+m}, u_t..u_{t+m-1}) windows, ordered by trajectory then start."""
        if m < 1:
            raise ValueError("window length must be at least 1")
        if self.length < m + 1:
            raise ValueError(f"trajectories of length {self.length} hold no {m}-step window")
        starts = self.length - m
        idx = np.arange(starts)[:, None] + np.arange(m + 1)[None, :]
        xs = self.states[:, idx].reshape(-1, m + 1, self.state_dim)
        us = self.controls[:, idx[:, :m]].reshape(-1, m, self.control_dim)
        return xs, us


def _stats(flat: np.ndarray):
    """Per-dimension mean and std; constant dimensions get std 1 so they normalize to 0."""
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > STD_FLOOR, std, 1.0)
    return mean, std


def normalize(x, mean, std):
    return (np.asarray(x, dtype=float) - mean) / std


def denormalize(xn, mean, std):
    return np.asarray(xn, dtype=float) * std + mean


def header(n: int, m: int) -> list[str]:
    return ["traj_id", "t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]


def dataset_to_csv(ds: TrajectoryDataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(header(ds.state_dim, ds.control_dim)) + "\n")
    for k in range(ds.n_traj):
        for t in range(ds.length):
            vals = [f"{v:.17g}" for v in np.r_[ds.states[k, t], ds.controls[k, t]]]
            buf.write(f"{k},{t}," + ",".join(vals) + "\n")
    return buf.getvalue()


def write_csv(ds: TrajectoryDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds))


def read_csv(path) -> TrajectoryDataset:
    """Parse the ``traj_id, t, x0.., u0..`` format; rows may come in any order.

    Lines starting with ``#`` are comments and are skipped.
    """
    with open(path, newline="") as fh:
        kept = [(i, line) for i, line in enumerate(fh, start=1) if not line.startswith("#")]
        numbers = [i for i, _ in kept]
        reader = csv.reader(line for _, line in kept)
        try:
            head = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty dataset file") from None
        if head[:2] != ["traj_id", "t"]:
            raise ValueError(f"{path}: header must start with traj_id,t")
        xcols = [h for h in head[2:] if h.startswith("x")]
        ucols = [h for h in head[2:] if h.startswith("u")]
        if head[2:] != xcols + ucols or xcols != [f"x{i}" for i in range(len(xcols))] or ucols != [
            f"u{i}" for i in range(len(ucols))
        ]:
            raise ValueError(f"{path}: columns must be x0..x(n-1) then u0..u(m-1)")
        rows = {}
        for lineno, row in zip(numbers[1:], reader):
            if not row:
                continue
            if len(row) != len(head):
                raise ValueError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
            key = (int(row[0]), int(row[1]))
            if key in rows:
                raise ValueError(f"{path}:{lineno}: duplicate row for trajectory {key[0]} step {key[1]}")
            rows[key] = np.array([float(v) for v in row[2:]])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    ids = sorted({k for k, _ in rows})
    lengths = {i: sorted(t for k, t in rows if k == i) for i in ids}
    length = len(lengths[ids[0]])
    for i in ids:
        if lengths[i] != list(range(length)):
            raise ValueError(f"{path}: trajectory {i} must have steps 0..{length - 1}")
    n = len(xcols)
    data = np.array([[rows[(i, t)] for t in range(length)] for i in ids])
    return TrajectoryDataset(data[..., :n], data[..., n:])
