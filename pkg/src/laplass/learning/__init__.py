"""Learned dynamics: twin VAEs with a linear latent map, and latent-space planning."""

from __future__ import annotations

import numpy as np

from ..dynamics import ControlBounds, DynamicsModel, make_rng
from ..geometry import Hyperrectangle
from .data import TrajectoryDataset, read_csv, write_csv
from .latent import (
    DecodedControls,
    LatentPlanner,
    LearnedDynamics,
    LearnedModel,
    decode_controls,
    encode_problem,
)
from .mlp import Mlp, init_mlp
from .modelio import load_model, save_model
from .train import PRESETS, Adam, TrainConfig, TrainingError, train_linear_latent, train_vae
from .vae import LinearLatentModel, VaeModel, decode, encode, vae_loss

SMOOTHING = 0.8


def excitation_controls(bounds: ControlBounds, length: int, rng: np.random.Generator, smoothing: float = SMOOTHING):
    """Uniform draws within ``bounds`` passed through a first-order low-pass filter.

    u_0 = r_0, u_t = a u_{t-1} + (1 - a) r_t with r_t ~ U(bounds); convex
    combinations keep every control inside the bounds.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    raw = rng.uniform(bounds.lower, bounds.upper, size=(length, len(bounds.lower)))
    out = np.empty_like(raw)
    out[0] = raw[0]
    for t in range(1, length):
        out[t] = smoothing * out[t - 1] + (1.0 - smoothing) * raw[t]
    return out


def generate_dataset(
    model: DynamicsModel,
    start_box: Hyperrectangle,
    bounds: ControlBounds,
    n_traj: int,
    length: int,
    seed: int,
    smoothing: float = SMOOTHING,
) -> TrajectoryDataset:
    """Simulated trajectories from uniform starts in ``start_box`` under excitation controls."""
    if n_traj < 1 or length < 1:
        raise ValueError("need at least one trajectory of at least one step")
    states = np.empty((n_traj, length, model.state_dim))
    controls = np.empty((n_traj, length, model.control_dim))
    for k in range(n_traj):
        rng = make_rng(seed, 2, k)
        x = rng.uniform(start_box.lower, start_box.upper)
        u = excitation_controls(bounds, length, rng, smoothing)
        for t in range(length):
            states[k, t] = x
            controls[k, t] = u[t]
            x = model.step(x, u[t], rng)
    return TrajectoryDataset(states, controls)


def _round32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(float)


def fit_learned_model(ds: TrajectoryDataset, cfg: TrainConfig = TrainConfig()) -> LearnedModel:
    """Train the VAEs jointly, then refit the latent map on frozen encodings."""
    res = train_vae(ds, cfg)
    latent = train_linear_latent(ds, res.vae_x, res.vae_u, cfg)
    latent = LinearLatentModel(_round32(latent.A), _round32(latent.B))
    return LearnedModel(res.vae_x, res.vae_u, latent, cfg.to_dict(), res.loss_curve)


__all__ = [
    "Adam",
    "DecodedControls",
    "LatentPlanner",
    "LearnedDynamics",
    "LearnedModel",
    "LinearLatentModel",
    "Mlp",
    "PRESETS",
    "TrainConfig",
    "TrainingError",
    "TrajectoryDataset",
    "VaeModel",
    "decode",
    "decode_controls",
    "encode",
    "encode_problem",
    "excitation_controls",
    "fit_learned_model",
    "generate_dataset",
    "init_mlp",
    "load_model",
    "read_csv",
    "save_model",
    "train_linear_latent",
    "train_vae",
    "vae_loss",
    "write_csv",
]
