"""Training: joint VAE/latent-dynamics fitting and the linear latent map refit."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from ..dynamics import make_rng
from . import mlp as nn
from .data import TrajectoryDataset
from .vae import LinearLatentModel, VaeModel, encode_stats, model_params, vae_loss

log = logging.getLogger(__name__)

ILL_CONDITIONED = 1e8


class TrainingError(RuntimeError):
    """Training diverged."""


class IllConditionedWarning(RuntimeWarning):
    """Latent regression data cannot identify the dynamics."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    w_rec: float = 1.0
    w_pred: float = 1.0
    w_kl: float = 1e-3
    m_pred: int = 3
    seed: int = 0
    latent_x: int = 4
    latent_u: int = 3
    hidden: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("epochs", "batch_size", "m_pred", "latent_x", "latent_u"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("learning_rate",):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("w_rec", "w_pred", "w_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


PRESETS = {
    "dubins-small": TrainConfig(),
    "blackbird": TrainConfig(latent_x=9, latent_u=7, hidden=(500, 500, 500, 500)),
}


class Adam:
    """First/second-moment adaptive steps, updating parameter arrays in place."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    vae_x: VaeModel
    vae_u: VaeModel
    latent: LinearLatentModel
    loss_curve: list = field(default_factory=list)


def init_models(ds: TrajectoryDataset, cfg: TrainConfig, rng: np.random.Generator):
    n, m = ds.state_dim, ds.control_dim
    mx, sx = ds.state_stats()
    mu, su = ds.control_stats()
    vae_x = VaeModel(
        nn.init_mlp([n, *cfg.hidden, 2 * cfg.latent_x], rng),
        nn.init_mlp([cfg.latent_x, *cfg.hidden, n], rng),
        cfg.latent_x,
        n,
        mx,
        sx,
    )
    vae_u = VaeModel(
        nn.init_mlp([m, *cfg.hidden, 2 * cfg.latent_u], rng),
        nn.init_mlp([cfg.latent_u, *cfg.hidden, m], rng),
        cfg.latent_u,
        m,
        mu,
        su,
    )
    latent = LinearLatentModel(np.eye(cfg.latent_x), np.zeros((cfg.latent_x, cfg.latent_u)))
    return vae_x, vae_u, latent


def _round_float32(params: list) -> None:
    # stored models are float32; keep the in-memory copy identical to what is saved
    for p in params:
        p[...] = p.astype(np.float32)


def train_vae(ds: TrajectoryDataset, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Minibatch Adam on the joint loss; deterministic for a given ``cfg.seed``."""
    rng = make_rng(cfg.seed, 1)
    vae_x, vae_u, latent = init_models(ds, cfg, rng)
    xs, us = ds.windows(cfg.m_pred)
    params = model_params(vae_x, vae_u, latent)
    opt = Adam(params, cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = vae_loss(xs[idx], us[idx], vae_x, vae_u, latent, cfg, rng)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            opt.step(grads.flat())
            total += loss * len(idx)
        curve.append(total / len(order))
        log.debug("epoch %d loss %.6g", epoch, curve[-1])
    _round_float32(params)
    return TrainResult(vae_x, vae_u, latent, curve)


def _rollout_residuals(theta, zx, zu, m: int, lx: int, lu: int, noise):
    A = theta[: lx * lx].reshape(lx, lx)
    B = theta[lx * lx :].reshape(lx, lu)
    z = zx[:, 0]
    out = []
    for j in range(m):
        z = z @ A.T + zu[:, j] @ B.T
        out.append(z - zx[:, j + 1])
    out.append(np.sqrt(m) * np.hstack([A, B]) * noise)
    return np.concatenate(out, axis=None)


def train_linear_latent(
    ds: TrajectoryDataset, vae_x: VaeModel, vae_u: VaeModel, cfg: TrainConfig = TrainConfig()
) -> LinearLatentModel:
    """Fit K = [A B] to the encodings of the data.

    The learned simulator steps from sampled encodings mu + sigma * xi, so
    the fit minimizes the expected squared error under the posterior: for
    one step that is the mean-encoding error plus tr(K diag(S) K^T), with S
    the posterior variances summed over the data, i.e. ridge regression
    whose per-dimension penalty is the posterior variance. Uninformative
    (collapsed) latent dimensions thus receive near-zero weight instead of
    injecting their prior-scale noise. For m_pred > 1 the mean-encoding
    error of j-step rollouts, j = 1..m_pred, re-injecting the encoded
    control at every step, is minimized by nonlinear least squares from
    the one-step solution, with the variance penalty counted once per step.
    With deterministic encoders this is ordinary least squares.
    """
    xs, us = ds.windows(cfg.m_pred)
    nw = len(xs)
    mux, lvx = encode_stats(vae_x, xs.reshape(-1, ds.state_dim))
    muu, lvu = encode_stats(vae_u, us.reshape(-1, ds.control_dim))
    zx = mux.reshape(nw, cfg.m_pred + 1, -1)
    zu = muu.reshape(nw, cfg.m_pred, -1)
    lx, lu = zx.shape[2], zu.shape[2]
    var_x = np.exp(lvx).reshape(nw, cfg.m_pred + 1, -1)[:, 0].sum(axis=0)
    var_u = np.exp(lvu).reshape(nw, cfg.m_pred, -1)[:, 0].sum(axis=0)
    penalty = np.concatenate([var_x, var_u])
    reg = np.hstack([zx[:, 0], zu[:, 0]])
    cond = np.linalg.cond(reg)
    if not cond < ILL_CONDITIONED:
        warnings.warn(
            f"latent regression is ill-conditioned (cond {cond:.3g}); B may be unidentifiable",
            IllConditionedWarning,
            stacklevel=2,
        )
    K = np.linalg.solve(reg.T @ reg + np.diag(penalty), reg.T @ zx[:, 1]).T
    if cfg.m_pred > 1:
        theta0 = np.concatenate([K[:, :lx].ravel(), K[:, lx:].ravel()])
        fit = least_squares(
            _rollout_residuals,
            theta0,
            args=(zx, zu, cfg.m_pred, lx, lu, np.sqrt(penalty)),
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
        )
        theta = fit.x
        return LinearLatentModel(theta[: lx * lx].reshape(lx, lx), theta[lx * lx :].reshape(lx, lu))
    return LinearLatentModel(K[:, :lx], K[:, lx:])
