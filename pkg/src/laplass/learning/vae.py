"""State/control variational autoencoders and the linear latent dynamics.

Each VAE z-scores its input before the encoder and undoes it after the
decoder, so callers work in physical units throughout. The encoder emits
(mu, log sigma^2) for a diagonal Gaussian over the latent code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import mlp as nn


@dataclass
class VaeModel:
    encoder: nn.Mlp
    decoder: nn.Mlp
    latent_dim: int
    input_dim: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.encoder.input_dim != self.input_dim or self.decoder.output_dim != self.input_dim:
            raise ValueError("encoder input / decoder output must equal input_dim")
        if self.encoder.output_dim != 2 * self.latent_dim:
            raise ValueError("encoder must output (mu, log variance) pairs")
        if self.decoder.input_dim != self.latent_dim:
            raise ValueError("decoder input must equal latent_dim")
        if self.mean.shape != (self.input_dim,) or self.std.shape != (self.input_dim,):
            raise ValueError("normalization stats must match input_dim")
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")

    @classmethod
    def identity(cls, dim: int, log_var: float = -40.0) -> "VaeModel":
        """Exact autoencoder z = x with (almost) zero posterior spread."""
        enc = nn.linear_mlp(np.hstack([np.eye(dim), np.zeros((dim, dim))]), np.r_[np.zeros(dim), np.full(dim, log_var)])
        dec = nn.linear_mlp(np.eye(dim), np.zeros(dim))
        return cls(enc, dec, dim, dim, np.zeros(dim), np.ones(dim))

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, xn):
        return np.asarray(xn, dtype=float) * self.std + self.mean

    def nets(self) -> tuple:
        return self.encoder, self.decoder

    def copy(self) -> "VaeModel":
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.latent_dim, self.input_dim, self.mean.copy(), self.std.copy())


@dataclass
class LinearLatentModel:
    """z_x' = A z_x + B z_u"""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[0] != self.A.shape[0]:
            raise ValueError("A must be square and B must have matching rows")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all()):
            raise ValueError("latent dynamics must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    def step(self, zx, zu):
        return np.asarray(zx) @ self.A.T + np.asarray(zu) @ self.B.T


def _batch(x, dim: int):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != dim:
        raise ValueError(f"expected {dim}-dimensional input, got {x.shape}")
    return x2, single


def encode_stats(vae: VaeModel, x):
    """(mu, log variance) of the latent posterior for x (single vector or batch)."""
    x2, single = _batch(x, vae.input_dim)
    h = nn.apply(vae.encoder, vae.normalize(x2))
    mu, lv = h[:, : vae.latent_dim], h[:, vae.latent_dim :]
    return (mu[0], lv[0]) if single else (mu, lv)


def encode(vae: VaeModel, x, mode: str = "mean", rng: Optional[np.random.Generator] = None):
    """Latent code of x: the posterior mean, or a reparameterized draw mu + sigma * xi."""
    mu, lv = encode_stats(vae, x)
    if mode == "mean":
        return mu
    if mode != "sample":
        raise ValueError("mode must be 'mean' or 'sample'")
    if rng is None:
        raise ValueError("sample mode needs a random generator")
    return mu + np.exp(0.5 * lv) * rng.standard_normal(np.shape(mu))


def encode_jacobian(vae: VaeModel, x) -> np.ndarray:
    """d(posterior mean)/dx, shape (latent_dim, input_dim) or (B, latent_dim, input_dim)."""
    x2, single = _batch(x, vae.input_dim)
    out, acts = nn.forward(vae.encoder, vae.normalize(x2))
    jac = np.empty((len(x2), vae.latent_dim, vae.input_dim))
    for j in range(vae.latent_dim):
        seed = np.zeros_like(out)
        seed[:, j] = 1.0
        _, grad_in = nn.backward(vae.encoder, acts, seed)
        jac[:, j] = grad_in / vae.std
    return jac[0] if single else jac


def decode_jacobian(vae: VaeModel, z) -> np.ndarray:
    """d(decoded x)/dz, shape (input_dim, latent_dim) or (B, input_dim, latent_dim)."""
    z2, single = _batch(z, vae.latent_dim)
    out, acts = nn.forward(vae.decoder, z2)
    jac = np.empty((len(z2), vae.input_dim, vae.latent_dim))
    for i in range(vae.input_dim):
        seed = np.zeros_like(out)
        seed[:, i] = vae.std[i]
        _, grad_in = nn.backward(vae.decoder, acts, seed)
        jac[:, i] = grad_in
    return jac[0] if single else jac


def decode(vae: VaeModel, z):
    z2, single = _batch(z, vae.latent_dim)
    out = vae.denormalize(nn.apply(vae.decoder, z2))
    return out[0] if single else out


def kl_to_standard(mu, lv) -> np.ndarray:
    """Per-row KL(N(mu, diag e^lv) || N(0, I))."""
    return 0.5 * np.sum(mu**2 + np.exp(lv) - 1.0 - lv, axis=-1)


@dataclass
class VaeGrads:
    enc_x: list
    dec_x: list
    enc_u: list
    dec_u: list
    A: np.ndarray
    B: np.ndarray

    def flat(self) -> list:
        return [*self.enc_x, *self.dec_x, *self.enc_u, *self.dec_u, self.A, self.B]


def model_params(vae_x: VaeModel, vae_u: VaeModel, latent: LinearLatentModel) -> list:
    """Trainable arrays in the same order as ``VaeGrads.flat``."""
    return [
        *vae_x.encoder.params(),
        *vae_x.decoder.params(),
        *vae_u.encoder.params(),
        *vae_u.decoder.params(),
        latent.A,
        latent.B,
    ]


def vae_loss(xs, us, vae_x: VaeModel, vae_u: VaeModel, latent: LinearLatentModel, cfg, rng=None):
    """Joint loss on a batch of windows and its exact gradients.

    xs: (B, m+1, n) states x_t..x_{t+m}; us: (B, m, k) controls u_t..u_{t+m-1}.

        L = w_rec (|x_t - x^_t|^2 + |u_t - u^_t|^2)
            + w_pred sum_j |x_{t+j} - dec(z_j)|^2,   z_j = A z_{j-1} + B z_u,{j-1}
            + w_kl (KL_x + KL_u),

    averaged over the batch, in normalized units. With ``rng`` the latent
    codes are reparameterized draws; without it they are the posterior means.
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    mp = cfg.m_pred
    if xs.ndim != 3 or us.ndim != 3 or xs.shape[1] < mp + 1 or us.shape[1] < mp:
        raise ValueError(f"windows must hold at least {mp + 1} states and {mp} controls")
    xs = xs[:, : mp + 1]
    us = us[:, :mp]
    nb = xs.shape[0]
    lx, lu = vae_x.latent_dim, vae_u.latent_dim
    A, B = latent.A, latent.B
    xn = vae_x.normalize(xs)
    un = vae_u.normalize(us)

    # encoders
    ex_out, ex_acts = nn.forward(vae_x.encoder, xn[:, 0])
    mu_x, lv_x = ex_out[:, :lx], ex_out[:, lx:]
    u_stack = un.transpose(1, 0, 2).reshape(mp * nb, -1)
    eu_out, eu_acts = nn.forward(vae_u.encoder, u_stack)
    mu_u, lv_u = eu_out[:, :lu], eu_out[:, lu:]
    if rng is None:
        eps_x = np.zeros_like(mu_x)
        eps_u = np.zeros_like(mu_u)
    else:
        eps_x = rng.standard_normal(mu_x.shape)
        eps_u = rng.standard_normal(mu_u.shape)
    sd_x = np.exp(0.5 * lv_x)
    sd_u = np.exp(0.5 * lv_u)
    z0 = mu_x + sd_x * eps_x
    zu = mu_u + sd_u * eps_u

    # latent rollout and state decoding (reconstruction at j = 0, prediction after)
    zs = [z0]
    for j in range(mp):
        zs.append(latent.step(zs[-1], zu[j * nb : (j + 1) * nb]))
    dx_out, dx_acts = nn.forward(vae_x.decoder, np.vstack(zs))
    target = xn.transpose(1, 0, 2).reshape((mp + 1) * nb, -1)
    res_x = dx_out - target
    row_w = np.repeat(np.r_[cfg.w_rec, np.full(mp, cfg.w_pred)], nb)

    du_out, du_acts = nn.forward(vae_u.decoder, zu[:nb])
    res_u = du_out - un[:, 0]

    kl_x = kl_to_standard(mu_x, lv_x)
    kl_u = kl_to_standard(mu_u[:nb], lv_u[:nb])
    loss = (
        float(np.sum(row_w * np.sum(res_x**2, axis=1))) / nb
        + cfg.w_rec * float(np.sum(res_u**2)) / nb
        + cfg.w_kl * float(np.sum(kl_x) + np.sum(kl_u)) / nb
    )

    # reverse pass
    g_dec_x, g_zs = nn.backward(vae_x.decoder, dx_acts, 2.0 * row_w[:, None] * res_x / nb)
    g_dec_u, g_zu0 = nn.backward(vae_u.decoder, du_acts, 2.0 * cfg.w_rec * res_u / nb)
    g_z = [g_zs[j * nb : (j + 1) * nb].copy() for j in range(mp + 1)]
    g_zu = np.zeros_like(zu)
    g_zu[:nb] += g_zu0
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    for j in range(mp, 0, -1):
        zu_prev = zu[(j - 1) * nb : j * nb]
        gA += g_z[j].T @ zs[j - 1]
        gB += g_z[j].T @ zu_prev
        g_z[j - 1] += g_z[j] @ A
        g_zu[(j - 1) * nb : j * nb] += g_z[j] @ B

    kw = cfg.w_kl / nb
    g_mu_x = g_z[0] + kw * mu_x
    g_lv_x = g_z[0] * eps_x * 0.5 * sd_x + kw * 0.5 * (np.exp(lv_x) - 1.0)
    g_enc_x, _ = nn.backward(vae_x.encoder, ex_acts, np.hstack([g_mu_x, g_lv_x]))

    g_mu_u = g_zu.copy()
    g_lv_u = g_zu * eps_u * 0.5 * sd_u
    g_mu_u[:nb] += kw * mu_u[:nb]
    g_lv_u[:nb] += kw * 0.5 * (np.exp(lv_u[:nb]) - 1.0)
    g_enc_u, _ = nn.backward(vae_u.encoder, eu_acts, np.hstack([g_mu_u, g_lv_u]))

    return loss, VaeGrads(g_enc_x, g_dec_x, g_enc_u, g_dec_u, gA, gB)
