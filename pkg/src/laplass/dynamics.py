"""Stochastic agent dynamics and the sampling primitives around them.

Random streams come from numpy's counter-based Philox generator keyed by a
64-bit master seed plus integer stream labels, so any sub-computation can
derive its own reproducible stream without coordinating with others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox stream for (seed, *stream)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


@runtime_checkable
class DynamicsModel(Protocol):
    state_dim: int
    control_dim: int

    def step(self, x: np.ndarray, u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...

    def step_batch(self, xs: np.ndarray, u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Advance an (N, n) batch of states under one shared control."""
        ...


@dataclass(frozen=True)
class DubinsParams:
    dt: float = 0.1
    noise_half_width: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.noise_half_width >= 0:
            raise ValueError("noise half-width must be nonnegative")


def dubins_step(x, u, params: DubinsParams, noise=(0.0, 0.0)) -> np.ndarray:
    """One step of the planar unicycle with additive speed/heading noise."""
    px, py = x
    v, theta = u
    wv, wth = noise
    speed = v + wv
    heading = theta + wth
    return np.array(
        [px + params.dt * speed * math.cos(heading), py + params.dt * speed * math.sin(heading)]
    )


def sample_noise(params: DubinsParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """(omega_v, omega_theta) drawn i.i.d. uniform on [-w, w]."""
    w = params.noise_half_width
    shape = (2,) if size is None else (size, 2)
    if w == 0.0:
        return np.zeros(shape)
    return rng.uniform(-w, w, size=shape)


@dataclass(frozen=True)
class DubinsModel:
    """Closed-form stochastic Dubins agent: state (x, y), control (v, theta)."""

    params: DubinsParams = DubinsParams()
    state_dim: int = 2
    control_dim: int = 2

    def step(self, x, u, rng):
        return dubins_step(x, u, self.params, sample_noise(self.params, rng))

    def step_batch(self, xs, u, rng):
        xs = np.asarray(xs, dtype=float)
        noise = sample_noise(self.params, rng, size=len(xs))
        speed = u[0] + noise[:, 0]
        heading = u[1] + noise[:, 1]
        out = np.empty_like(xs)
        out[:, 0] = xs[:, 0] + self.params.dt * speed * np.cos(heading)
        out[:, 1] = xs[:, 1] + self.params.dt * speed * np.sin(heading)
        return out


@dataclass(frozen=True)
class ControlBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("control bounds must be equal-length vectors")
        if np.any(lo > hi):
            raise ValueError("control bounds need lower <= upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def clamp(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)


@dataclass(frozen=True)
class InitialDistribution:
    """Distribution of the initial state.

    kind "point" uses ``mean``; "uniform-box" uses ``lower``/``upper``;
    "gaussian" uses ``mean``/``cov``.
    """

    kind: str
    mean: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    cov: np.ndarray | None = None

    def __post_init__(self):
        for name in ("mean", "lower", "upper", "cov"):
            val = getattr(self, name)
            if val is not None:
                arr = np.array(val, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.kind == "point":
            if self.mean is None:
                raise ValueError("point distribution needs a mean")
        elif self.kind == "uniform-box":
            if self.lower is None or self.upper is None:
                raise ValueError("uniform-box distribution needs lower and upper")
            if np.any(self.lower > self.upper):
                raise ValueError("uniform-box needs lower <= upper")
        elif self.kind == "gaussian":
            if self.mean is None or self.cov is None:
                raise ValueError("gaussian distribution needs mean and cov")
            if np.min(np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))) < -1e-12:
                raise ValueError("gaussian covariance must be PSD")
        else:
            raise ValueError(f"unknown initial distribution kind {self.kind!r}")

    @classmethod
    def point(cls, x) -> "InitialDistribution":
        return cls("point", mean=x)

    @classmethod
    def uniform_box(cls, lower, upper) -> "InitialDistribution":
        return cls("uniform-box", lower=lower, upper=upper)

    @classmethod
    def gaussian(cls, mean, cov) -> "InitialDistribution":
        return cls("gaussian", mean=mean, cov=cov)

    @property
    def dim(self) -> int:
        return len(self.lower if self.kind == "uniform-box" else self.mean)

    @property
    def center(self) -> np.ndarray:
        if self.kind == "uniform-box":
            return 0.5 * (self.lower + self.upper)
        return np.array(self.mean)

    def shifted(self, offset) -> "InitialDistribution":
        offset = np.asarray(offset, dtype=float)
        if self.kind == "uniform-box":
            return InitialDistribution.uniform_box(self.lower + offset, self.upper + offset)
        if self.kind == "point":
            return InitialDistribution.point(self.mean + offset)
        return InitialDistribution.gaussian(self.mean + offset, self.cov)


def sample_initial(dist: InitialDistribution, rng: np.random.Generator, size=None) -> np.ndarray:
    n = dist.dim
    shape = (n,) if size is None else (size, n)
    if dist.kind == "point":
        return np.broadcast_to(dist.mean, shape).copy()
    if dist.kind == "uniform-box":
        return rng.uniform(dist.lower, dist.upper, size=shape)
    if not np.any(dist.cov):
        return np.broadcast_to(dist.mean, shape).copy()
    # eigen-factor tolerates singular PSD covariances
    vals, vecs = np.linalg.eigh(0.5 * (dist.cov + dist.cov.T))
    factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    xi = rng.standard_normal(size=shape)
    return dist.mean + xi @ factor.T


def _check_controls(model, controls) -> np.ndarray:
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or len(controls) < 1:
        raise ValueError("controls must be a nonempty (T, m) sequence")
    if controls.shape[1] != model.control_dim:
        raise ValueError(f"controls have {controls.shape[1]} channels, model expects {model.control_dim}")
    return controls


def rollout(model: DynamicsModel, x0, controls: Sequence, rng: np.random.Generator) -> np.ndarray:
    """States x_0..x_T obtained by stepping the model through ``controls``."""
    controls = _check_controls(model, controls)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.state_dim,):
        raise ValueError(f"x0 has shape {x0.shape}, model state is {model.state_dim}-D")
    states = np.empty((len(controls) + 1, model.state_dim))
    states[0] = x0
    for t, u in enumerate(controls):
        states[t + 1] = model.step(states[t], u, rng)
    return states


def rollout_batch(model: DynamicsModel, x0s, controls, rng: np.random.Generator) -> np.ndarray:
    """Vectorized rollout of N initial states; returns (T+1, N, n).

    Models that carry hidden state across steps provide their own
    ``sample_trajectories(x0s, controls, rng)``, which is used instead of
    chaining ``step_batch``.
    """
    controls = _check_controls(model, controls)
    x0s = np.asarray(x0s, dtype=float)
    if x0s.ndim != 2 or x0s.shape[1] != model.state_dim:
        raise ValueError("x0s must be (N, state_dim)")
    custom = getattr(model, "sample_trajectories", None)
    if custom is not None:
        return custom(x0s, controls, rng)
    states = np.empty((len(controls) + 1,) + x0s.shape)
    states[0] = x0s
    for t, u in enumerate(controls):
        states[t + 1] = model.step_batch(states[t], u, rng)
    return states


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for (seed, *keys)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)
