"""Probabilistic flow tubes: per-timestep Gaussian fits to sampled rollouts."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import DynamicsModel, InitialDistribution, make_rng, rollout_batch, sample_initial

COV_EPS = 1e-9
DEFAULT_SAMPLES = 10_000
# Rollouts are generated in fixed-size chunks, each with its own stream, so
# results do not depend on how chunks are spread over threads.
CHUNK = 1024


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (len(mean), len(mean)):
            raise ValueError("covariance shape does not match mean")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
            raise ValueError("covariance must be symmetric")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def marginal(self, dims: Sequence[int]) -> "GaussianBelief":
        idx = list(dims)
        return GaussianBelief(self.mean[idx], self.cov[np.ix_(idx, idx)])


@dataclass(frozen=True)
class FlowTube:
    beliefs: tuple
    sample_count: int

    def __post_init__(self):
        beliefs = tuple(self.beliefs)
        if not beliefs:
            raise ValueError("flow tube needs at least one belief")
        if len({b.dim for b in beliefs}) != 1:
            raise ValueError("beliefs must share one dimension")
        if self.sample_count < 2:
            raise ValueError("flow tube needs at least two samples")
        object.__setattr__(self, "beliefs", beliefs)

    @property
    def horizon(self) -> int:
        return len(self.beliefs) - 1

    def means(self) -> np.ndarray:
        return np.array([b.mean for b in self.beliefs])

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "means": [b.mean.tolist() for b in self.beliefs],
            "covariances": [b.cov.ravel().tolist() for b in self.beliefs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FlowTube":
        beliefs = []
        for mean, cov in zip(data["means"], data["covariances"]):
            n = len(mean)
            beliefs.append(GaussianBelief(mean, np.reshape(cov, (n, n))))
        return cls(tuple(beliefs), int(data["sample_count"]))


def fit_gaussian(samples, eps: float = COV_EPS) -> GaussianBelief:
    """Sample mean and unbiased covariance, regularized by eps * I."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or len(samples) < 2:
        raise ValueError("need at least two samples to fit a Gaussian")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (len(samples) - 1)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(samples.shape[1])
    return GaussianBelief(mean, cov)


def sample_rollouts(
    model: DynamicsModel,
    x0dist: InitialDistribution,
    controls,
    n_samples: int,
    seed: int,
    threads: int = 1,
) -> np.ndarray:
    """(T+1, N, n) array of sampled trajectories, deterministic in ``seed``."""
    controls = np.asarray(controls, dtype=float)
    starts = list(range(0, n_samples, CHUNK))

    def run(chunk: int) -> np.ndarray:
        rng = make_rng(seed, chunk)
        count = min(CHUNK, n_samples - starts[chunk])
        x0s = sample_initial(x0dist, rng, size=count)
        return rollout_batch(model, x0s, controls, rng)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    return np.concatenate(parts, axis=1)


def compute_pft(
    model: DynamicsModel,
    x0dist: InitialDistribution,
    controls,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    threads: int = 1,
) -> FlowTube:
    """Fit one Gaussian per timestep to ``n_samples`` rollouts of ``controls``."""
    if n_samples < 2:
        raise ValueError("a flow tube needs at least two rollouts")
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or len(controls) == 0:
        raise ValueError("controls must be a nonempty (T, m) array")
    states = sample_rollouts(model, x0dist, controls, n_samples, seed, threads)
    beliefs = tuple(fit_gaussian(states[t]) for t in range(states.shape[0]))
    return FlowTube(beliefs, n_samples)
