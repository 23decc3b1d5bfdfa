"""Collision risk of a flow tube against ellipsoidal obstacles.

Per-timestep marginals P(Q(x_t) <= 1) use the Liu-Tang-Zhang
approximation: the quadratic form Q is replaced by a noncentral
chi-square with matching skewness (and kurtosis where possible), then
standardized. Marginals are combined over time assuming independence,
and per-obstacle risks are summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import DynamicsModel, InitialDistribution
from .flowtube import FlowTube, GaussianBelief, sample_rollouts
from .geometry import EllipsoidObstacle
from .special import ncx2_cdf


class RiskError(ArithmeticError):
    """Numerical failure in the risk computation (e.g. degenerate covariance)."""


@dataclass(frozen=True)
class QuadFormCumulants:
    """First four cumulants of Q(x) = (x - c)^T A (x - c), x ~ N(mu, Sigma)."""

    c1: float
    c2: float
    c3: float
    c4: float


@dataclass(frozen=True)
class RiskReport:
    """per_step[k, t] is the marginal collision probability with obstacle k
    at time t; only times in ``steps`` enter the aggregation."""

    per_obstacle: tuple
    per_step: np.ndarray
    total: float
    steps: tuple

    def to_dict(self) -> dict:
        return {
            "per_obstacle": list(self.per_obstacle),
            "per_step": self.per_step.tolist(),
            "total": self.total,
            "steps": list(self.steps),
        }


def quadform_cumulants(belief: GaussianBelief, obs: EllipsoidObstacle) -> QuadFormCumulants:
    if belief.dim != obs.dim:
        raise ValueError(f"belief is {belief.dim}-D, obstacle is {obs.dim}-D")
    sigma = belief.cov
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise RiskError("belief covariance is not positive definite") from exc
    a = obs.shape
    d = belief.mean - obs.center
    m = a @ sigma
    out = []
    power = np.eye(len(d))  # (A Sigma)^(k-1)
    fact = 1.0
    for k in range(1, 5):
        ad = a @ d
        term = np.trace(power @ m) + k * float(d @ power @ ad)
        out.append(2.0 ** (k - 1) * fact * term)
        power = power @ m
        fact *= k
    return QuadFormCumulants(*out)


def ltz_parameters(cum: QuadFormCumulants):
    """Surrogate (dof, noncentrality, mu_Q, sigma_Q, mu_chi, sigma_chi)."""
    if not cum.c2 > 0.0:
        raise RiskError("quadratic form has nonpositive variance")
    # normalized sums c_k = kappa_k / (2^(k-1) (k-1)!)
    c1 = cum.c1
    c2 = cum.c2 / 2.0
    c3 = cum.c3 / 8.0
    c4 = cum.c4 / 48.0
    s1 = c3 / c2**1.5
    s2 = c4 / c2**2
    if s1 * s1 > s2:
        a = 1.0 / (s1 - math.sqrt(s1 * s1 - s2))
        nc = s1 * a**3 - a * a
        dof = a * a - 2.0 * nc
    else:
        a = 1.0 / s1
        nc = 0.0
        dof = c2**3 / c3**2
    dof = max(dof, 1e-12)
    return dof, nc, c1, math.sqrt(2.0 * c2), dof + nc, math.sqrt(2.0) * a


def ltz_cdf(cum: QuadFormCumulants, threshold: float) -> float:
    """Approximate P(Q <= threshold) from the cumulants of Q."""
    dof, nc, mu_q, sigma_q, mu_chi, sigma_chi = ltz_parameters(cum)
    x = (threshold - mu_q) / sigma_q * sigma_chi + mu_chi
    return min(max(ncx2_cdf(x, dof, nc), 0.0), 1.0)


def marginal_collision_prob(belief: GaussianBelief, obs: EllipsoidObstacle) -> float:
    return ltz_cdf(quadform_cumulants(belief, obs), 1.0)


def risk_steps(tube: FlowTube, include_initial: bool = False) -> tuple:
    return tuple(range(0 if include_initial else 1, tube.horizon + 1))


def union_over_time(marginals: Sequence[float]) -> float:
    """1 - prod(1 - p_t): probability of at least one independent event."""
    return 1.0 - float(np.prod([1.0 - p for p in marginals]))


def _marginal_row(tube: FlowTube, obs, steps, dims) -> np.ndarray:
    row = np.zeros(len(tube.beliefs))
    for t in steps:
        belief = tube.beliefs[t]
        if dims is not None:
            belief = belief.marginal(dims)
        row[t] = marginal_collision_prob(belief, obs)
    return row


def tube_obstacle_risk(
    tube: FlowTube,
    obs: EllipsoidObstacle,
    dims: Optional[Sequence[int]] = None,
    include_initial: bool = False,
) -> float:
    steps = risk_steps(tube, include_initial)
    row = _marginal_row(tube, obs, steps, dims)
    return union_over_time(row[list(steps)])


def total_risk(
    tube: FlowTube,
    obstacles: Sequence[EllipsoidObstacle],
    dims: Optional[Sequence[int]] = None,
    include_initial: bool = False,
) -> RiskReport:
    """Per-obstacle risks and their sum clamped to [0, 1].

    The sum over obstacles bounds the probability of hitting any of them
    from above, so the total is conservative when obstacles are many.
    """
    steps = risk_steps(tube, include_initial)
    idx = list(steps)
    per_step = np.zeros((len(obstacles), len(tube.beliefs)))
    per_obstacle = []
    for k, obs in enumerate(obstacles):
        per_step[k] = _marginal_row(tube, obs, steps, dims)
        per_obstacle.append(union_over_time(per_step[k, idx]))
    total = min(max(sum(per_obstacle), 0.0), 1.0)
    per_step.setflags(write=False)
    return RiskReport(tuple(per_obstacle), per_step, total, steps)


def collision_mask(states: np.ndarray, obstacles, dims=None) -> np.ndarray:
    """Boolean (T+1, N) mask of samples inside any obstacle."""
    pos = states if dims is None else states[..., list(dims)]
    hit = np.zeros(pos.shape[:-1], dtype=bool)
    for obs in obstacles:
        diff = pos - obs.center
        q = np.einsum("...i,ij,...j->...", diff, obs.shape, diff)
        hit |= q <= 1.0
    return hit


def mc_risk_oracle(
    model: DynamicsModel,
    x0dist: InitialDistribution,
    controls,
    obstacles: Sequence[EllipsoidObstacle],
    n_samples: int,
    seed: int,
    dims: Optional[Sequence[int]] = None,
    include_initial: bool = False,
    threads: int = 1,
) -> float:
    """Fraction of sampled rollouts that enter any obstacle at any counted step."""
    if n_samples < 1:
        raise ValueError("need at least one rollout")
    if not obstacles:
        return 0.0
    states = sample_rollouts(model, x0dist, controls, n_samples, seed, threads)
    hit = collision_mask(states, obstacles, dims)
    first = 0 if include_initial else 1
    return float(np.mean(np.any(hit[first:], axis=0)))
