"""Trajectory validation and safety-constraint synthesis.

A candidate is rolled out under the accurate model, its flow tube is
risk-assessed, and if the total risk exceeds the bound a halfspace is
placed beyond the riskiest obstacle: starting at the obstacle boundary
and offset sqrt(beta * lambda_max) along the belief's major axis, away
from the obstacle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import DynamicsModel, InitialDistribution
from .flowtube import COV_EPS, DEFAULT_SAMPLES, FlowTube, compute_pft
from .geometry import (
    EllipsoidObstacle,
    EnvBounds,
    GeometryError,
    Halfspace,
    Polytope,
    clip_halfspace_to_box,
    covariance_axes,
    line_intersections,
)
from .risk import RiskReport, total_risk

BETA_INIT = 4.6
BETA_GROWTH = 1.3
BETA_MAX = 50.0
WINDOW = 2


class SynthesisError(RuntimeError):
    """A safety constraint could not be constructed."""


@dataclass(frozen=True)
class SafetyConstraint:
    halfspace: Halfspace
    time_index: int
    window: int
    beta_used: float
    obstacle_index: int
    boundary_point: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be nonnegative")
        if not self.beta_used > 0:
            raise ValueError("beta must be positive")

    def active_steps(self, horizon: int) -> range:
        """Timesteps [m - w, m + w] clipped to 1..horizon."""
        return range(max(1, self.time_index - self.window), min(horizon, self.time_index + self.window) + 1)

    def polytope(self, env: EnvBounds) -> Polytope:
        return clip_halfspace_to_box(self.halfspace, env.box)

    def to_dict(self) -> dict:
        return {
            "normal": self.halfspace.normal.tolist(),
            "offset": self.halfspace.offset,
            "time_index": self.time_index,
            "window": self.window,
            "beta": self.beta_used,
            "obstacle_index": self.obstacle_index,
            "boundary_point": None if self.boundary_point is None else self.boundary_point.tolist(),
            "anchor": None if self.anchor is None else self.anchor.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SafetyConstraint":
        opt = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            Halfspace(np.asarray(data["normal"], dtype=float), data["offset"]),
            int(data["time_index"]),
            int(data["window"]),
            float(data["beta"]),
            int(data["obstacle_index"]),
            opt(data.get("boundary_point")),
            opt(data.get("anchor")),
        )


@dataclass(frozen=True)
class ValidationOutcome:
    report: RiskReport
    constraint: Optional[SafetyConstraint]
    tube: Optional[FlowTube] = field(default=None, compare=False)
    event: Optional[tuple] = None


@dataclass(frozen=True)
class ValidatorParams:
    n_samples: int = DEFAULT_SAMPLES
    beta: float = BETA_INIT
    window: int = WINDOW
    pos_dims: tuple = (0, 1)
    include_initial: bool = False
    threads: int = 1


def riskiest_event(report: RiskReport) -> tuple[int, int]:
    """(obstacle k, time m) of the largest marginal; earliest time, then lowest k, wins ties."""
    if report.per_step.shape[0] == 0:
        raise ValueError("risk report has no obstacles")
    best, best_val = None, -math.inf
    for m in report.steps:
        for k in range(report.per_step.shape[0]):
            val = report.per_step[k, m]
            if val > best_val:
                best, best_val = (k, m), val
    return best


def escalate_beta(beta: float, growth: float = BETA_GROWTH, cap: float = BETA_MAX) -> float:
    """Next beta in the geometric schedule; saturates at ``cap``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return min(growth * beta, cap) if beta < cap else beta


def _anchor(obs: EllipsoidObstacle, mu: np.ndarray, d: np.ndarray, inside: bool):
    """Boundary point reached from mu along -d (or +d when mu is inside)."""
    s1, s2 = line_intersections(obs, mu, d)
    if inside:
        s = s2  # exit point on the mu side, s2 >= 0
    else:
        # roots behind mu along d; nearest one first
        behind = [s for s in (s1, s2) if s <= 0.0]
        if not behind:
            raise GeometryError("ray from the belief mean misses the obstacle")
        s = max(behind)
    return mu + s * d


def compute_safety_constraint(
    tube: FlowTube,
    obs: EllipsoidObstacle,
    m: int,
    beta: float,
    env: Optional[EnvBounds] = None,
    pos_dims: Sequence[int] = (0, 1),
    obstacle_index: int = 0,
    window: int = WINDOW,
) -> SafetyConstraint:
    """Halfspace {x : d.(x - p) >= 0} anchored sqrt(beta*lambda_1) past the obstacle.

    d is the major axis of the time-m covariance, oriented from the
    obstacle center toward the belief mean. If that ray misses the
    obstacle or fails to separate the center, d falls back to the unit
    vector from the center to the mean.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    belief = tube.beliefs[m].marginal(pos_dims)
    mu = belief.mean
    (lam1, v1), *_ = covariance_axes(belief.cov)
    if lam1 <= COV_EPS:
        raise SynthesisError(f"degenerate covariance at t={m} (lambda_max={lam1:.3g})")
    to_mean = mu - obs.center
    inside = float(to_mean @ obs.shape @ to_mean) <= 1.0
    d = v1 if float(v1 @ to_mean) >= 0.0 else -v1
    radius = math.sqrt(beta * lam1)

    def build(direction):
        xk = _anchor(obs, mu, direction, inside)
        p = xk + radius * direction
        return xk, p

    try:
        xk, p = build(d)
        ok = float(d @ (obs.center - p)) < 0.0
    except GeometryError:
        ok = False
    if not ok:
        dist = np.linalg.norm(to_mean)
        if dist > 0.0:
            d = to_mean / dist
        elif not np.isfinite(d).all():
            raise SynthesisError("no usable constraint direction")
        xk, p = build(d)
    hs = Halfspace(-d, float(-d @ p))
    if env is not None:
        # fails early if the constraint leaves no room inside the environment
        try:
            clip_halfspace_to_box(hs, env.box)
        except GeometryError as exc:
            raise SynthesisError("safety constraint excludes the whole environment") from exc
    return SafetyConstraint(hs, m, window, beta, obstacle_index, xk, p)


def validate(
    controls,
    obstacles: Sequence[EllipsoidObstacle],
    delta: float,
    model: DynamicsModel,
    x0dist: InitialDistribution,
    params: ValidatorParams = ValidatorParams(),
    env: Optional[EnvBounds] = None,
    seed: int = 0,
    beta: Optional[float] = None,
) -> ValidationOutcome:
    """Assess a candidate control sequence; return a constraint if it is unsafe."""
    if not 0.0 < delta < 1.0:
        raise ValueError("risk bound must lie in (0, 1)")
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or len(controls) == 0:
        raise ValueError("candidate has no controls")
    tube = compute_pft(model, x0dist, controls, params.n_samples, seed, params.threads)
    report = total_risk(tube, obstacles, params.pos_dims, params.include_initial)
    if report.total <= delta:
        return ValidationOutcome(report, None, tube)
    k, m = riskiest_event(report)
    constraint = compute_safety_constraint(
        tube,
        obstacles[k],
        m,
        params.beta if beta is None else beta,
        env,
        params.pos_dims,
        k,
        params.window,
    )
    return ValidationOutcome(report, constraint, tube, (k, m))
