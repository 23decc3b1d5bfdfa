"""Generate-and-test planning loop.

Each iteration plans a deterministic candidate under the current set of
safety constraints, validates it against the stochastic model, and either
returns it or folds the validator's new constraint back into the planner.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import ControlBounds, DynamicsModel, InitialDistribution, derive_seed
from .flowtube import DEFAULT_SAMPLES, FlowTube
from .geometry import EllipsoidObstacle, EnvBounds, Hyperrectangle, Polytope
from .optimizer import (
    CandidateTrajectory,
    InfeasibleError,
    LinearDynamics,
    TrajOptProblem,
    embed_halfspace,
    plan_candidate,
)
from .risk import RiskReport
from .validator import (
    BETA_GROWTH,
    BETA_INIT,
    BETA_MAX,
    WINDOW,
    SafetyConstraint,
    SynthesisError,
    ValidatorParams,
    compute_safety_constraint,
    escalate_beta,
    validate,
)

log = logging.getLogger(__name__)

SAFE = "safe"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

REAL = "real-linearized"
LATENT = "latent"

__all__ = [
    "CandidateTrajectory",
    "EngineConfig",
    "PlanProblem",
    "PlanResult",
    "RealLinearizedPlanner",
    "objective_report",
    "solve",
]


@dataclass(frozen=True)
class PlanProblem:
    initial: InitialDistribution
    goal: Polytope
    obstacles: tuple
    env: EnvBounds
    control_bounds: ControlBounds
    horizon: int
    delta: float
    control_weight: Optional[np.ndarray] = None
    state_weight: Optional[np.ndarray] = None
    mode: str = REAL
    pos_dims: tuple = (0, 1)
    # explicit nominal start for the planner; defaults to the initial distribution's center
    start: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("risk bound delta must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.mode not in (REAL, LATENT):
            raise ValueError(f"unknown planning mode {self.mode!r}")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "pos_dims", tuple(self.pos_dims))
        if self.goal.vertices is not None:
            centroid = self.goal.vertex_centroid()[list(self.pos_dims)]
            for k, obs in enumerate(self.obstacles):
                if obs.contains(centroid):
                    log.warning("goal region centroid lies inside obstacle %d", k)

    @property
    def nominal_start(self) -> np.ndarray:
        return self.initial.center if self.start is None else np.asarray(self.start, dtype=float)


@dataclass(frozen=True)
class EngineConfig:
    max_iterations: int = 25
    n_samples: int = DEFAULT_SAMPLES
    beta_init: float = BETA_INIT
    beta_growth: float = BETA_GROWTH
    beta_max: float = BETA_MAX
    window: int = WINDOW
    scp_passes: int = 2
    plan_with_obstacles: bool = True
    include_initial: bool = False
    threads: int = 1
    qp_tol: float = 1e-6
    qp_max_iter: int = 20000
    # linearize obstacles about the previous candidate instead of re-solving from scratch
    warm_start: bool = False


@dataclass
class IterationRecord:
    iteration: int
    risk: float
    objective: float
    event: Optional[tuple]
    beta: Optional[float]


@dataclass
class PlanResult:
    status: str
    trajectory: Optional[CandidateTrajectory]
    report: Optional[RiskReport]
    iterations: int
    constraints_used: list
    wall_time: float
    seed: int
    history: list = field(default_factory=list)
    tube: Optional[FlowTube] = None
    message: str = ""

    def to_dict(self) -> dict:
        """JSON-ready record; wall time is left out so equal runs serialize identically."""
        traj = self.trajectory
        return {
            "status": self.status,
            "message": self.message,
            "seed": self.seed,
            "iterations": self.iterations,
            "objective": None if traj is None else traj.objective,
            "controls": None if traj is None else traj.controls.tolist(),
            "nominal_states": None if traj is None else traj.nominal_states.tolist(),
            "report": None if self.report is None else self.report.to_dict(),
            "constraints": [c.to_dict() for c in self.constraints_used],
            "history": [
                {
                    "iteration": h.iteration,
                    "risk": h.risk,
                    "objective": h.objective,
                    "event": None if h.event is None else list(h.event),
                    "beta": h.beta,
                }
                for h in self.history
            ],
            "tube": None if self.tube is None else self.tube.to_dict(),
        }


def objective_report(trajectory: CandidateTrajectory, problem: PlanProblem | None = None) -> float:
    """Real-space objective sum_t u_t^T R u_t (R = I gives sum v^2 + theta^2)."""
    controls = np.asarray(trajectory.controls, dtype=float)
    m = controls.shape[1]
    weight = np.eye(m)
    if problem is not None and problem.control_weight is not None:
        weight = np.asarray(problem.control_weight, dtype=float)
        if weight.ndim == 1:
            weight = np.diag(weight)
    return float(np.einsum("ti,ij,tj->", controls, weight, controls))


class RealLinearizedPlanner:
    """Plans planar motion in velocity space and recovers (speed, heading).

    The planning model is the exact linear map p_{t+1} = p_t + dt * (vx, vy);
    heading and speed are recovered as atan2(vy, vx) and |(vx, vy)|. The
    planning controls are boxed to |vx|, |vy| <= v_max / sqrt(2) so the
    recovered speed never exceeds v_max.
    """

    def __init__(self, dt: float, config: EngineConfig = EngineConfig()):
        self.dt = dt
        self.config = config
        self.last_qp = None  # most recent QP handed to the solver, for debugging dumps

    def _record_qp(self, qp) -> None:
        self.last_qp = qp

    def linear_problem(self, problem: PlanProblem, constraints: Sequence[SafetyConstraint]) -> TrajOptProblem:
        n = len(problem.pos_dims)
        T = problem.horizon
        vmax = float(problem.control_bounds.upper[0])
        comp = vmax / math.sqrt(2.0)
        bounds = ControlBounds(np.full(n, -comp), np.full(n, comp))
        halfspaces = [(h, (T,)) for h in problem.goal.halfspaces]
        for c in constraints:
            halfspaces.append((c.halfspace, tuple(c.active_steps(T))))
        return TrajOptProblem(
            dynamics=LinearDynamics(np.eye(n), self.dt * np.eye(n)),
            x0=problem.nominal_start[list(problem.pos_dims)],
            horizon=T,
            control_bounds=bounds,
            state_halfspaces=tuple(halfspaces),
            state_boxes=((problem.env.box, tuple(range(1, T + 1))),),
        )

    def plan(self, problem, constraints, prev_nominal=None) -> CandidateTrajectory:
        lp = self.linear_problem(problem, constraints)
        obstacles = problem.obstacles if self.config.plan_with_obstacles else ()
        cand = plan_candidate(
            lp,
            prev_nominal,
            obstacles,
            obstacle_dims=tuple(range(len(problem.pos_dims))),
            scp_passes=self.config.scp_passes,
            tol=self.config.qp_tol,
            max_iter=self.config.qp_max_iter,
            on_qp=self._record_qp,
        )
        vel = cand.controls
        speed = np.hypot(vel[:, 0], vel[:, 1])
        heading = np.arctan2(vel[:, 1], vel[:, 0])
        controls = problem.control_bounds.clamp(np.column_stack([speed, heading]))
        traj = CandidateTrajectory(controls, cand.nominal_states, 0.0)
        return CandidateTrajectory(controls, cand.nominal_states, objective_report(traj, problem))


def _matching_key(constraints: dict, k: int, m: int, window: int, horizon: int):
    """Key of the existing constraint on obstacle k whose window overlaps the one at m."""
    new = set(range(max(1, m - window), min(horizon, m + window) + 1))
    for key, c in constraints.items():
        if c.obstacle_index == k and new.intersection(c.active_steps(horizon)):
            return key
    return None


def solve(
    problem: PlanProblem,
    accurate_model: DynamicsModel,
    planner=None,
    seed: int = 0,
    config: EngineConfig = EngineConfig(),
) -> PlanResult:
    """Iterate plan -> validate until the candidate meets the risk bound.

    ``planner`` defaults to the real-space linearized planner (requires a
    model with ``params.dt``); latent-mode callers pass a latent planner.
    """
    t_start = time.perf_counter()
    if planner is None:
        if problem.mode != REAL:
            raise ValueError("latent mode needs a latent planner")
        dt = getattr(getattr(accurate_model, "params", None), "dt", None)
        if dt is None:
            raise ValueError("real-linearized mode needs closed-form dynamics with a time step")
        planner = RealLinearizedPlanner(dt, config)
    if problem.initial.dim != accurate_model.state_dim:
        raise ValueError("initial distribution does not match the model state dimension")

    params = ValidatorParams(
        n_samples=config.n_samples,
        beta=config.beta_init,
        window=config.window,
        pos_dims=problem.pos_dims,
        include_initial=config.include_initial,
        threads=config.threads,
    )
    constraints: dict = {}
    history = []
    prev_nominal = None
    report = None
    tube = None
    candidate = None

    def finish(status, traj, message=""):
        return PlanResult(
            status,
            traj,
            report,
            len(history),
            list(constraints.values()),
            time.perf_counter() - t_start,
            seed,
            history,
            tube,
            message,
        )

    for it in range(1, config.max_iterations + 1):
        try:
            candidate = planner.plan(problem, list(constraints.values()), prev_nominal)
        except InfeasibleError as exc:
            history.append(IterationRecord(it, math.nan, math.nan, None, None))
            return finish(INFEASIBLE, candidate, f"planner infeasible at iteration {it}: {exc}")
        try:
            outcome = validate(
                candidate.controls,
                problem.obstacles,
                problem.delta,
                accurate_model,
                problem.initial,
                params,
                problem.env,
                seed=derive_seed(seed, it),
            )
        except SynthesisError as exc:
            history.append(IterationRecord(it, math.nan, candidate.objective, None, None))
            return finish(INFEASIBLE, candidate, f"constraint synthesis failed: {exc}")
        report, tube = outcome.report, outcome.tube
        if outcome.constraint is None:
            history.append(IterationRecord(it, report.total, candidate.objective, None, None))
            return finish(SAFE, candidate)
        k, m = outcome.event
        key = _matching_key(constraints, k, m, config.window, problem.horizon)
        beta = config.beta_init
        if key is not None:
            # repeat risk on an existing (obstacle, window): replace it, pushed farther out
            beta = escalate_beta(constraints.pop(key).beta_used, config.beta_growth, config.beta_max)
        key = (k, m)
        try:
            constraint = outcome.constraint
            if beta != constraint.beta_used:
                constraint = compute_safety_constraint(
                    tube, problem.obstacles[k], m, beta, problem.env, problem.pos_dims, k, config.window
                )
        except SynthesisError as exc:
            history.append(IterationRecord(it, report.total, candidate.objective, key, beta))
            return finish(INFEASIBLE, candidate, f"constraint synthesis failed: {exc}")
        constraints[key] = constraint
        history.append(IterationRecord(it, report.total, candidate.objective, key, beta))
        log.debug("iteration %d: risk %.4f, new constraint at %s (beta %.3g)", it, report.total, key, beta)
        if config.warm_start:
            prev_nominal = candidate.nominal_states
    return finish(ITERATION_LIMIT, candidate, f"no safe candidate within {config.max_iterations} iterations")
