"""Planning through the learned models.

The real-space problem is pushed into latent space by encoding points
(posterior means) and replacing every polytope with the bounding box of
its encoded vertices; the latent QP solution is decoded back into
physical controls. ``LearnedDynamics`` turns the VAEs into a stochastic
simulator for the validator: each step encodes by sampling, advances the
latent state linearly and decodes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..dynamics import ControlBounds
from ..geometry import Halfspace, Hyperrectangle, hyperrect_from_points
from ..optimizer import CandidateTrajectory, InfeasibleError, LinearDynamics, TrajOptProblem, plan_candidate
from .vae import LinearLatentModel, VaeModel, decode, decode_jacobian, encode, encode_jacobian


REFINE_PASSES = 10
REFINE_TOL = 1e-4  # largest control change, as a fraction of the control range
TRUST_INIT = 0.25  # initial trust-region radius, as a fraction of the control range
GOAL_TOL = 1e-6


@dataclass
class LearnedModel:
    vae_x: VaeModel
    vae_u: VaeModel
    latent: LinearLatentModel
    config: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if self.latent.A.shape[0] != self.vae_x.latent_dim or self.latent.B.shape[1] != self.vae_u.latent_dim:
            raise ValueError("latent dynamics do not match the VAE latent sizes")


def box_vertices(lower, upper) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return np.array([np.where(bits, upper, lower) for bits in itertools.product((0, 1), repeat=len(lower))])


def encode_points_box(vae: VaeModel, points) -> Hyperrectangle:
    """Latent bounding box of the mean encodings of ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("cannot encode an empty vertex set")
    return hyperrect_from_points(encode(vae, pts))


def lift_vertices(vertices, dims: Sequence[int], box: Hyperrectangle) -> np.ndarray:
    """Full-state vertices: ``vertices`` over ``dims`` times the box corners in the other dims."""
    vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
    n = box.dim
    dims = list(dims)
    if len(dims) == n:
        out = np.empty((len(vertices), n))
        out[:, dims] = vertices
        return out
    rest = [i for i in range(n) if i not in dims]
    corners = box_vertices(box.lower[rest], box.upper[rest])
    out = np.empty((len(vertices) * len(corners), n))
    for i, (v, c) in enumerate(itertools.product(vertices, corners)):
        out[i, dims] = v
        out[i, rest] = c
    return out


BOXES = "boxes"
LINEARIZED = "linearized"


def latent_halfspace(constraint, problem, vae_x: VaeModel) -> Optional[Halfspace]:
    """Safety halfspace n.x <= b pulled back through the decoder linearized at the anchor.

    With x ~ dec(z_p) + J (z - z_p) around z_p = enc(anchor), the latent
    constraint is (n^T J) z <= b - n.(dec(z_p) - J z_p). Returns None when
    the decoder is flat along n there.
    """
    dims = list(problem.pos_dims)
    point = problem.env.box.center.copy()
    anchor = constraint.anchor if constraint.anchor is not None else constraint.boundary_point
    if anchor is None:
        return None
    point[dims] = anchor
    zp = encode(vae_x, point)
    J = decode_jacobian(vae_x, zp)[dims]
    n = constraint.halfspace.normal
    a = n @ J
    if not np.linalg.norm(a) > 1e-12:
        return None
    b = constraint.halfspace.offset - n @ (decode(vae_x, zp)[dims] - J @ zp)
    return Halfspace.from_coefficients(a, b)


def encode_problem(
    problem, model: LearnedModel, constraints: Sequence = (), constraint_mode: str = BOXES
) -> TrajOptProblem:
    """Latent trajectory problem for a real-space ``PlanProblem`` and safety constraints.

    Safety constraints become bounding boxes of their encoded vertices
    (``BOXES``) or, with ``LINEARIZED``, halfspaces pulled back through the
    decoder linearized at each constraint's anchor (falling back to the box
    where the pull-back degenerates).
    """
    if constraint_mode not in (BOXES, LINEARIZED):
        raise ValueError(f"unknown constraint mode {constraint_mode!r}")
    if problem.goal.vertices is None:
        raise ValueError("latent encoding needs goal vertices")
    vx, vu = model.vae_x, model.vae_u
    T = problem.horizon
    env = problem.env.box
    z0 = encode(vx, problem.nominal_start)
    goal = encode_points_box(vx, problem.goal.vertices)
    cb = problem.control_bounds
    ubox = encode_points_box(vu, box_vertices(cb.lower, cb.upper))
    boxes = [(encode_points_box(vx, box_vertices(env.lower, env.upper)), tuple(range(1, T + 1)))]
    halfspaces = []
    for c in constraints:
        if constraint_mode == LINEARIZED:
            h = latent_halfspace(c, problem, vx)
            if h is not None:
                halfspaces.append((h, tuple(c.active_steps(T))))
                continue
        poly = c.polytope(problem.env) if len(problem.pos_dims) == env.dim else c.polytope(_pos_env(problem))
        verts = lift_vertices(poly.vertices, problem.pos_dims, env)
        boxes.append((encode_points_box(vx, verts), tuple(c.active_steps(T))))
    return TrajOptProblem(
        dynamics=LinearDynamics(model.latent.A, model.latent.B),
        x0=z0,
        horizon=T,
        goal=goal,
        control_bounds=ControlBounds(ubox.lower, ubox.upper),
        state_boxes=tuple(boxes),
        state_halfspaces=tuple(halfspaces),
    )


def _pos_env(problem):
    from ..geometry import EnvBounds

    dims = list(problem.pos_dims)
    box = problem.env.box
    return EnvBounds(Hyperrectangle(box.lower[dims], box.upper[dims]))


@dataclass(frozen=True)
class DecodedControls:
    controls: np.ndarray
    clamp_counts: np.ndarray  # per step, number of clamped channels


def decode_controls(zu_sequence, vae_u: VaeModel, bounds: Optional[ControlBounds] = None) -> DecodedControls:
    """Decode latent controls step by step and clamp them into ``bounds``."""
    zu = np.atleast_2d(np.asarray(zu_sequence, dtype=float))
    if zu.shape[1] != vae_u.latent_dim:
        raise ValueError(f"latent controls must have {vae_u.latent_dim} entries")
    raw = np.atleast_2d(decode(vae_u, zu))
    if bounds is None:
        return DecodedControls(raw, np.zeros(len(raw), dtype=int))
    clamped = bounds.clamp(raw)
    return DecodedControls(clamped, np.sum(clamped != raw, axis=1))


class LatentPlanner:
    """Candidate generator for latent mode: encode, solve the latent QP, decode.

    The latent control box is the bounding box of a curved control
    manifold, so the plain QP may pick codes whose decoded controls move
    the agent very differently from ``B z_u``. Refinement passes therefore
    plan over the physical controls directly: with g the mean control
    encoder linearized at the current controls ubar,

        z_{t+1} = A z_t + B J_t u_t + B (g(ubar_t) - J_t ubar_t),

    inside the real control bounds and a per-step trust region around
    ubar that shrinks when a step fails to improve. ``refine_passes = 0``
    gives the plain encode/solve/decode pipeline.
    """

    def __init__(
        self,
        model: LearnedModel,
        config=None,
        refine_passes: int = REFINE_PASSES,
        constraint_mode: str = LINEARIZED,
    ):
        from ..engine import EngineConfig

        if refine_passes < 0:
            raise ValueError("refine_passes must be nonnegative")
        self.model = model
        self.config = config if config is not None else EngineConfig()
        self.refine_passes = refine_passes
        self.constraint_mode = constraint_mode
        self.last_clamp_counts: Optional[np.ndarray] = None
        self.last_passes = 0
        self.last_qp = None  # most recent QP handed to the solver, for debugging dumps

    def _record_qp(self, qp) -> None:
        self.last_qp = qp

    def _solve(self, p: TrajOptProblem):
        return plan_candidate(p, tol=self.config.qp_tol, max_iter=self.config.qp_max_iter, on_qp=self._record_qp)

    def latent_rollout(self, problem, controls) -> np.ndarray:
        """Mean-mode latent states under physical ``controls``."""
        zu = np.atleast_2d(encode(self.model.vae_u, controls))
        z0 = encode(self.model.vae_x, problem.nominal_start)
        return LinearDynamics(self.model.latent.A, self.model.latent.B).rollout(z0, zu)

    def refine_problem(self, base: TrajOptProblem, problem, ubar, radius) -> TrajOptProblem:
        B = self.model.latent.B
        g = np.atleast_2d(encode(self.model.vae_u, ubar))
        J = encode_jacobian(self.model.vae_u, np.atleast_2d(ubar))
        bt = np.einsum("ij,tjk->tik", B, J)
        offsets = (g - np.einsum("tjk,tk->tj", J, ubar)) @ B.T
        cb = problem.control_bounds
        boxes = tuple(
            (Hyperrectangle(np.maximum(cb.lower, u - radius), np.minimum(cb.upper, u + radius)), (t,))
            for t, u in enumerate(ubar)
        )
        return base.replace(
            control_bounds=None,
            control_matrices=bt,
            offsets=offsets,
            control_boxes=boxes,
            control_weight=problem.control_weight,
        )

    def _goal_gap(self, base: TrajOptProblem, problem, controls) -> float:
        z = self.latent_rollout(problem, controls)[-1]
        return float(np.max(np.maximum(base.goal.lower - z, 0.0) + np.maximum(z - base.goal.upper, 0.0)))

    def _refine(self, base: TrajOptProblem, problem, ubar):
        """Trust-region passes from ``ubar``; None if no pass is feasible."""
        cb = problem.control_bounds
        span = cb.upper - cb.lower
        radius = TRUST_INIT * span
        best = None
        gap = math.inf
        for _ in range(self.refine_passes):
            self.last_passes += 1
            try:
                cand = self._solve(self.refine_problem(base, problem, ubar, radius))
            except InfeasibleError:
                if np.all(radius >= span):
                    break
                radius = np.minimum(2.0 * radius, span)
                continue
            step = np.max(np.abs(cand.controls - ubar) / span)
            new_gap = self._goal_gap(base, problem, cand.controls)
            if best is not None and new_gap > gap + GOAL_TOL:
                radius = 0.5 * radius
            else:
                ubar, gap, best = cand.controls, new_gap, cand.controls
            if step <= REFINE_TOL:
                break
        return best

    def plan(self, problem, constraints, prev_nominal=None) -> CandidateTrajectory:
        from ..engine import objective_report

        base = encode_problem(problem, self.model, constraints, self.constraint_mode)
        cb = problem.control_bounds
        middle = np.tile(0.5 * (cb.lower + cb.upper), (problem.horizon, 1))
        starts = []
        clamps = np.zeros(problem.horizon, dtype=int)
        try:
            dec = decode_controls(self._solve(base).controls, self.model.vae_u, cb)
            starts.append(dec.controls)
            clamps = dec.clamp_counts
        except InfeasibleError:
            if self.refine_passes == 0:
                raise
        starts.append(middle)
        self.last_passes = 0
        controls = starts[0] if self.refine_passes == 0 else None
        for ubar in starts if self.refine_passes else ():
            controls = self._refine(base, problem, ubar)
            if controls is not None:
                clamps = np.zeros(problem.horizon, dtype=int)
                break
        if controls is None:
            raise InfeasibleError("latent refinement found no feasible control trajectory")
        self.last_clamp_counts = clamps
        states = np.atleast_2d(decode(self.model.vae_x, self.latent_rollout(problem, controls)))
        states[0] = problem.nominal_start
        traj = CandidateTrajectory(controls, states, 0.0)
        return CandidateTrajectory(controls, states, objective_report(traj, problem))


@dataclass(frozen=True)
class LearnedDynamics:
    """Stochastic simulator from the VAEs.

    A trajectory sample applies the VAEs to the whole candidate: the start
    and every control are encoded by sampling, the latent state is rolled
    forward with the linear map, and each latent state is decoded. The
    single-step interface encodes, steps once and decodes.
    """

    model: LearnedModel

    @property
    def state_dim(self) -> int:
        return self.model.vae_x.input_dim

    @property
    def control_dim(self) -> int:
        return self.model.vae_u.input_dim

    def step_batch(self, xs, u, rng):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        us = np.broadcast_to(np.asarray(u, dtype=float), (len(xs), self.control_dim))
        zx = encode(self.model.vae_x, xs, "sample", rng)
        zu = encode(self.model.vae_u, us, "sample", rng)
        return np.atleast_2d(decode(self.model.vae_x, self.model.latent.step(zx, zu)))

    def step(self, x, u, rng):
        return self.step_batch(np.asarray(x)[None, :], u, rng)[0]

    def sample_trajectories(self, x0s, controls, rng) -> np.ndarray:
        """(T+1, N, n) decoded latent rollouts; row 0 holds the given starts."""
        x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        n = len(x0s)
        out = np.empty((len(controls) + 1, n, self.state_dim))
        out[0] = x0s
        z = encode(self.model.vae_x, x0s, "sample", rng)
        for t, u in enumerate(controls):
            zu = encode(self.model.vae_u, np.broadcast_to(u, (n, self.control_dim)), "sample", rng)
            z = self.model.latent.step(z, zu)
            out[t + 1] = decode(self.model.vae_x, z)
        return out
