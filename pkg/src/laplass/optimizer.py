"""Convex trajectory optimization for linear(ized) dynamics.

The trajectory problem is transcribed into a dense QP over the stacked
vector [z_0, ..., z_T, u_0, ..., u_{T-1}] and solved with an
operator-splitting (ADMM) method in the style of OSQP:

    minimize    1/2 x^T P x + q^T x
    subject to  l <= A x <= u

with Ruiz equilibration, adaptive penalty, a primal-infeasibility
certificate, and an active-set polishing step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import EllipsoidObstacle, Halfspace, Hyperrectangle
from .dynamics import ControlBounds

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


class InfeasibleError(RuntimeError):
    """The trajectory QP has no feasible point."""


@dataclass(frozen=True)
class LinearDynamics:
    """z_{t+1} = A z_t + B u_t"""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        a = np.array(self.A, dtype=float)
        b = np.array(self.B, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("A must be square")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise ValueError("B must have as many rows as A")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("dynamics matrices must be finite")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    def rollout(self, z0, controls, offsets=None) -> np.ndarray:
        states = [np.asarray(z0, dtype=float)]
        for t, u in enumerate(controls):
            nxt = self.A @ states[-1] + self.B @ u
            states.append(nxt if offsets is None else nxt + offsets[t])
        return np.array(states)


@dataclass(frozen=True)
class TrajOptProblem:
    dynamics: LinearDynamics
    x0: np.ndarray
    horizon: int
    goal: Optional[Hyperrectangle] = None
    control_bounds: Optional[ControlBounds] = None
    # (Halfspace over the full state, timesteps it applies to)
    state_halfspaces: tuple = ()
    # (Hyperrectangle over the full state, timesteps)
    state_boxes: tuple = ()
    state_weight: Optional[np.ndarray] = None
    control_weight: Optional[np.ndarray] = None
    # (Halfspace over the full state, single timestep)
    obstacle_linearizations: tuple = ()
    # optional (T, n) affine term: z_{t+1} = A z_t + B u_t + c_t
    offsets: Optional[np.ndarray] = None
    # optional (T, n, m) per-step control matrices replacing dynamics.B
    control_matrices: Optional[np.ndarray] = None
    # (Hyperrectangle over the controls, control steps in 0..T-1)
    control_boxes: tuple = ()

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.dynamics.state_dim,):
            raise ValueError("x0 does not match the dynamics state dimension")
        object.__setattr__(self, "x0", x0)
        if self.control_matrices is not None:
            bt = np.asarray(self.control_matrices, dtype=float)
            if bt.ndim != 3 or bt.shape[:2] != (self.horizon, self.dynamics.state_dim) or not np.isfinite(bt).all():
                raise ValueError("control_matrices must be a finite (horizon, state_dim, m) array")
            object.__setattr__(self, "control_matrices", bt)
        n, m = self.dynamics.state_dim, self.control_dim
        qw = np.zeros((n, n)) if self.state_weight is None else _as_weight(self.state_weight, n)
        rw = np.eye(m) if self.control_weight is None else _as_weight(self.control_weight, m)
        for w, name in ((qw, "state"), (rw, "control")):
            if np.min(np.linalg.eigvalsh(0.5 * (w + w.T))) < -1e-12:
                raise ValueError(f"{name} cost weight must be PSD")
        object.__setattr__(self, "state_weight", qw)
        object.__setattr__(self, "control_weight", rw)
        if self.goal is not None and self.goal.dim != n:
            raise ValueError("goal box dimension does not match the state")
        if self.control_bounds is not None and len(self.control_bounds.lower) != m:
            raise ValueError("control bounds dimension does not match the controls")
        for h, _ in tuple(self.state_halfspaces) + tuple(self.obstacle_linearizations):
            if h.normal.shape != (n,):
                raise ValueError("state halfspace dimension does not match the state")
        if self.offsets is not None:
            c = np.asarray(self.offsets, dtype=float)
            if c.shape != (self.horizon, n) or not np.isfinite(c).all():
                raise ValueError("offsets must be a finite (horizon, state_dim) array")
            object.__setattr__(self, "offsets", c)
        for box, steps in self.control_boxes:
            if box.dim != m or any(not 0 <= t < self.horizon for t in steps):
                raise ValueError("control box does not match the controls or horizon")

    @property
    def control_dim(self) -> int:
        if self.control_matrices is not None:
            return self.control_matrices.shape[2]
        return self.dynamics.control_dim

    def control_matrix(self, t: int) -> np.ndarray:
        return self.dynamics.B if self.control_matrices is None else self.control_matrices[t]

    def replace(self, **changes) -> "TrajOptProblem":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return TrajOptProblem(**fields)


def _as_weight(w, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = np.diag(w)
    if w.shape != (n, n):
        raise ValueError("cost weight has the wrong shape")
    return w


@dataclass
class QP:
    """1/2 x'Px + q'x  s.t.  A_eq x = b_eq,  G x <= h."""

    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    G: np.ndarray
    h: np.ndarray
    eq_tags: list = field(default_factory=list)
    ineq_tags: list = field(default_factory=list)

    @property
    def n_var(self) -> int:
        return self.P.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)

    def to_text(self) -> str:
        """Dimension header followed by row-major matrices, one per block."""
        lines = [f"n_var {self.n_var} n_eq {len(self.b_eq)} n_ineq {len(self.h)}"]
        for name in ("P", "q", "A_eq", "b_eq", "G", "h"):
            arr = np.atleast_2d(getattr(self, name))
            if getattr(self, name).ndim == 1:
                arr = arr.reshape(1, -1)
            lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
            for row in arr:
                lines.append(" ".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    objective: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float


@dataclass
class _Layout:
    n: int
    m: int
    T: int

    @property
    def size(self) -> int:
        return (self.T + 1) * self.n + self.T * self.m

    def z(self, t: int) -> slice:
        return slice(t * self.n, (t + 1) * self.n)

    def u(self, t: int) -> slice:
        base = (self.T + 1) * self.n
        return slice(base + t * self.m, base + (t + 1) * self.m)

    def split(self, x):
        states = x[: (self.T + 1) * self.n].reshape(self.T + 1, self.n)
        controls = x[(self.T + 1) * self.n :].reshape(self.T, self.m)
        return states, controls


def build_qp(p: TrajOptProblem) -> QP:
    n, m, T = p.dynamics.state_dim, p.control_dim, p.horizon
    lay = _Layout(n, m, T)
    N = lay.size
    P = np.zeros((N, N))
    for t in range(1, T + 1):
        P[lay.z(t), lay.z(t)] = 2.0 * 0.5 * (p.state_weight + p.state_weight.T)
    for t in range(T):
        P[lay.u(t), lay.u(t)] = 2.0 * 0.5 * (p.control_weight + p.control_weight.T)
    q = np.zeros(N)

    eq_rows, eq_rhs, eq_tags = [], [], []
    ineq_rows, ineq_rhs, ineq_tags = [], [], []

    def eq(row, rhs, tag):
        eq_rows.append(row)
        eq_rhs.append(rhs)
        eq_tags.append(tag)

    def ineq(row, rhs, tag):
        ineq_rows.append(row)
        ineq_rhs.append(rhs)
        ineq_tags.append(tag)

    for i in range(n):
        row = np.zeros(N)
        row[lay.z(0).start + i] = 1.0
        eq(row, p.x0[i], "init")
    for t in range(T):
        for i in range(n):
            row = np.zeros(N)
            row[lay.z(t + 1).start + i] = 1.0
            row[lay.z(t)] -= p.dynamics.A[i]
            row[lay.u(t)] -= p.control_matrix(t)[i]
            eq(row, 0.0 if p.offsets is None else p.offsets[t, i], "dyn")

    def box_rows(box: Hyperrectangle, var: slice, tag: str):
        for i in range(box.dim):
            lo, hi = box.lower[i], box.upper[i]
            if lo == hi:
                row = np.zeros(N)
                row[var.start + i] = 1.0
                eq(row, lo, tag)
                continue
            if np.isfinite(hi):
                row = np.zeros(N)
                row[var.start + i] = 1.0
                ineq(row, hi, tag)
            if np.isfinite(lo):
                row = np.zeros(N)
                row[var.start + i] = -1.0
                ineq(row, -lo, tag)

    if p.goal is not None:
        box_rows(p.goal, lay.z(T), "goal")
    if p.control_bounds is not None:
        cb = Hyperrectangle(p.control_bounds.lower, p.control_bounds.upper)
        for t in range(T):
            box_rows(cb, lay.u(t), "control")
    for box, steps in p.control_boxes:
        for t in steps:
            box_rows(box, lay.u(t), "control")
    for box, steps in p.state_boxes:
        for t in steps:
            box_rows(box, lay.z(t), "state-box")
    for hs, steps in p.state_halfspaces:
        for t in steps:
            row = np.zeros(N)
            row[lay.z(t)] = hs.normal
            ineq(row, hs.offset, "safety")
    for hs, t in p.obstacle_linearizations:
        row = np.zeros(N)
        row[lay.z(t)] = hs.normal
        ineq(row, hs.offset, "obstacle")

    A_eq = np.array(eq_rows) if eq_rows else np.zeros((0, N))
    G = np.array(ineq_rows) if ineq_rows else np.zeros((0, N))
    return QP(
        P, q, A_eq, np.array(eq_rhs, dtype=float), G, np.array(ineq_rhs, dtype=float), eq_tags, ineq_tags
    )


POLISH_ROUNDS = 25
POLISH_EVERY = 500
POLISH_START = 1e-3


def _ruiz(P, q, A, iters: int = 15):
    """Diagonal scalings D (variables), E (constraints) and cost factor c."""
    nv, nc = P.shape[0], A.shape[0]
    D = np.ones(nv)
    E = np.ones(nc)
    Ps, As = P.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        dcol = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        row = np.abs(As).max(axis=1, initial=0.0) if nc else np.zeros(0)
        erow = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dcol[:, None] * Ps * dcol[None, :]
        As = erow[:, None] * As * dcol[None, :]
        D *= dcol
        E *= erow
    qs = D * q
    scale = max(np.abs(Ps).max(axis=0, initial=0.0).mean(), np.abs(qs).max(initial=0.0), 1e-4)
    c = 1.0 / min(scale, 1e4)
    return Ps * c, qs * c, As, D, E, c


def solve_qp(
    qp: QP,
    tol: float = 1e-6,
    max_iter: int = 20000,
    rho: float = 1.0,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    polish: bool = True,
) -> QpSolution:
    """ADMM solve of ``qp``; status is optimal, infeasible or max-iter."""
    P = 0.5 * (qp.P + qp.P.T)
    if P.size and np.min(np.linalg.eigvalsh(P)) < -1e-9 * max(1.0, np.abs(P).max()):
        raise ValueError("QP cost matrix is not positive semidefinite")
    A = np.vstack([qp.A_eq, qp.G])
    n_eq = len(qp.b_eq)
    lo = np.concatenate([qp.b_eq, np.full(len(qp.h), -np.inf)])
    hi = np.concatenate([qp.b_eq, qp.h])
    nv, nc = P.shape[0], A.shape[0]

    Ps, qs, As, D, E, c = _ruiz(P, qp.q, A)
    ls, us = E * lo, E * hi
    is_eq = np.zeros(nc, dtype=bool)
    is_eq[:n_eq] = True
    is_eq |= np.isclose(lo, hi)

    def rho_vec(r):
        return np.where(is_eq, 1e3 * r, r)

    def factor(r):
        rv = rho_vec(r)
        K = Ps + sigma * np.eye(nv) + As.T @ (rv[:, None] * As)
        return rv, cho_factor(K)

    rv, chol = factor(rho)
    x = np.zeros(nv)
    z = np.zeros(nc)
    y = np.zeros(nc)
    status = MAX_ITER
    r_prim = r_dual = math.inf
    it = 0
    check_every = 10
    for it in range(1, max_iter + 1):
        y_prev = y
        rhs = sigma * x - qs + As.T @ (rv * z - y)
        xt = cho_solve(chol, rhs)
        zt = As @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(zr + y / rv, ls, us)
        y = y + rv * (zr - z_new)
        z = z_new
        if it % check_every:
            continue
        # residuals in unscaled units
        ax = (As @ x) / E
        xu = D * x
        yu = E * y / c
        r_prim = float(np.max(np.abs(ax - z / E), initial=0.0))
        r_dual = float(np.max(np.abs(P @ xu + qp.q + A.T @ yu), initial=0.0))
        if r_prim < tol and r_dual < tol:
            status = OPTIMAL
            break
        if polish and it % POLISH_EVERY == 0 and max(r_prim, r_dual) < POLISH_START:
            # slow tail on near-degenerate problems: try to finish by active-set refinement
            early = _polish(qp, A, lo, hi, n_eq, QpSolution(D * x, E * y / c, 0.0, status, it, r_prim, r_dual), tol)
            if early is not None:
                return early
        dy = E * (y - y_prev) / c
        ndy = np.max(np.abs(dy), initial=0.0)
        if ndy > 1e-12 and _certifies_infeasible(A, lo, hi, dy, ndy):
            status = INFEASIBLE
            break
        if it % 50 == 0 and r_prim > 0 and r_dual > 0:
            ratio = r_prim / r_dual
            new_rho = rho
            if ratio > 10.0:
                new_rho = min(rho * 10.0, 1e6)
            elif ratio < 0.1:
                new_rho = max(rho / 10.0, 1e-6)
            if new_rho != rho:
                rho = new_rho
                rv, chol = factor(rho)

    xu = D * x
    yu = E * y / c
    sol = QpSolution(xu, yu, qp.objective(xu), status, it, r_prim, r_dual)
    if status == INFEASIBLE:
        return sol
    if polish:
        polished = _polish(qp, A, lo, hi, n_eq, sol, tol)
        if polished is not None:
            return polished
    return sol


def _certifies_infeasible(A, lo, hi, dy, ndy, eps: float = 1e-4) -> bool:
    # drop components pointing at infinite bounds (projection onto the normal cone)
    dy = np.where(((dy > 0) & ~np.isfinite(hi)) | ((dy < 0) & ~np.isfinite(lo)), 0.0, dy)
    ndy = np.max(np.abs(dy), initial=0.0)
    if ndy <= 1e-12:
        return False
    if np.max(np.abs(A.T @ dy), initial=0.0) > eps * ndy:
        return False
    pos = dy > 0
    neg = dy < 0
    support = float(hi[pos] @ dy[pos] + lo[neg] @ dy[neg])
    return support < -eps * ndy


def _polish(qp, A, lo, hi, n_eq, sol: QpSolution, tol: float) -> Optional[QpSolution]:
    """Active-set refinement of the ADMM point: solve the KKT system on a guessed
    active set, then add violated rows / drop wrong-sign multipliers and repeat."""
    nc = A.shape[0]
    nv = qp.n_var
    ineq = np.arange(nc) >= n_eq
    ax = A @ sol.x
    gap = 1e-5 * (1.0 + np.abs(ax))
    upper = ineq & ((ax >= hi - gap) | (sol.y > tol)) & np.isfinite(hi)
    lower = ineq & ~upper & ((ax <= lo + gap) | (sol.y < -tol)) & np.isfinite(lo)
    for _ in range(POLISH_ROUNDS):
        rows = np.flatnonzero(~ineq | upper | lower)
        rhs_b = np.where(lower[rows], lo[rows], hi[rows])
        Aa = A[rows]
        K = np.block([[qp.P, Aa.T], [Aa, np.zeros((len(rows), len(rows)))]])
        rhs = np.concatenate([-qp.q, rhs_b])
        sol_kkt, *_ = np.linalg.lstsq(K, rhs, rcond=1e-13)
        x = sol_kkt[:nv]
        y = np.zeros(nc)
        y[rows] = sol_kkt[nv:]
        ax = A @ x
        over = ineq & ~upper & (ax > hi + tol)
        under = ineq & ~lower & (ax < lo - tol)
        bad_up = upper & (y < -tol)
        bad_lo = lower & (y > tol)
        if not (over.any() or under.any() or bad_up.any() or bad_lo.any()):
            feas = float(np.max(np.maximum(ax - hi, lo - ax), initial=0.0))
            r_dual = float(np.max(np.abs(qp.P @ x + qp.q + A.T @ y), initial=0.0))
            if feas > tol or r_dual > tol:
                return None
            return QpSolution(x, y, qp.objective(x), OPTIMAL, sol.iterations, max(feas, 0.0), r_dual)
        # drop the worst wrong-sign multiplier at most one at a time (avoids cycling)
        if bad_up.any() or bad_lo.any():
            score = np.where(bad_up, -y, 0.0) + np.where(bad_lo, y, 0.0)
            worst = int(np.argmax(score))
            upper[worst] = lower[worst] = False
        upper |= over
        lower |= under
    return None


def linearize_obstacle(obs: EllipsoidObstacle, nominal) -> Halfspace:
    """Tangent halfspace at the boundary point nearest ``nominal``, obstacle excluded.

    A nominal inside the obstacle is pushed out radially from the center;
    a nominal exactly at the center uses the +e1 direction.
    """
    y = np.asarray(nominal, dtype=float)
    w = y - obs.center
    q = obs.shape
    if float(w @ q @ w) > 1.0:
        lam, vecs = np.linalg.eigh(q)
        wt = vecs.T @ w

        def g(t):
            return float(np.sum(lam * wt**2 / (1.0 + t * lam) ** 2)) - 1.0

        lo_t, hi_t = 0.0, 1.0
        while g(hi_t) > 0.0:
            hi_t *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo_t + hi_t)
            if g(mid) > 0.0:
                lo_t = mid
            else:
                hi_t = mid
            if hi_t - lo_t <= 1e-15 * max(1.0, hi_t):
                break
        t = 0.5 * (lo_t + hi_t)
        xb = obs.center + vecs @ (wt / (1.0 + t * lam))
    else:
        direction = w if np.linalg.norm(w) > 0.0 else np.eye(len(w))[0]
        xb = obs.center + direction / math.sqrt(float(direction @ q @ direction))
    normal = q @ (xb - obs.center)
    normal = normal / np.linalg.norm(normal)
    return Halfspace(-normal, float(-normal @ xb))


def embed_halfspace(h: Halfspace, dims: Sequence[int], state_dim: int) -> Halfspace:
    """Lift a halfspace over selected coordinates into the full state space."""
    normal = np.zeros(state_dim)
    normal[list(dims)] = h.normal
    return Halfspace(normal, h.offset)


@dataclass(frozen=True)
class CandidateTrajectory:
    controls: np.ndarray
    nominal_states: np.ndarray
    objective: float

    def __post_init__(self):
        c = np.asarray(self.controls, dtype=float)
        s = np.asarray(self.nominal_states, dtype=float)
        if len(s) != len(c) + 1:
            raise ValueError("nominal states must have one more entry than controls")
        object.__setattr__(self, "controls", c)
        object.__setattr__(self, "nominal_states", s)

    @property
    def horizon(self) -> int:
        return len(self.controls)


def _escape_point(obs: EllipsoidObstacle, path: np.ndarray):
    """Surrogate outside point shared by every path sample inside ``obs``.

    Linearizing interior samples radially makes consecutive steps push in
    opposing directions (infeasible when the path crosses the center), so
    all of them are pushed to one side: the offset of the deepest sample
    from the center, minus its component along the path.
    """
    diff = path - obs.center
    q = np.einsum("ti,ij,tj->t", diff, obs.shape, diff)
    if q.min() > 1.0:
        return None
    t = int(np.argmin(q))
    tangent = path[min(t + 1, len(path) - 1)] - path[max(t - 1, 0)]
    w = diff[t]
    norm_t = np.linalg.norm(tangent)
    if norm_t > 0.0:
        tangent = tangent / norm_t
        w = w - (w @ tangent) * tangent
    if np.linalg.norm(w) < 1e-9:
        if norm_t > 0.0 and len(w) >= 2:
            w = np.zeros_like(w)
            w[0], w[1] = -tangent[1], tangent[0]
        if np.linalg.norm(w) < 1e-9:
            w = np.eye(len(w))[0]
    w = w / np.linalg.norm(w)
    reach = 2.0 / math.sqrt(float(np.min(np.linalg.eigvalsh(obs.shape))))
    return obs.center + reach * w


def plan_candidate(
    p: TrajOptProblem,
    prev_nominal: Optional[np.ndarray] = None,
    obstacles: Sequence[EllipsoidObstacle] = (),
    obstacle_dims: Sequence[int] = (0, 1),
    scp_passes: int = 2,
    tol: float = 1e-6,
    max_iter: int = 20000,
    on_qp: Optional[Callable[[QP], None]] = None,
) -> CandidateTrajectory:
    """Solve the deterministic relaxation, convexifying obstacles about a nominal.

    With obstacles, each pass linearizes every obstacle about the current
    nominal state at every step and re-solves; the first pass uses
    ``prev_nominal`` or, failing that, the obstacle-free solution.
    ``on_qp`` is called with every QP before it is solved.
    """
    n = p.dynamics.state_dim
    dims = list(obstacle_dims)
    nominal = prev_nominal
    if obstacles and nominal is None:
        nominal = plan_candidate(p, tol=tol, max_iter=max_iter, on_qp=on_qp).nominal_states
    passes = max(1, scp_passes) if obstacles else 1
    result = None
    for _ in range(passes):
        lins = []
        path = np.asarray(nominal)[:, dims] if obstacles else None
        for obs in obstacles:
            escape = _escape_point(obs, path)
            for t in range(1, p.horizon + 1):
                point = path[t]
                if escape is not None and obs.contains(point):
                    point = escape
                h = linearize_obstacle(obs, point)
                lins.append((embed_halfspace(h, dims, n), t))
        problem = p.replace(obstacle_linearizations=tuple(lins)) if obstacles else p
        qp = build_qp(problem)
        if on_qp is not None:
            on_qp(qp)
        sol = solve_qp(qp, tol=tol, max_iter=max_iter)
        if sol.status == INFEASIBLE:
            if result is not None:
                break
            raise InfeasibleError("trajectory QP is infeasible")
        if sol.status != OPTIMAL:
            log.warning("QP stopped at %s after %d iterations", sol.status, sol.iterations)
        states, controls = _Layout(n, p.control_dim, p.horizon).split(sol.x)
        result = CandidateTrajectory(controls, states, sol.objective)
        nominal = states
    return result
