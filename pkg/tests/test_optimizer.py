import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laplass.dynamics import ControlBounds
from laplass.geometry import EllipsoidObstacle, Halfspace, Hyperrectangle, quadratic_form
from laplass.optimizer import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    QP,
    CandidateTrajectory,
    InfeasibleError,
    LinearDynamics,
    TrajOptProblem,
    build_qp,
    embed_halfspace,
    linearize_obstacle,
    plan_candidate,
    solve_qp,
)

from oracles import brute_force_qp, random_feasible_qp


def qp(P, q, A_eq=None, b_eq=None, G=None, h=None):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    return QP(
        P,
        np.asarray(q, dtype=float),
        np.zeros((0, n)) if A_eq is None else np.atleast_2d(A_eq).astype(float),
        np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float),
        np.zeros((0, n)) if G is None else np.atleast_2d(G).astype(float),
        np.zeros(0) if h is None else np.asarray(h, dtype=float),
    )


def test_scalar_qp_by_hand():
    # min x^2 s.t. x >= 1
    sol = solve_qp(qp([[2.0]], [0.0], G=[[-1.0]], h=[-1.0]))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6) and sol.objective == pytest.approx(1.0, abs=1e-5)


def test_projection_onto_box():
    # min |x - (2, 0)|^2 over [0, 1]^2
    G = np.vstack([np.eye(2), -np.eye(2)])
    sol = solve_qp(qp(2 * np.eye(2), [-4.0, 0.0], G=G, h=[1.0, 1.0, 0.0, 0.0]))
    assert np.allclose(sol.x, [1.0, 0.0], atol=1e-6)


def test_equality_least_squares_closed_form(rng):
    for _ in range(10):
        n, k = 5, 2
        M = rng.normal(size=(8, n))
        y = rng.normal(size=8)
        A = rng.normal(size=(k, n))
        b = rng.normal(size=k)
        K = np.block([[2 * M.T @ M, A.T], [A, np.zeros((k, k))]])
        ref = np.linalg.solve(K, np.concatenate([2 * M.T @ y, b]))[:n]
        sol = solve_qp(qp(2 * M.T @ M, -2 * M.T @ y, A, b))
        assert sol.status == OPTIMAL
        assert np.allclose(sol.x, ref, atol=1e-8)


def test_infeasible_and_nonconvex():
    sol = solve_qp(qp([[2.0]], [0.0], G=[[1.0], [-1.0]], h=[0.0, -1.0]))
    assert sol.status == INFEASIBLE
    with pytest.raises(ValueError):
        solve_qp(qp([[-1.0]], [0.0]))


def test_max_iter_status():
    q = random_feasible_qp(np.random.default_rng(3), 6, 2, 8)
    sol = solve_qp(q, max_iter=10, polish=False)
    assert sol.status == MAX_ITER and sol.iterations == 10


@given(st.integers(0, 100_000))
def test_random_qps_match_kkt_oracle(seed):
    rng = np.random.default_rng(seed)
    q = random_feasible_qp(rng)
    ref = brute_force_qp(q)
    sol = solve_qp(q)
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(ref[0], abs=1e-5)
    assert np.max(q.G @ sol.x - q.h, initial=0.0) <= 1e-5
    assert np.max(np.abs(q.A_eq @ sol.x - q.b_eq), initial=0.0) <= 1e-5


@given(st.integers(0, 100_000))
def test_removing_a_constraint_never_raises_the_objective(seed):
    rng = np.random.default_rng(seed)
    q = random_feasible_qp(rng, n_ineq=4)
    drop = int(rng.integers(0, 4))
    keep = [i for i in range(4) if i != drop]
    relaxed = QP(q.P, q.q, q.A_eq, q.b_eq, q.G[keep], q.h[keep])
    assert solve_qp(relaxed).objective <= solve_qp(q).objective + 1e-6


def double_integrator(T=10, goal=None, **kw):
    dt = 0.1
    dyn = LinearDynamics([[1.0, dt], [0.0, 1.0]], [[0.5 * dt * dt], [dt]])
    return TrajOptProblem(dyn, [0.0, 0.0], T, goal=goal, **kw)


def test_build_qp_row_counts():
    p = double_integrator(T=1)
    q = build_qp(p)
    assert q.A_eq.shape == (4, 5) and q.G.shape == (0, 5)
    assert q.eq_tags == ["init"] * 2 + ["dyn"] * 2
    point_goal = double_integrator(T=3, goal=Hyperrectangle([1.0, 0.0], [1.0, 0.0]))
    assert build_qp(point_goal).eq_tags.count("goal") == 2
    h = Halfspace([1.0, 0.0], 0.5)
    p = double_integrator(T=10, state_halfspaces=((h, (2, 3, 4)),))
    assert build_qp(p).ineq_tags.count("safety") == 3
    text = build_qp(double_integrator(T=1)).to_text()
    assert text.splitlines()[0] == "n_var 5 n_eq 4 n_ineq 0"


def test_build_qp_dimension_errors():
    dyn = LinearDynamics(np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        TrajOptProblem(dyn, [0.0], 3)
    with pytest.raises(ValueError):
        TrajOptProblem(dyn, [0.0, 0.0], 0)
    with pytest.raises(ValueError):
        TrajOptProblem(dyn, [0.0, 0.0], 3, goal=Hyperrectangle([0.0], [1.0]))
    with pytest.raises(ValueError):
        TrajOptProblem(dyn, [0.0, 0.0], 3, state_halfspaces=((Halfspace([1.0], 0.0), (1,)),))
    with pytest.raises(ValueError):
        TrajOptProblem(dyn, [0.0, 0.0], 3, control_weight=-np.eye(2))
    with pytest.raises(ValueError):
        LinearDynamics(np.eye(2), np.eye(3))


def test_double_integrator_reaches_point_goal():
    goal = Hyperrectangle([1.0, 0.0], [1.0, 0.0])
    cand = plan_candidate(double_integrator(T=20, goal=goal))
    assert np.allclose(cand.nominal_states[-1], [1.0, 0.0], atol=1e-6)
    dyn = LinearDynamics([[1.0, 0.1], [0.0, 1.0]], [[0.005], [0.1]])
    assert np.allclose(dyn.rollout([0.0, 0.0], cand.controls)[-1], [1.0, 0.0], atol=1e-6)


def test_unreachable_goal_is_infeasible():
    goal = Hyperrectangle([5.0, 0.0], [5.0, 0.0])
    p = double_integrator(T=5, goal=goal, control_bounds=ControlBounds([-1.0], [1.0]))
    with pytest.raises(InfeasibleError):
        plan_candidate(p)


def test_offsets_and_per_step_control_matrices():
    dyn = LinearDynamics(np.eye(1), np.eye(1))
    p = TrajOptProblem(
        dyn,
        [0.0],
        2,
        goal=Hyperrectangle([3.0], [3.0]),
        offsets=np.array([[1.0], [1.0]]),
        control_matrices=np.array([[[2.0]], [[2.0]]]),
        control_boxes=((Hyperrectangle([0.0], [10.0]), (0, 1)),),
    )
    cand = plan_candidate(p)
    # z2 = 2 + 2(u0 + u1) = 3 with equal split minimizing the effort
    assert np.allclose(cand.controls, [[0.25], [0.25]], atol=1e-6)
    with pytest.raises(ValueError):
        p.replace(offsets=np.zeros((3, 1)))
    with pytest.raises(ValueError):
        p.replace(control_boxes=((Hyperrectangle([0.0], [1.0]), (2,)),))


def test_linearize_obstacle_examples():
    unit = EllipsoidObstacle.sphere([0.0, 0.0], 1.0)
    h = linearize_obstacle(unit, [2.0, 0.0])
    assert np.allclose(h.normal, [-1.0, 0.0]) and h.offset == pytest.approx(-1.0)
    inside = linearize_obstacle(unit, [0.5, 0.0])
    assert np.allclose(inside.normal, [-1.0, 0.0]) and inside.offset == pytest.approx(-1.0)
    center = linearize_obstacle(unit, [0.0, 0.0])
    assert not center.contains([0.0, 0.0])


@given(st.integers(0, 100_000))
def test_linearization_separates_nominal_side(seed):
    rng = np.random.default_rng(seed)
    obs = EllipsoidObstacle.from_semi_axes(rng.normal(size=2), rng.uniform(0.2, 1.0, 2))
    y = obs.center + rng.normal(size=2) * 2.0
    h = linearize_obstacle(obs, y)
    assert not h.contains(obs.center)
    # tangent point on the boundary lies on the hyperplane; the ellipse is on the far side
    for t in np.linspace(0.0, 2 * np.pi, 64):
        p = obs.center + np.array([np.cos(t), np.sin(t)]) / np.sqrt(np.diag(obs.shape))
        assert h.value(p) >= -1e-9
    if quadratic_form(obs, y) > 1.0:
        assert h.contains(y, 1e-9)


def test_embed_halfspace():
    h = embed_halfspace(Halfspace([0.0, 1.0], 2.0), (0, 2), 3)
    assert np.array_equal(h.normal, [0.0, 0.0, 1.0]) and h.offset == 2.0


def test_plan_candidate_avoids_obstacle():
    dyn = LinearDynamics(np.eye(2), 0.1 * np.eye(2))
    goal = Hyperrectangle([1.9, -0.05], [2.1, 0.05])
    p = TrajOptProblem(dyn, [0.0, 0.0], 20, goal=goal, control_bounds=ControlBounds([-3.0, -3.0], [3.0, 3.0]))
    obs = EllipsoidObstacle.sphere([1.0, 0.0], 0.3)
    cand = plan_candidate(p, obstacles=(obs,), scp_passes=3)
    assert goal.contains(cand.nominal_states[-1], 1e-5)
    assert all(quadratic_form(obs, s) >= 1.0 - 1e-5 for s in cand.nominal_states)
    seen = []
    plan_candidate(p, obstacles=(obs,), scp_passes=2, on_qp=seen.append)
    assert len(seen) == 3  # obstacle-free seed solve plus two passes


def test_candidate_trajectory_shape_check():
    with pytest.raises(ValueError):
        CandidateTrajectory(np.zeros((3, 2)), np.zeros((3, 2)), 0.0)
