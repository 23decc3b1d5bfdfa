import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laplass.geometry import (
    EllipsoidObstacle,
    EnvBounds,
    GeometryError,
    Halfspace,
    Hyperrectangle,
    Polytope,
    boundary_point_along,
    clip_halfspace_to_box,
    covariance_axes,
    hyperrect_from_points,
    jacobi_eigh,
    quadratic_form,
)

from conftest import random_rotation


def test_quadratic_form_examples():
    unit = EllipsoidObstacle.sphere([0.0, 0.0], 1.0)
    assert quadratic_form(unit, [0.0, 0.0]) == 0.0
    assert quadratic_form(unit, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
    squashed = EllipsoidObstacle([0.0, 0.0], np.diag([4.0, 1.0]))
    assert quadratic_form(squashed, [0.5, 0.0]) == pytest.approx(1.0, abs=1e-15)


def test_quadratic_form_dimension_mismatch():
    with pytest.raises(ValueError):
        quadratic_form(EllipsoidObstacle.sphere([0.0, 0.0], 1.0), [1.0, 2.0, 3.0])


@pytest.mark.parametrize(
    "shape",
    [np.array([[1.0, 0.5], [0.4, 1.0]]), np.diag([1.0, 0.0]), np.diag([1.0, -1.0])],
)
def test_obstacle_rejects_bad_shape(shape):
    with pytest.raises(ValueError):
        EllipsoidObstacle([0.0, 0.0], shape)


def test_obstacle_is_immutable():
    obs = EllipsoidObstacle.sphere([0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        obs.center[0] = 1.0


def test_from_semi_axes_rotation():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    obs = EllipsoidObstacle.from_semi_axes([1.0, 1.0], [2.0, 0.5], rot)
    # the long axis now points along y
    assert quadratic_form(obs, [1.0, 3.0]) == pytest.approx(1.0)
    assert quadratic_form(obs, [1.5, 1.0]) == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.integers(2, 4))
def test_quadratic_form_rotation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    rot = random_rotation(rng, n)
    shape = np.diag(rng.uniform(0.5, 3.0, n))
    center = rng.normal(size=n)
    x = rng.normal(size=n)
    obs = EllipsoidObstacle(center, shape)
    rotated = EllipsoidObstacle(rot @ center, 0.5 * (rot @ shape @ rot.T + (rot @ shape @ rot.T).T))
    assert quadratic_form(rotated, rot @ x) == pytest.approx(quadratic_form(obs, x), abs=1e-9)


def test_halfspace_normalization():
    h = Halfspace.from_coefficients([3.0, 4.0], 10.0)
    assert np.allclose(h.normal, [0.6, 0.8])
    assert h.offset == pytest.approx(2.0)
    assert h.contains([0.0, 0.0])
    assert not h.contains([10.0, 10.0])
    with pytest.raises(ValueError):
        Halfspace([1.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        Halfspace.from_coefficients([0.0, 0.0], 1.0)


def test_hyperrect_from_points_examples():
    box = hyperrect_from_points([[0.0, 0.0]])
    assert np.array_equal(box.lower, [0.0, 0.0]) and np.array_equal(box.upper, [0.0, 0.0])
    box = hyperrect_from_points([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(box.lower, [0.0, 0.0]) and np.array_equal(box.upper, [1.0, 1.0])
    with pytest.raises(ValueError):
        hyperrect_from_points(np.zeros((0, 2)))


def test_hyperrect_from_random_points_touches_faces(rng):
    pts = rng.normal(size=(100, 3))
    box = hyperrect_from_points(pts)
    assert all(box.contains(p) for p in pts)
    for i in range(3):
        assert np.any(pts[:, i] == box.lower[i])
        assert np.any(pts[:, i] == box.upper[i])


def test_hyperrect_validation_and_polytope():
    with pytest.raises(ValueError):
        Hyperrectangle([1.0], [0.0])
    box = Hyperrectangle([0.0, 0.0], [1.0, 2.0])
    poly = box.to_polytope()
    assert len(poly.halfspaces) == 4 and len(poly.vertices) == 4
    assert poly.contains([0.5, 1.0]) and not poly.contains([1.5, 1.0])
    assert hyperrect_from_points(poly.vertices).contains(poly.vertex_centroid())


def test_polytope_rejects_outside_vertex():
    with pytest.raises(ValueError):
        Polytope((Halfspace([1.0, 0.0], 0.0),), ((1.0, 0.0),))


def test_env_bounds_need_interior():
    with pytest.raises(ValueError):
        EnvBounds(Hyperrectangle([0.0, 0.0], [1.0, 0.0]))


def test_covariance_axes_examples():
    axes = covariance_axes(np.eye(2))
    assert [a[0] for a in axes] == pytest.approx([1.0, 1.0])
    assert abs(axes[0][1] @ axes[1][1]) < 1e-12
    axes = covariance_axes(np.diag([1.0, 9.0]))
    assert axes[0][0] == pytest.approx(9.0) and np.allclose(axes[0][1], [0.0, 1.0])
    assert axes[1][0] == pytest.approx(1.0) and np.allclose(axes[1][1], [1.0, 0.0])
    with pytest.raises(ValueError):
        covariance_axes(np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_covariance_axes_reconstruct(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    cov = a @ a.T
    axes = covariance_axes(cov)
    vals = np.array([v for v, _ in axes])
    vecs = np.column_stack([w for _, w in axes])
    assert np.all(np.diff(vals) <= 1e-12)
    assert np.linalg.norm(vecs @ np.diag(vals) @ vecs.T - cov) < 1e-8
    assert np.allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)
    assert vals.sum() == pytest.approx(np.trace(cov), abs=1e-8)
    # independent oracle
    assert np.allclose(vals, np.sort(np.linalg.eigvalsh(cov))[::-1], atol=1e-8)
    for w in vecs.T:
        nz = np.flatnonzero(np.abs(w) > 1e-14)
        assert w[nz[0]] > 0


def test_jacobi_diagonal_input_is_exact():
    vals, vecs = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(vals, [3.0, 1.0, 2.0])
    assert np.array_equal(vecs, np.eye(3))


def test_boundary_point_examples():
    unit = EllipsoidObstacle.sphere([0.0, 0.0], 1.0)
    assert np.allclose(boundary_point_along(unit, [2.0, 0.0], [-1.0, 0.0]), [1.0, 0.0])
    assert np.allclose(boundary_point_along(unit, [0.0, 0.0], [0.0, 1.0]), [0.0, 1.0])
    squashed = EllipsoidObstacle([0.0, 0.0], np.diag([4.0, 1.0]))
    assert np.allclose(boundary_point_along(squashed, [3.0, 0.0], [-1.0, 0.0]), [0.5, 0.0])
    with pytest.raises(GeometryError):
        boundary_point_along(unit, [0.0, 2.0], [1.0, 0.0])


@given(st.integers(0, 10_000))
def test_boundary_point_on_boundary(seed):
    rng = np.random.default_rng(seed)
    obs = EllipsoidObstacle.from_semi_axes(rng.normal(size=2), rng.uniform(0.3, 2.0, 2), random_rotation(rng, 2))
    start = obs.center + rng.normal(size=2) * 3.0
    d = obs.center - start
    d /= np.linalg.norm(d)
    p = boundary_point_along(obs, start, d)
    assert quadratic_form(obs, p) == pytest.approx(1.0, abs=1e-9)


def test_clip_halfspace_to_box():
    box = Hyperrectangle([0.0, 0.0], [1.0, 1.0])
    poly = clip_halfspace_to_box(Halfspace([1.0, 0.0], 0.5), box)
    assert sorted(map(tuple, np.round(poly.vertices, 12))) == [(0.0, 0.0), (0.0, 1.0), (0.5, 0.0), (0.5, 1.0)]
    with pytest.raises(GeometryError):
        clip_halfspace_to_box(Halfspace([1.0, 0.0], -1.0), box)
    diag = clip_halfspace_to_box(Halfspace.from_coefficients([1.0, 1.0], 1.0), box)
    assert len(diag.vertices) == 3
    assert all(diag.contains(v, 1e-9) for v in diag.vertices)
    assert math.isclose(diag.halfspaces[0].offset, 1.0 / math.sqrt(2.0))
