"""Geometric primitives: ellipsoidal obstacles, halfspaces, polytopes and boxes.

All containers are immutable; array fields are copied and frozen on
construction so they can be shared freely between threads.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class GeometryError(ValueError):
    """Raised when a geometric construction has no solution."""


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EllipsoidObstacle:
    """Keep-out region {x : (x - center)^T shape (x - center) <= 1}."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        center = _frozen(self.center, 1, "center")
        shape = _frozen(self.shape, 2, "shape")
        n = center.shape[0]
        if shape.shape != (n, n):
            raise ValueError(f"shape must be {n}x{n}, got {shape.shape}")
        if np.max(np.abs(shape - shape.T)) > 1e-12:
            raise ValueError("shape matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(shape)) <= 0.0:
            raise ValueError("shape matrix must be positive definite")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def sphere(cls, center, radius: float) -> "EllipsoidObstacle":
        center = np.asarray(center, dtype=float)
        return cls(center, np.eye(center.shape[0]) / radius**2)

    @classmethod
    def from_semi_axes(cls, center, semi_axes, rotation=None) -> "EllipsoidObstacle":
        """Ellipsoid with the given semi-axis lengths, optionally rotated."""
        semi_axes = np.asarray(semi_axes, dtype=float)
        shape = np.diag(1.0 / semi_axes**2)
        if rotation is not None:
            rotation = np.asarray(rotation, dtype=float)
            shape = rotation @ shape @ rotation.T
            shape = 0.5 * (shape + shape.T)
        return cls(center, shape)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def contains(self, x) -> bool:
        return quadratic_form(self, x) <= 1.0


@dataclass(frozen=True)
class Halfspace:
    """{x : normal . x <= offset} with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = _frozen(self.normal, 1, "normal")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise ValueError("halfspace normal must have unit length")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_coefficients(cls, a, b: float) -> "Halfspace":
        """Normalize a.x <= b into unit-normal form."""
        a = np.asarray(a, dtype=float)
        norm = np.linalg.norm(a)
        if norm == 0.0:
            raise ValueError("zero normal")
        return cls(a / norm, b / norm)

    def value(self, x) -> float:
        """Signed slack: negative or zero inside."""
        return float(self.normal @ np.asarray(x, dtype=float) - self.offset)

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.value(x) <= tol


@dataclass(frozen=True)
class Hyperrectangle:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = _frozen(self.lower, 1, "lower")
        upper = _frozen(self.upper, 1, "upper")
        if lower.shape != upper.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(lower > upper):
            raise ValueError("hyperrectangle needs lower <= upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def vertices(self) -> np.ndarray:
        corners = itertools.product(*zip(self.lower, self.upper))
        return np.array(list(corners), dtype=float)

    def halfspaces(self) -> list[Halfspace]:
        out = []
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            out.append(Halfspace(e, self.upper[i]))
            out.append(Halfspace(-e, -self.lower[i]))
        return out

    def to_polytope(self) -> "Polytope":
        return Polytope(tuple(self.halfspaces()), tuple(map(tuple, self.vertices())))


@dataclass(frozen=True)
class Polytope:
    """Intersection of halfspaces, optionally carrying its vertex list."""

    halfspaces: tuple
    vertices: Optional[tuple] = None

    def __post_init__(self):
        hs = tuple(self.halfspaces)
        object.__setattr__(self, "halfspaces", hs)
        if self.vertices is not None:
            verts = np.array(self.vertices, dtype=float)
            if verts.ndim != 2 or len(verts) == 0:
                raise ValueError("vertices must be a nonempty list of vectors")
            for v in verts:
                for h in hs:
                    if h.value(v) > 1e-9:
                        raise ValueError("vertex violates a polytope halfspace")
            verts.setflags(write=False)
            object.__setattr__(self, "vertices", verts)

    def contains(self, x, tol: float = 0.0) -> bool:
        return all(h.contains(x, tol) for h in self.halfspaces)

    def vertex_centroid(self) -> np.ndarray:
        if self.vertices is None:
            raise ValueError("polytope has no vertex list")
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class EnvBounds:
    """Axis-aligned bounds of the environment over the position dimensions."""

    box: Hyperrectangle

    def __post_init__(self):
        if np.any(self.box.upper <= self.box.lower):
            raise ValueError("environment bounds need a nonempty interior")


def quadratic_form(obs: EllipsoidObstacle, x) -> float:
    """(x - center)^T shape (x - center); at most 1 inside or on the obstacle."""
    x = np.asarray(x, dtype=float)
    if x.shape != obs.center.shape:
        raise ValueError(f"point has shape {x.shape}, obstacle is {obs.dim}-D")
    d = x - obs.center
    return float(max(d @ obs.shape @ d, 0.0))


def hyperrect_from_points(points) -> Hyperrectangle:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise ValueError("cannot bound an empty point set")
    if pts.ndim == 1:
        pts = pts[None, :]
    return Hyperrectangle(pts.min(axis=0), pts.max(axis=0))


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted. Iterates
    until the off-diagonal Frobenius norm drops below ``tol`` (relative to
    the matrix norm for large inputs).
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1.0)
    for _ in range(max_sweeps):
        # sum the off-diagonal squares directly; subtracting the diagonal from
        # the full norm cancels catastrophically near convergence
        off = math.sqrt(float(np.sum((a - np.diag(np.diag(a))) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 * scale:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # asymptotic root; theta**2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def covariance_axes(cov) -> list[tuple[float, np.ndarray]]:
    """Eigenpairs of a covariance matrix, largest eigenvalue first.

    Each eigenvector is unit length with its first nonzero component
    positive, so results are reproducible.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
        raise ValueError("covariance must be symmetric")
    vals, vecs = jacobi_eigh(0.5 * (cov + cov.T))
    order = sorted(range(len(vals)), key=lambda i: -vals[i])
    out = []
    for i in order:
        vec = vecs[:, i] / np.linalg.norm(vecs[:, i])
        nz = np.flatnonzero(np.abs(vec) > 1e-14)
        if len(nz) and vec[nz[0]] < 0:
            vec = -vec
        out.append((float(vals[i]), vec))
    return out


def line_intersections(obs: EllipsoidObstacle, origin, direction) -> tuple[float, float]:
    """Parameters s1 <= s2 where origin + s*direction crosses the boundary."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if origin.shape != obs.center.shape or direction.shape != obs.center.shape:
        raise ValueError("dimension mismatch between obstacle and ray")
    d = origin - obs.center
    a = direction @ obs.shape @ direction
    b = 2.0 * (direction @ obs.shape @ d)
    c = d @ obs.shape @ d - 1.0
    if a <= 0.0:
        raise GeometryError("zero direction")
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        raise GeometryError("line does not meet the obstacle boundary")
    root = math.sqrt(disc)
    # numerically stable pair of roots
    qq = -0.5 * (b + math.copysign(root, b)) if b != 0.0 else -0.5 * root
    if qq == 0.0:
        return 0.0, 0.0
    s1, s2 = qq / a, c / qq
    return (s1, s2) if s1 <= s2 else (s2, s1)


def boundary_point_along(obs: EllipsoidObstacle, start, direction) -> np.ndarray:
    """Boundary point on the line start + s*direction with the smallest |s|.

    Ties (start at the centre of a chord) go forward along ``direction``.
    """
    s1, s2 = line_intersections(obs, start, direction)
    s = s1 if abs(s1) < abs(s2) else s2
    return np.asarray(start, dtype=float) + s * np.asarray(direction, dtype=float)


def clip_halfspace_to_box(h: Halfspace, box: Hyperrectangle) -> Polytope:
    """Polytope {x in box : h} with its vertex list.

    Vertices are the box corners inside the halfspace plus the points where
    box edges cross the bounding hyperplane.
    """
    if h.normal.shape[0] != box.dim:
        raise ValueError("halfspace and box dimensions differ")
    corners = box.vertices()
    vals = corners @ h.normal - h.offset
    verts = [c for c, v in zip(corners, vals) if v <= 1e-12]
    for i, j in itertools.combinations(range(len(corners)), 2):
        diff = corners[i] != corners[j]
        if np.count_nonzero(diff) != 1:
            continue
        vi, vj = vals[i], vals[j]
        if (vi < 0.0 < vj) or (vj < 0.0 < vi):
            lam = vi / (vi - vj)
            verts.append(corners[i] + lam * (corners[j] - corners[i]))
    if not verts:
        raise GeometryError("halfspace does not intersect the environment bounds")
    verts = np.unique(np.round(np.array(verts), 15), axis=0)
    # tiny numerical slack onto the halfspace
    slack = verts @ h.normal - h.offset
    verts = verts - np.maximum(slack, 0.0)[:, None] * h.normal[None, :]
    return Polytope((h,) + tuple(box.halfspaces()), tuple(map(tuple, verts)))
