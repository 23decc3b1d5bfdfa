"""Deterministic SVG rendering of planning results (2-D projection)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape
from typing import Optional, Sequence

import numpy as np

from .geometry import covariance_axes

WIDTH = 600
HEIGHT = 600
MARGIN = 20
CONFIDENCE_BETA = 4.6


def _fmt(v: float) -> str:
    return f"{v:.3f}"


class _Frame:
    """Maps the environment box onto a fixed SVG viewbox (y axis up)."""

    def __init__(self, lower, upper):
        self.lo = np.asarray(lower, dtype=float)
        self.hi = np.asarray(upper, dtype=float)
        span = self.hi - self.lo
        self.scale = min((WIDTH - 2 * MARGIN) / span[0], (HEIGHT - 2 * MARGIN) / span[1])

    def pt(self, p):
        x = MARGIN + (p[0] - self.lo[0]) * self.scale
        y = HEIGHT - MARGIN - (p[1] - self.lo[1]) * self.scale
        return x, y

    def length(self, r: float) -> float:
        return r * self.scale


def _ellipse(frame: _Frame, center, matrix, style: str) -> str:
    """Ellipse {x : (x-c)^T M^{-1} (x-c) <= 1} given M (covariance-like)."""
    axes = covariance_axes(matrix)
    (l1, v1), (l2, _) = axes[0], axes[1]
    cx, cy = frame.pt(center)
    angle = -math.degrees(math.atan2(v1[1], v1[0]))
    rx = frame.length(math.sqrt(max(l1, 0.0)))
    ry = frame.length(math.sqrt(max(l2, 0.0)))
    return (
        f'<ellipse cx="{_fmt(cx)}" cy="{_fmt(cy)}" rx="{_fmt(rx)}" ry="{_fmt(ry)}" '
        f'transform="rotate({_fmt(angle)} {_fmt(cx)} {_fmt(cy)})" {style}/>'
    )


def _clip_line(normal, offset, lo, hi):
    """Segment of {normal . x = offset} inside the box, or None."""
    pts = []
    corners = [(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])]
    for i in range(4):
        a = np.array(corners[i])
        b = np.array(corners[(i + 1) % 4])
        fa = normal @ a - offset
        fb = normal @ b - offset
        if fa == 0.0:
            pts.append(a)
        if fa * fb < 0.0:
            pts.append(a + fa / (fa - fb) * (b - a))
    if len(pts) < 2:
        return None
    return pts[0], pts[1]


def render_svg(
    env_lower,
    env_upper,
    obstacles: Sequence = (),
    start=None,
    goal_vertices=None,
    path=None,
    tube_means=None,
    tube_covs=None,
    constraints: Sequence = (),
    dims: Sequence[int] = (0, 1),
    title: Optional[str] = None,
    metadata: Optional[str] = None,
) -> str:
    """SVG document for a 2-D scene; same inputs always give the same bytes.

    ``path`` and the tube are full states projected onto ``dims``; obstacles
    and constraints already live in the projected coordinates.
    """
    d = list(dims)
    frame = _Frame(np.asarray(env_lower)[d], np.asarray(env_upper)[d])
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}">',
    ]
    if metadata is not None:
        out.append(f"<metadata>{escape(metadata)}</metadata>")
    out.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    x0, y0 = frame.pt(frame.lo)
    x1, y1 = frame.pt(frame.hi)
    out.append(
        f'<rect class="env" x="{_fmt(x0)}" y="{_fmt(y1)}" width="{_fmt(x1 - x0)}" '
        f'height="{_fmt(y0 - y1)}" fill="none" stroke="black"/>'
    )
    if title:
        out.append(f'<text x="{MARGIN}" y="{MARGIN - 5}" font-size="12">{escape(title)}</text>')
    for obs in obstacles:
        out.append(_ellipse(frame, obs.center, np.linalg.inv(obs.shape), 'class="obstacle" fill="#c9a0dc" stroke="purple"'))
    if goal_vertices is not None:
        gv = _project_vertices(goal_vertices, d)
        c = gv.mean(axis=0)
        order = np.argsort(np.arctan2(gv[:, 1] - c[1], gv[:, 0] - c[0]))
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (frame.pt(p) for p in gv[order]))
        out.append(f'<polygon class="goal" points="{pts}" fill="#f4b6b6" stroke="red"/>')
    if tube_means is not None and tube_covs is not None:
        for mean, cov in zip(tube_means, tube_covs):
            m = np.asarray(mean)[d]
            c = np.asarray(cov)[np.ix_(d, d)]
            out.append(_ellipse(frame, m, CONFIDENCE_BETA * c, 'class="tube" fill="none" stroke="#6fa8dc"'))
    for normal, offset in constraints:
        seg = _clip_line(np.asarray(normal, dtype=float), float(offset), frame.lo, frame.hi)
        if seg is None:
            continue
        (ax, ay), (bx, by) = frame.pt(seg[0]), frame.pt(seg[1])
        out.append(
            f'<line class="constraint" x1="{_fmt(ax)}" y1="{_fmt(ay)}" x2="{_fmt(bx)}" y2="{_fmt(by)}" '
            f'stroke="orange"/>'
        )
    if path is not None:
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (frame.pt(p) for p in np.asarray(path)[:, d]))
        out.append(f'<polyline class="path" points="{pts}" fill="none" stroke="blue"/>')
    if start is not None:
        sx, sy = frame.pt(np.asarray(start)[d])
        out.append(f'<circle class="start" cx="{_fmt(sx)}" cy="{_fmt(sy)}" r="5" fill="green"/>')
    if goal_vertices is not None:
        gx, gy = frame.pt(_project_vertices(goal_vertices, d).mean(axis=0))
        out.append(f'<circle class="goal-marker" cx="{_fmt(gx)}" cy="{_fmt(gy)}" r="5" fill="red"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _project_vertices(vertices, dims) -> np.ndarray:
    """Distinct 2-D projections of polytope vertices."""
    return np.unique(np.round(np.asarray(vertices, dtype=float)[:, dims], 12), axis=0)


def render_result(problem, result, metadata: Optional[str] = None) -> str:
    """SVG for a result record (``PlanResult.to_dict()``, or its JSON) on its PlanProblem.

    Drawing only from the serialized record makes the picture a function
    of the result file.
    """
    if not isinstance(result, dict):
        result = result.to_dict()
    box = problem.env.box
    dims = list(problem.pos_dims)
    tube = result.get("tube")
    means = covs = None
    if tube is not None:
        means = tube["means"]
        n = len(means[0])
        covs = [np.reshape(c, (n, n)) for c in tube["covariances"]]
    path = result.get("nominal_states")
    if path is not None and len(path[0]) != box.dim:
        # planners in position space report position-only nominals
        full = np.zeros((len(path), box.dim))
        full[:, dims] = path
        path = full
    return render_svg(
        box.lower,
        box.upper,
        problem.obstacles,
        problem.nominal_start,
        problem.goal.vertices,
        path,
        means,
        covs,
        [(c["normal"], c["offset"]) for c in result.get("constraints", [])],
        dims=dims,
        title=f"status={result['status']} iterations={result['iterations']}",
        metadata=metadata,
    )
