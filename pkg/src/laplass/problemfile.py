"""Problem files: JSON documents describing a planning problem and its dynamics.

Documents are checked against a JSON schema that rejects unknown keys, so
typos surface as errors naming the offending key instead of being
silently ignored. Relative model paths resolve against the problem
file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .dynamics import ControlBounds, DubinsModel, DubinsParams, InitialDistribution
from .engine import LATENT, REAL, PlanProblem
from .geometry import EllipsoidObstacle, EnvBounds, Halfspace, Hyperrectangle, Polytope
from .serialize import read_json

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}
_BOX = {
    "type": "object",
    "properties": {"lower": _VEC, "upper": _VEC},
    "required": ["lower", "upper"],
    "additionalProperties": False,
}


def _closed(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


PROBLEM_SCHEMA = _closed(
    {
        "initial": {
            "oneOf": [
                _closed({"kind": {"const": "point"}, "mean": _VEC}, ["kind", "mean"]),
                _closed({"kind": {"const": "uniform-box"}, "lower": _VEC, "upper": _VEC}, ["kind", "lower", "upper"]),
                _closed({"kind": {"const": "gaussian"}, "mean": _VEC, "cov": _MAT}, ["kind", "mean", "cov"]),
            ]
        },
        "goal": {
            "oneOf": [
                _closed({"box": _BOX}, ["box"]),
                _closed(
                    {
                        "halfspaces": {
                            "type": "array",
                            "minItems": 1,
                            "items": _closed({"normal": _VEC, "offset": {"type": "number"}}, ["normal", "offset"]),
                        },
                        "vertices": _MAT,
                    },
                    ["halfspaces"],
                ),
            ]
        },
        "obstacles": {
            "type": "array",
            "items": {
                "oneOf": [
                    _closed({"center": _VEC, "radius": {"type": "number", "exclusiveMinimum": 0}}, ["center", "radius"]),
                    _closed({"center": _VEC, "shape": _MAT}, ["center", "shape"]),
                    _closed({"center": _VEC, "semi_axes": _VEC, "rotation": _MAT}, ["center", "semi_axes"]),
                ]
            },
        },
        "env": _BOX,
        "control_bounds": _BOX,
        "horizon": {"type": "integer", "minimum": 1},
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "control_weight": {"oneOf": [_VEC, _MAT]},
        "state_weight": {"oneOf": [_VEC, _MAT]},
        "mode": {"enum": [REAL, LATENT]},
        "pos_dims": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "start": _VEC,
        "dynamics": {
            "oneOf": [
                _closed(
                    {
                        "dubins": _closed(
                            {
                                "dt": {"type": "number", "exclusiveMinimum": 0},
                                "noise_half_width": {"type": "number", "minimum": 0},
                            }
                        )
                    },
                    ["dubins"],
                ),
                _closed({"learned": _closed({"model": {"type": "string"}}, ["model"])}, ["learned"]),
            ]
        },
    },
    ["initial", "goal", "obstacles", "env", "control_bounds", "horizon", "delta", "dynamics"],
)


class ProblemFileError(ValueError):
    """A problem document is malformed."""


def _path(error: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def check_schema(doc, schema=PROBLEM_SCHEMA, what: str = "problem") -> None:
    """Raise ProblemFileError naming the offending key on the first schema violation."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), str(e.absolute_path)))
    if not errors:
        return
    err = errors[0]
    if err.validator == "oneOf" and err.context:
        # report the variant that came closest instead of the bare oneOf failure
        err = min(err.context, key=lambda e: (e.validator != "additionalProperties", -len(list(e.absolute_path))))
    raise ProblemFileError(f"{what}: at {_path(err)}: {err.message}")


@dataclass(frozen=True)
class ProblemSpec:
    problem: PlanProblem
    dynamics: dict  # {"dubins": {...}} or {"learned": {"model": absolute path}}
    document: dict

    @property
    def learned(self) -> bool:
        return "learned" in self.dynamics

    def dubins_model(self) -> DubinsModel:
        if self.learned:
            raise ProblemFileError("problem uses learned dynamics, not Dubins")
        return DubinsModel(DubinsParams(**self.dynamics["dubins"]))

    def model_path(self) -> Path:
        if not self.learned:
            raise ProblemFileError("problem does not name a learned model")
        return Path(self.dynamics["learned"]["model"])


def _initial(d: dict) -> InitialDistribution:
    if d["kind"] == "point":
        return InitialDistribution.point(d["mean"])
    if d["kind"] == "uniform-box":
        return InitialDistribution.uniform_box(d["lower"], d["upper"])
    return InitialDistribution.gaussian(d["mean"], d["cov"])


def _goal(d: dict) -> Polytope:
    if "box" in d:
        return Hyperrectangle(d["box"]["lower"], d["box"]["upper"]).to_polytope()
    hs = tuple(Halfspace.from_coefficients(h["normal"], h["offset"]) for h in d["halfspaces"])
    return Polytope(hs, None if "vertices" not in d else tuple(map(tuple, d["vertices"])))


def _obstacle(d: dict) -> EllipsoidObstacle:
    if "radius" in d:
        return EllipsoidObstacle.sphere(d["center"], d["radius"])
    if "shape" in d:
        return EllipsoidObstacle(d["center"], d["shape"])
    return EllipsoidObstacle.from_semi_axes(d["center"], d["semi_axes"], d.get("rotation"))


def parse_problem(doc: dict, base_dir: Optional[Path] = None) -> ProblemSpec:
    """Schema-check ``doc`` and build the problem; geometric errors become ProblemFileError."""
    check_schema(doc)
    mode = doc.get("mode", REAL)
    dynamics = {k: dict(v) for k, v in doc["dynamics"].items()}
    if "learned" in dynamics:
        path = Path(dynamics["learned"]["model"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        dynamics["learned"]["model"] = str(path)
        if mode != LATENT:
            raise ProblemFileError("problem: learned dynamics require mode 'latent'")
    elif mode == LATENT:
        raise ProblemFileError("problem: mode 'latent' requires learned dynamics")
    try:
        problem = PlanProblem(
            initial=_initial(doc["initial"]),
            goal=_goal(doc["goal"]),
            obstacles=tuple(_obstacle(o) for o in doc["obstacles"]),
            env=EnvBounds(Hyperrectangle(doc["env"]["lower"], doc["env"]["upper"])),
            control_bounds=ControlBounds(doc["control_bounds"]["lower"], doc["control_bounds"]["upper"]),
            horizon=doc["horizon"],
            delta=doc["delta"],
            control_weight=None if "control_weight" not in doc else np.asarray(doc["control_weight"], dtype=float),
            state_weight=None if "state_weight" not in doc else np.asarray(doc["state_weight"], dtype=float),
            mode=mode,
            pos_dims=tuple(doc.get("pos_dims", (0, 1))),
            start=None if "start" not in doc else np.asarray(doc["start"], dtype=float),
        )
    except ValueError as exc:
        raise ProblemFileError(f"problem: {exc}") from exc
    _check_dims(problem)
    return ProblemSpec(problem, dynamics, doc)


def _check_dims(p: PlanProblem) -> None:
    n = p.initial.dim
    k = len(p.pos_dims)
    if any(d >= n for d in p.pos_dims) or len(set(p.pos_dims)) != k:
        raise ProblemFileError("problem: pos_dims must be distinct state indices")
    if p.env.box.dim != n:
        raise ProblemFileError("problem: env bounds must cover the full state")
    if any(o.dim != k for o in p.obstacles):
        raise ProblemFileError("problem: obstacles must live in the position dimensions")
    if any(h.normal.shape[0] != n for h in p.goal.halfspaces):
        raise ProblemFileError("problem: goal must be defined over the full state")
    if p.start is not None and p.start.shape != (n,):
        raise ProblemFileError("problem: start must match the state dimension")


def load_problem(path) -> ProblemSpec:
    path = Path(path)
    try:
        doc = read_json(path)
    except ValueError as exc:
        raise ProblemFileError(f"{path}: invalid JSON: {exc}") from exc
    return parse_problem(doc, path.parent)


def problem_document(problem: PlanProblem, dynamics: dict) -> dict:
    """JSON document for ``problem`` (goal written as halfspaces plus vertices)."""
    init = problem.initial
    if init.kind == "point":
        initial = {"kind": "point", "mean": init.mean.tolist()}
    elif init.kind == "uniform-box":
        initial = {"kind": "uniform-box", "lower": init.lower.tolist(), "upper": init.upper.tolist()}
    else:
        initial = {"kind": "gaussian", "mean": init.mean.tolist(), "cov": init.cov.tolist()}
    goal = {"halfspaces": [{"normal": h.normal.tolist(), "offset": h.offset} for h in problem.goal.halfspaces]}
    if problem.goal.vertices is not None:
        goal["vertices"] = problem.goal.vertices.tolist()
    doc = {
        "initial": initial,
        "goal": goal,
        "obstacles": [{"center": o.center.tolist(), "shape": o.shape.tolist()} for o in problem.obstacles],
        "env": {"lower": problem.env.box.lower.tolist(), "upper": problem.env.box.upper.tolist()},
        "control_bounds": {"lower": problem.control_bounds.lower.tolist(), "upper": problem.control_bounds.upper.tolist()},
        "horizon": problem.horizon,
        "delta": problem.delta,
        "mode": problem.mode,
        "pos_dims": list(problem.pos_dims),
        "dynamics": dynamics,
    }
    for name in ("control_weight", "state_weight", "start"):
        val = getattr(problem, name)
        if val is not None:
            doc[name] = np.asarray(val).tolist()
    return doc

