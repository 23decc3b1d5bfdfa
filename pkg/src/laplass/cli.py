"""Command-line interface.

Exit codes: 0 success, 1 planning or validation failed (infeasible,
iteration limit, or risk above the bound), 2 usage or input error.

Every artifact embeds a run manifest (tool version, command, seed and a
hash of the effective configuration and inputs). Wall-clock timings vary
from run to run, so they go to a ``timings.json`` sidecar instead; the
artifacts themselves are byte-identical for equal inputs and seeds.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .benchmark import ORACLE_SAMPLES, mc_allowance, run_benchmark
from .dynamics import derive_seed
from .engine import SAFE, EngineConfig, RealLinearizedPlanner, solve
from .geometry import Hyperrectangle
from .problemfile import ProblemFileError, check_schema, load_problem
from .risk import mc_risk_oracle
from .serialize import dumps, read_json
from .validator import ValidatorParams, validate

log = logging.getLogger("laplass")

CONFIG_DIR_ENV = "LAPLASS_CONFIG_DIR"
CONFIG_NAME = "laplass.json"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
RISK_STREAM = 11


class UsageError(Exception):
    """Bad arguments or input files; reported on stderr with exit code 2."""


# ---------------------------------------------------------------- config


def _engine_fields() -> dict:
    return {f.name: f for f in dataclasses.fields(EngineConfig)}


def _schema_for(fields: dict) -> dict:
    types = {int: "integer", float: "number", bool: "boolean", "int": "integer", "float": "number", "bool": "boolean"}
    props = {}
    for name, f in fields.items():
        kind = types.get(f.type)
        props[name] = {"type": kind} if kind else {}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _train_fields() -> dict:
    from .learning.train import TrainConfig

    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def config_schema() -> dict:
    train = _schema_for(_train_fields())
    train["properties"]["hidden"] = {"type": "array", "items": {"type": "integer", "minimum": 1}}
    train["properties"]["preset"] = {"type": "string"}
    return {
        "type": "object",
        "properties": {
            "engine": _schema_for(_engine_fields()),
            "train": train,
            "benchmark": {
                "type": "object",
                "properties": {"mc_samples": {"type": "integer", "minimum": 1}},
                "additionalProperties": False,
            },
        },
        "additionalProperties": False,
    }


def load_config(path: Optional[str]) -> dict:
    """The --config file, else $LAPLASS_CONFIG_DIR/laplass.json if present, else {}."""
    if path is None:
        base = os.environ.get(CONFIG_DIR_ENV)
        if not base or not (Path(base) / CONFIG_NAME).is_file():
            return {}
        path = str(Path(base) / CONFIG_NAME)
    try:
        doc = read_json(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        check_schema(doc, config_schema(), "config")
    except ProblemFileError as exc:
        raise UsageError(str(exc)) from exc
    return doc


def engine_config(cfg: dict, threads: int) -> EngineConfig:
    return dataclasses.replace(EngineConfig(**cfg.get("engine", {})), threads=threads)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()


def _file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(q.name.encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def run_manifest(command: str, seed: int, config: dict, inputs: dict) -> dict:
    """Deterministic provenance record; thread counts are excluded since they do not change results."""
    digest = hashlib.sha256(
        _canonical({"command": command, "config": config, "inputs": {k: _file_digest(v) for k, v in inputs.items()}})
    ).hexdigest()
    return {"tool": "laplass", "version": __version__, "command": command, "seed": seed, "config_hash": digest}


def _engine_dict(config: EngineConfig) -> dict:
    d = dataclasses.asdict(config)
    d.pop("threads")
    return d


class Timer:
    def __init__(self):
        self.phases = {}

    def phase(self, name: str):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.t0

        return _Phase()

    def write(self, path: Path, manifest: dict) -> None:
        path.write_text(dumps({"manifest": manifest, "timings": self.phases}))


# ------------------------------------------------------------ CSV files


def _manifest_comment(manifest: dict) -> str:
    return "# manifest " + json.dumps(manifest, sort_keys=True) + "\n"


def trajectory_csv(controls, states, manifest: dict) -> str:
    """Rows t = 0..T of ``t, x..., u...``; the final row has no control."""
    controls = np.asarray(controls, dtype=float)
    states = np.asarray(states, dtype=float)
    n, m = states.shape[1], controls.shape[1]
    buf = io.StringIO()
    buf.write(_manifest_comment(manifest))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *(f"x{i}" for i in range(n)), *(f"u{j}" for j in range(m))])
    for t in range(len(states)):
        u = [f"{v:.17g}" for v in controls[t]] if t < len(controls) else [""] * m
        w.writerow([t, *(f"{v:.17g}" for v in states[t]), *u])
    return buf.getvalue()


def read_trajectory_csv(path) -> np.ndarray:
    """Controls (T, m) from a trajectory CSV; states are informational."""
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    except OSError as exc:
        raise UsageError(f"cannot read trajectory {path}: {exc}") from exc
    rows = list(csv.reader(lines))
    if not rows:
        raise UsageError(f"{path}: empty trajectory file")
    header = rows[0]
    ucols = [i for i, h in enumerate(header) if h.startswith("u")]
    if not header or header[0] != "t" or not ucols:
        raise UsageError(f"{path}: header must be t, x..., u...")
    controls = []
    for k, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise UsageError(f"{path}: row {k + 1} has {len(row)} fields, expected {len(header)}")
        vals = [row[i] for i in ucols]
        if all(v == "" for v in vals):
            continue
        try:
            controls.append([float(v) for v in vals])
        except ValueError as exc:
            raise UsageError(f"{path}: row {k + 1}: {exc}") from exc
    if not controls:
        raise UsageError(f"{path}: no controls")
    return np.array(controls)


# ------------------------------------------------------------- helpers


def _load_problem(path):
    try:
        return load_problem(path)
    except OSError as exc:
        raise UsageError(f"cannot read problem {path}: {exc}") from exc
    except ProblemFileError as exc:
        raise UsageError(str(exc)) from exc


def _models(spec, model_override: Optional[str], config: EngineConfig):
    """(accurate model, planner, model path or None) for a problem."""
    if not spec.learned:
        if model_override:
            raise UsageError("--model only applies to problems with learned dynamics")
        return spec.dubins_model(), None, None
    from .learning import LatentPlanner, LearnedDynamics, load_model

    path = Path(model_override) if model_override else spec.model_path()
    try:
        model = load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc
    if model.vae_x.input_dim != spec.problem.initial.dim:
        raise UsageError("model state dimension does not match the problem")
    return LearnedDynamics(model), LatentPlanner(model, config), path


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sidecar(out: Path) -> Path:
    """Timings path for an output: inside a directory, or ``<file>.timings.json`` next to a file."""
    return out / "timings.json" if out.is_dir() else out.with_name(f"{out.name}.timings.json")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ------------------------------------------------------------ commands


def cmd_gen_data(args, cfg) -> int:
    from .learning import generate_dataset
    from .learning.data import dataset_to_csv

    spec = _load_problem(args.problem)
    if spec.learned:
        raise UsageError("gen-data needs closed-form dynamics")
    timer = Timer()
    with timer.phase("generate"):
        box = spec.problem.env.box
        ds = generate_dataset(
            spec.dubins_model(),
            Hyperrectangle(box.lower, box.upper),
            spec.problem.control_bounds,
            args.trajectories,
            args.length,
            args.seed,
            args.smoothing,
        )
    manifest = run_manifest(
        "gen-data",
        args.seed,
        {"trajectories": args.trajectories, "length": args.length, "smoothing": args.smoothing},
        {"problem": args.problem},
    )
    out = Path(args.out)
    _write(out, _manifest_comment(manifest) + dataset_to_csv(ds))
    timer.write(_sidecar(out), manifest)
    log.info("wrote %d transitions to %s", ds.n_transitions, out)
    return EXIT_OK


TRAIN_FLAGS = ("epochs", "batch_size", "learning_rate", "w_rec", "w_pred", "w_kl", "m_pred", "latent_x", "latent_u")


def train_config(args, cfg):
    from .learning.train import PRESETS, TrainConfig

    section = dict(cfg.get("train", {}))
    preset = args.preset or section.pop("preset", "dubins-small")
    section.pop("preset", None)
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    values = PRESETS[preset].to_dict()
    values.update(section)
    for name in TRAIN_FLAGS:
        val = getattr(args, name)
        if val is not None:
            values[name] = val
    if args.hidden is not None:
        values["hidden"] = args.hidden
    values["seed"] = args.seed
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"training configuration: {exc}") from exc


def cmd_train(args, cfg) -> int:
    from .learning import fit_learned_model, read_csv, save_model

    tc = train_config(args, cfg)
    timer = Timer()
    with timer.phase("load"):
        try:
            ds = read_csv(args.dataset)
        except OSError as exc:
            raise UsageError(f"cannot read dataset {args.dataset}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(f"{args.dataset}: {exc}") from exc
    with timer.phase("train"):
        model = fit_learned_model(ds, tc)
    manifest = run_manifest("train", args.seed, tc.to_dict(), {"dataset": args.dataset})
    out = _out_dir(args.out)
    save_model(model, out, {"manifest": manifest})
    timer.write(out.parent / f"{out.name}.timings.json", manifest)
    log.info("final loss %.6g; model written to %s", model.loss_curve[-1], out)
    return EXIT_OK


def cmd_plan(args, cfg) -> int:
    from .plot import render_result

    spec = _load_problem(args.problem)
    config = engine_config(cfg, args.threads)
    accurate, planner, model_path = _models(spec, args.model, config)
    if planner is None:
        planner = RealLinearizedPlanner(accurate.params.dt, config)
    timer = Timer()
    with timer.phase("solve"):
        result = solve(spec.problem, accurate, planner, seed=args.seed, config=config)
    inputs = {"problem": args.problem}
    if model_path is not None:
        inputs["model"] = model_path
    manifest = run_manifest("plan", args.seed, _engine_dict(config), inputs)
    out = _out_dir(args.out)
    doc = result.to_dict()
    text = dumps({"manifest": manifest, "result": doc})
    with timer.phase("write"):
        _write(out / "result.json", text)
        if result.trajectory is not None:
            _write(out / "trajectory.csv", trajectory_csv(result.trajectory.controls, _full_states(spec, result), manifest))
        # draw from the serialized record so the plot is a function of result.json
        _write(out / "plot.svg", render_result(spec.problem, json.loads(text)["result"], json.dumps(manifest, sort_keys=True)))
        if args.dump_qp and planner.last_qp is not None:
            _write(Path(args.dump_qp), planner.last_qp.to_text())
    timer.phases["engine_wall_time"] = result.wall_time
    timer.write(out / "timings.json", manifest)
    print(f"{result.status}: {result.iterations} iterations" + (f" ({result.message})" if result.message else ""))
    return EXIT_OK if result.status == SAFE else EXIT_FAIL


def _full_states(spec, result) -> np.ndarray:
    states = np.asarray(result.trajectory.nominal_states, dtype=float)
    n = spec.problem.initial.dim
    if states.shape[1] == n:
        return states
    full = np.zeros((len(states), n))
    full[:, list(spec.problem.pos_dims)] = states
    return full


def _check_controls(spec, controls) -> None:
    p = spec.problem
    if controls.shape != (p.horizon, len(p.control_bounds.lower)):
        raise UsageError(f"trajectory has {controls.shape} controls, problem expects ({p.horizon}, {len(p.control_bounds.lower)})")


def cmd_validate(args, cfg) -> int:
    spec = _load_problem(args.problem)
    config = engine_config(cfg, args.threads)
    accurate, _, model_path = _models(spec, args.model, config)
    controls = read_trajectory_csv(args.trajectory)
    _check_controls(spec, controls)
    p = spec.problem
    params = ValidatorParams(
        n_samples=config.n_samples,
        beta=config.beta_init,
        window=config.window,
        pos_dims=p.pos_dims,
        include_initial=config.include_initial,
        threads=config.threads,
    )
    timer = Timer()
    with timer.phase("validate"):
        try:
            outcome = validate(controls, p.obstacles, p.delta, accurate, p.initial, params, p.env, seed=args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    inputs = {"problem": args.problem, "trajectory": args.trajectory}
    if model_path is not None:
        inputs["model"] = model_path
    manifest = run_manifest("validate", args.seed, _engine_dict(config), inputs)
    safe = outcome.report.total <= p.delta
    doc = {
        "manifest": manifest,
        "safe": safe,
        "delta": p.delta,
        "report": outcome.report.to_dict(),
        "constraint": None if outcome.constraint is None else outcome.constraint.to_dict(),
    }
    out = Path(args.out)
    _write(out, dumps(doc))
    if args.dump_tube and outcome.tube is not None:
        _write(Path(args.dump_tube), dumps({"manifest": manifest, "tube": outcome.tube.to_dict()}))
    timer.write(_sidecar(out), manifest)
    print(f"risk {outcome.report.total:.6g} ({'safe' if safe else 'unsafe'} at delta {p.delta:g})")
    return EXIT_OK if safe else EXIT_FAIL


def cmd_assess_risk(args, cfg) -> int:
    from .flowtube import compute_pft
    from .risk import total_risk

    spec = _load_problem(args.problem)
    config = engine_config(cfg, args.threads)
    accurate, _, model_path = _models(spec, args.model, config)
    controls = read_trajectory_csv(args.trajectory)
    _check_controls(spec, controls)
    p = spec.problem
    timer = Timer()
    with timer.phase("flow_tube"):
        tube = compute_pft(accurate, p.initial, controls, config.n_samples, args.seed, config.threads)
    with timer.phase("risk"):
        report = total_risk(tube, p.obstacles, p.pos_dims, config.include_initial)
    doc_mc = None
    if args.mc:
        with timer.phase("monte_carlo"):
            mc = mc_risk_oracle(
                accurate,
                p.initial,
                controls,
                p.obstacles,
                args.mc,
                derive_seed(args.seed, RISK_STREAM),
                p.pos_dims,
                config.include_initial,
                config.threads,
            )
        doc_mc = {"samples": args.mc, "risk": mc, "allowance": mc_allowance(p.delta, args.mc)}
    inputs = {"problem": args.problem, "trajectory": args.trajectory}
    if model_path is not None:
        inputs["model"] = model_path
    manifest = run_manifest("assess-risk", args.seed, {**_engine_dict(config), "mc": args.mc}, inputs)
    doc = {"manifest": manifest, "delta": p.delta, "report": report.to_dict(), "monte_carlo": doc_mc, "tube": tube.to_dict()}
    out = Path(args.out)
    _write(out, dumps(doc))
    timer.write(_sidecar(out), manifest)
    print(f"risk {report.total:.6g}" + ("" if doc_mc is None else f"; Monte Carlo {doc_mc['risk']:.6g}"))
    return EXIT_OK


def cmd_benchmark(args, cfg) -> int:
    spec = _load_problem(args.problem)
    config = engine_config(cfg, args.threads)
    accurate, planner, model_path = _models(spec, args.model, config)
    mc_samples = args.mc_samples or cfg.get("benchmark", {}).get("mc_samples", ORACLE_SAMPLES)
    timer = Timer()

    def progress(r):
        log.info("trial seed %d: %s, %d iterations, MC risk %.4f", r.seed, r.status, r.iterations, r.mc_risk)

    with timer.phase("trials"):
        stats, records = run_benchmark(
            spec.problem, accurate, args.trials, args.seed, config, mc_samples, planner, progress=progress
        )
    inputs = {"problem": args.problem}
    if model_path is not None:
        inputs["model"] = model_path
    manifest = run_manifest(
        "benchmark", args.seed, {**_engine_dict(config), "trials": args.trials, "mc_samples": mc_samples}, inputs
    )
    # per-trial wall times vary between runs, so they live in the sidecar with the other timings
    trials = [{k: v for k, v in dataclasses.asdict(r).items() if k != "wall_time"} for r in records]
    stat_doc = {k: v for k, v in stats.to_dict().items() if not k.startswith("wall_time")}
    out = Path(args.out)
    _write(out, dumps({"manifest": manifest, "stats": stat_doc, "trials": trials}))
    timer.phases["wall_time_mean"] = stats.wall_time_mean
    timer.phases["wall_time_std"] = stats.wall_time_std
    timer.phases["trial_wall_times"] = [r.wall_time for r in records]
    timer.write(_sidecar(out), manifest)
    print(
        f"{stats.safe}/{stats.trials} safe; mean iterations {stats.iterations_mean:.3g}; "
        f"mean MC risk {stats.mc_risk_mean:.4g}; mean objective {stats.objective_mean:.4g}; "
        f"mean wall time {stats.wall_time_mean:.3g} s"
    )
    return EXIT_OK


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laplass", description="Risk-bounded generate-and-test trajectory planner.")
    parser.add_argument("--version", action="version", version=f"laplass {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for flow-tube sampling (default 1)")
    parser.add_argument(
        "--config", default=None, help=f"JSON config file (default ${CONFIG_DIR_ENV}/{CONFIG_NAME} if present)"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a training dataset from a closed-form problem")
    p.add_argument("problem")
    p.add_argument("--trajectories", type=int, required=True)
    p.add_argument("--length", type=int, required=True, help="rows per trajectory")
    p.add_argument("--smoothing", type=float, default=0.8, help="low-pass factor for excitation controls")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train VAEs and the latent linear map on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--preset", default=None)
    for name in TRAIN_FLAGS:
        kind = int if name in ("epochs", "batch_size", "m_pred", "latent_x", "latent_u") else float
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    p.add_argument("--hidden", type=int, nargs="+", default=None, help="hidden layer widths")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("plan", cmd_plan, "plan a risk-bounded trajectory"),
        ("validate", cmd_validate, "validate a trajectory against the risk bound"),
        ("assess-risk", cmd_assess_risk, "report the collision risk of a trajectory"),
        ("benchmark", cmd_benchmark, "run seeded benchmark trials"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("problem")
        if name in ("validate", "assess-risk"):
            p.add_argument("trajectory", help="trajectory CSV (t, x..., u...)")
        p.add_argument("--model", default=None, help="model directory overriding the problem file")
        p.add_argument("--out", required=True, help="output directory" if name == "plan" else "output JSON file")
        if name == "plan":
            p.add_argument("--dump-qp", default=None, metavar="PATH", help="write the last trajectory QP as text")
        if name == "validate":
            p.add_argument("--dump-tube", default=None, metavar="PATH", help="write the flow tube as JSON")
        if name == "assess-risk":
            p.add_argument("--mc", type=int, default=0, help="also estimate risk from this many rollouts")
        if name == "benchmark":
            p.add_argument("--trials", type=int, default=100)
            p.add_argument("--mc-samples", type=int, default=None)
        p.set_defaults(func=func)
    return parser


def _check_args(args) -> None:
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    for name in ("trajectories", "length", "trials"):
        if getattr(args, name, 1) < 1:
            raise UsageError(f"--{name} must be at least 1")
    if getattr(args, "mc", 0) < 0 or (getattr(args, "mc_samples", None) or 1) < 1:
        raise UsageError("Monte Carlo sample counts must be positive")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _check_args(args)
        cfg = load_config(args.config)
        try:
            engine_config(cfg, args.threads)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"engine configuration: {exc}") from exc
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"laplass: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
