"""Seeded benchmark trials: repeated solves from perturbed starts, scored by Monte Carlo.

Each trial draws its start s from the problem's initial distribution and
plans for the same distribution re-centred on s, so trials differ in their
initial condition while keeping the initial spread. Every returned
trajectory is scored on the accurate model with a fresh Monte Carlo seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import numpy as np

from .dynamics import ControlBounds, DubinsModel, DubinsParams, DynamicsModel, InitialDistribution, derive_seed
from .dynamics import make_rng, sample_initial
from .engine import SAFE, EngineConfig, PlanProblem, PlanResult, solve
from .geometry import EllipsoidObstacle, EnvBounds, Hyperrectangle
from .risk import mc_risk_oracle

ORACLE_SAMPLES = 10_000
START_STREAM = 7
ORACLE_STREAM = 8


def mc_allowance(delta: float, n_samples: int) -> float:
    """Two binomial standard errors at risk level ``delta``."""
    return 2.0 * math.sqrt(delta * (1.0 - delta) / n_samples)


def dubins_benchmark() -> tuple[PlanProblem, DubinsModel]:
    """The stock Dubins scene: unit-scale course, goal box around (1, 0.5), three obstacles."""
    problem = PlanProblem(
        initial=InitialDistribution.uniform_box([-0.1, -0.1], [0.1, 0.1]),
        goal=Hyperrectangle([0.9, 0.4], [1.1, 0.6]).to_polytope(),
        obstacles=(
            EllipsoidObstacle.sphere([0.5, 0.25], 0.15),
            EllipsoidObstacle.sphere([0.1, 0.8], 0.12),
            EllipsoidObstacle.sphere([0.95, -0.2], 0.12),
        ),
        env=EnvBounds(Hyperrectangle([-0.5, -0.5], [1.5, 1.5])),
        control_bounds=ControlBounds([0.0, -math.pi], [3.0, math.pi]),
        horizon=30,
        delta=0.1,
    )
    return problem, DubinsModel(DubinsParams(dt=0.1, noise_half_width=0.1))


def trial_problem(problem: PlanProblem, seed: int) -> PlanProblem:
    """``problem`` with its initial distribution re-centred on a start drawn for ``seed``."""
    start = sample_initial(problem.initial, make_rng(seed, START_STREAM))
    return replace(problem, initial=problem.initial.shifted(start - problem.initial.center))


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    status: str
    iterations: int
    risk_estimate: float
    mc_risk: float
    objective: float
    wall_time: float


@dataclass(frozen=True)
class BenchmarkStats:
    trials: int
    safe: int
    safe_fraction: float
    violations: int  # safe trials whose MC risk exceeds delta + allowance
    iterations_mean: float
    iterations_std: float
    wall_time_mean: float
    wall_time_std: float
    mc_risk_mean: float  # over safe trials
    mc_risk_std: float
    objective_mean: float  # over safe trials
    objective_std: float

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std())


def summarize(records, delta: float, mc_samples: int = ORACLE_SAMPLES) -> BenchmarkStats:
    """Iterations and wall time over all trials; MC risk and objective over safe trials."""
    safe = [r for r in records if r.status == SAFE]
    bound = delta + mc_allowance(delta, mc_samples)
    it = _mean_std([r.iterations for r in records])
    wt = _mean_std([r.wall_time for r in records])
    mc = _mean_std([r.mc_risk for r in safe])
    obj = _mean_std([r.objective for r in safe])
    n = len(records)
    return BenchmarkStats(
        n,
        len(safe),
        len(safe) / n if n else math.nan,
        sum(r.mc_risk > bound for r in safe),
        *it,
        *wt,
        *mc,
        *obj,
    )


def run_trial(
    problem: PlanProblem,
    model: DynamicsModel,
    seed: int,
    config: EngineConfig = EngineConfig(),
    mc_samples: int = ORACLE_SAMPLES,
    planner=None,
    oracle_model: Optional[DynamicsModel] = None,
) -> tuple[TrialRecord, PlanResult]:
    """Solve one perturbed instance and score it on ``oracle_model`` (default ``model``)."""
    trial = trial_problem(problem, seed)
    t0 = time.perf_counter()
    result = solve(trial, model, planner, seed=seed, config=config)
    elapsed = time.perf_counter() - t0
    mc = math.nan
    objective = math.nan
    if result.trajectory is not None:
        mc = mc_risk_oracle(
            oracle_model or model,
            trial.initial,
            result.trajectory.controls,
            trial.obstacles,
            mc_samples,
            derive_seed(seed, ORACLE_STREAM),
            dims=trial.pos_dims,
            include_initial=config.include_initial,
            threads=config.threads,
        )
        objective = result.trajectory.objective
    risk = result.report.total if result.report is not None else math.nan
    return TrialRecord(seed, result.status, result.iterations, risk, mc, objective, elapsed), result


def run_benchmark(
    problem: PlanProblem,
    model: DynamicsModel,
    trials: int,
    seed: int = 0,
    config: EngineConfig = EngineConfig(),
    mc_samples: int = ORACLE_SAMPLES,
    planner=None,
    oracle_model: Optional[DynamicsModel] = None,
    progress: Optional[Callable[[TrialRecord], None]] = None,
) -> tuple[BenchmarkStats, list]:
    """Run ``trials`` trials with seeds derived from ``seed``; returns stats and per-trial records."""
    if trials < 1:
        raise ValueError("need at least one trial")
    records = []
    for k in range(trials):
        record, _ = run_trial(problem, model, derive_seed(seed, k), config, mc_samples, planner, oracle_model)
        records.append(record)
        if progress is not None:
            progress(record)
    return summarize(records, problem.delta, mc_samples), records
