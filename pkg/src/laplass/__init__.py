"""LaPlaSS: risk-bounded generate-and-test trajectory planning.

A convex planner proposes a control trajectory, a validator samples its
probabilistic flow tube and bounds the collision risk, and failed
candidates are refined with synthesized safety constraints. Dynamics are
closed-form (a stochastic Dubins car) or learned with VAEs and a linear
latent map.
"""

__version__ = "0.1.0"

from .dynamics import ControlBounds, DubinsModel, DubinsParams, InitialDistribution  # noqa: E402
from .engine import EngineConfig, PlanProblem, PlanResult, objective_report, solve  # noqa: E402
from .geometry import EllipsoidObstacle, EnvBounds, Halfspace, Hyperrectangle, Polytope  # noqa: E402

__all__ = [
    "ControlBounds",
    "DubinsModel",
    "DubinsParams",
    "EllipsoidObstacle",
    "EngineConfig",
    "EnvBounds",
    "Halfspace",
    "Hyperrectangle",
    "InitialDistribution",
    "PlanProblem",
    "PlanResult",
    "Polytope",
    "__version__",
    "objective_report",
    "solve",
]
