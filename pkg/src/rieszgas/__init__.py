"""Interacting particle systems with singular repulsion on the line.

Simulation of N ordered particles under quadratic confinement and
power-law repulsion, with an adaptive splitting integrator that keeps
the ordering exact, plus Wasserstein tooling and scripted experiments
over the long-time and large-N behaviour of the system.
"""

__version__ = "0.1.0"

from .measures import (
    EmpiricalMeasure,
    build_empirical,
    wasserstein_p_equal,
    wasserstein_p_cross,
    wasserstein2_to_law,
)
from .laws import (
    QuantileLaw,
    semicircle_law,
    semicircle_radius,
    uniform_law,
    point_law,
    empirical_law,
    equilibrium_points,
)
from .dynamics import (
    ModelParams,
    ParticleConfig,
    riesz_force,
    raw_force_vector,
    lyapunov_Hcal,
    weighted_interaction_stat,
    c_alpha_n,
)
from .brownian import PathBundle, PathResolutionError
from .integrator import (
    SchemeConfig,
    SampledTrajectory,
    StepFailureError,
    NearCollisionError,
    simulate,
    simulate_synchronous_pair,
    step,
)
from .experiments import (
    ExperimentReport,
    InitialCondition,
    run_contraction,
    run_cauchy_bound,
    run_chaos_rate,
    run_stationary,
    run_pde_residual,
    run_continuity,
    run_moment_monitor,
    write_artifacts,
    recompute_pass_flags,
)

__all__ = [
    "__version__",
    "EmpiricalMeasure",
    "build_empirical",
    "wasserstein_p_equal",
    "wasserstein_p_cross",
    "wasserstein2_to_law",
    "QuantileLaw",
    "semicircle_law",
    "semicircle_radius",
    "uniform_law",
    "point_law",
    "empirical_law",
    "equilibrium_points",
    "ModelParams",
    "ParticleConfig",
    "riesz_force",
    "raw_force_vector",
    "lyapunov_Hcal",
    "weighted_interaction_stat",
    "c_alpha_n",
    "PathBundle",
    "PathResolutionError",
    "SchemeConfig",
    "SampledTrajectory",
    "StepFailureError",
    "NearCollisionError",
    "simulate",
    "simulate_synchronous_pair",
    "step",
    "ExperimentReport",
    "InitialCondition",
    "run_contraction",
    "run_cauchy_bound",
    "run_chaos_rate",
    "run_stationary",
    "run_pde_residual",
    "run_continuity",
    "run_moment_monitor",
    "write_artifacts",
    "recompute_pass_flags",
]
