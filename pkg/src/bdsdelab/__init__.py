"""Discrete solver and verification tools for backward doubly stochastic evolution systems."""

from .analysis import (
    EnergyReport,
    apriori_monitor,
    calibrate_stability_tolerance,
    convergence_study,
    energy_decay_study,
    energy_identity_residual,
    load_stability_fixture,
    stability_gap,
)
from .coefficients import (
    CHECKERS,
    BallSampler,
    CheckReport,
    CoefficientEvaluationError,
    CoefficientSystem,
    ConfigurationError,
    NormProvider,
    StructuralConstants,
    check_a6,
    check_b2,
    check_coercivity,
    check_growth,
    check_hemicontinuity,
    check_lipschitz,
    check_monotonicity,
    exponential_rescale,
)
from .galerkin import GalerkinModel, SineBasis, assemble_bdspde, assemble_p_laplacian, assemble_power_drift, refine_study
from .lattice import Field, ScenarioLattice, build_lattice, condexp, martingale_coefficient
from .models import REGISTRY, SHIPPED, ModelSpec, build_model
from .resolvent import ResolventConfig, ResolventError, resolve, verify_yosida_properties, yosida_apply
from .solver import DiscreteSolution, PicardNonConvergence, SolverConfig, solve, solve_linear_oracle

__version__ = "0.1.0"
