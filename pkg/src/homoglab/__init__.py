"""Numerical laboratory for periodic homogenization with time-random coefficients.

Submodules
----------
torus     periodic fields and spectral calculus on the unit torus
media     driver diffusions, Malliavin derivatives, coefficient models
cells     cell problems, corrector cascades and effective tensors
solvers   finite-difference parabolic solvers on a truncated box
limits    limit covariance, fluctuation assembly, rate fits, variance oracles
harness   experiment configuration, Monte Carlo orchestration and outputs
"""
from ._backend import available as available_backends
from ._backend import default_name as default_backend
from .cells import (
    CellSolveError,
    CorrectorSet,
    EffectiveTensors,
    corrector_cascade,
    effective_matrix,
    effective_tensors,
    solve_corrector0,
)
from .harness import ConfigError, ExperimentConfig, load_config, run_experiment
from .limits import (
    LimitCovariance,
    assemble_U,
    assemble_V,
    fit_rate,
    functional_variance_spde,
    lambda_from_correlation,
    lambda_from_poisson_1d,
    sqrt_psd,
)
from .media import (
    CoefficientModel,
    DiffusionSpec,
    DriverPath,
    ModelError,
    check_condition_S_1d,
    coefficient_at,
    invariant_density_1d,
    make_driver,
    make_model,
    simulate_driver,
    simulate_malliavin,
)
from .solvers import (
    BoxDomain,
    ResolutionError,
    SpaceTimeField,
    fit_gaussian_bound,
    fundamental_probe,
    solve_cascade_pde,
    solve_fine,
    solve_homogenized,
    solve_limit_spde,
)
from .torus import GridField, TorusGrid, make_grid

__version__ = "0.1.0"

__all__ = [
    "BoxDomain", "CellSolveError", "CoefficientModel", "ConfigError", "CorrectorSet",
    "DiffusionSpec", "DriverPath", "EffectiveTensors", "ExperimentConfig", "GridField",
    "LimitCovariance", "ModelError", "ResolutionError", "SpaceTimeField", "TorusGrid",
    "assemble_U", "assemble_V", "available_backends", "check_condition_S_1d",
    "coefficient_at", "corrector_cascade", "default_backend", "effective_matrix",
    "effective_tensors", "fit_gaussian_bound", "fit_rate", "functional_variance_spde",
    "fundamental_probe", "invariant_density_1d", "lambda_from_correlation",
    "lambda_from_poisson_1d", "load_config", "make_driver", "make_grid", "make_model",
    "run_experiment", "simulate_driver", "simulate_malliavin", "solve_cascade_pde",
    "solve_corrector0", "solve_fine", "solve_homogenized", "solve_limit_spde",
    "sqrt_psd",
]
