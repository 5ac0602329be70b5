"""Mean estimation under nonignorable nonresponse with an instrument.

The outcome mean of a partially observed variable is identified even when
missingness depends on the outcome itself, provided a fully observed
binary instrument shifts response but is conditionally independent of the
outcome given the other covariates. This package fits the resulting
doubly robust Z-estimators, reports joint sandwich standard errors, and
ships the Monte Carlo harness and exact small-population oracles used to
validate them.
"""

from .core import Dataset, DesignFormula, ObservedRecord, ParamVector, flatten, unflatten
from .errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    DegenerateMixtureError,
    EstimationError,
    IvmeanError,
    SolverEvaluationError,
    WeightExplosionError,
)
from .inference import (
    EstimationResult,
    estimate_cc,
    estimate_full,
    estimate_mar,
    estimate_phi_hat,
    estimate_phi_tilde,
    hajek_mean,
    phi_covariance_assembled,
    sandwich_joint,
)
from .models import ModelSpec, OutcomeLaw, expit
from .oracle import (
    IdentificationReport,
    ToyPopulation,
    default_toy_population,
    exact_expectation,
    verify_identification,
)
from .simulation import (
    AnalogConfig,
    DgpConfig,
    MetricRow,
    SimulationReport,
    draw_analog_sample,
    draw_sample,
    run_analog,
    run_scenario,
    scenario_model_spec,
    true_outcome_mean,
)
from .solver import SolveOutcome, SolverConfig, numerical_jacobian, solve_system

__version__ = "0.1.0"

__all__ = [
    "AnalogConfig",
    "ConfigurationError",
    "ContractViolation",
    "DataError",
    "Dataset",
    "DegenerateMixtureError",
    "DesignFormula",
    "DgpConfig",
    "EstimationError",
    "EstimationResult",
    "IdentificationReport",
    "IvmeanError",
    "MetricRow",
    "ModelSpec",
    "ObservedRecord",
    "OutcomeLaw",
    "ParamVector",
    "SimulationReport",
    "SolveOutcome",
    "SolverConfig",
    "SolverEvaluationError",
    "ToyPopulation",
    "WeightExplosionError",
    "default_toy_population",
    "draw_analog_sample",
    "draw_sample",
    "estimate_cc",
    "estimate_full",
    "estimate_mar",
    "estimate_phi_hat",
    "estimate_phi_tilde",
    "exact_expectation",
    "expit",
    "flatten",
    "hajek_mean",
    "numerical_jacobian",
    "phi_covariance_assembled",
    "run_analog",
    "run_scenario",
    "sandwich_joint",
    "scenario_model_spec",
    "solve_system",
    "true_outcome_mean",
    "unflatten",
    "verify_identification",
]
