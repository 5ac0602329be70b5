"""Parametric working models for response, instrument, and outcome.

The response probability is logistic in an index over x plus an outcome
tilt:  P(R=1 | y, x) = expit{ eta(x; xi) + gamma' (y * s(x)) }.
A nonzero tilt makes missingness depend on the outcome itself. The
instrument model p(z | u; beta) is Bernoulli-logistic; the outcome model
p(y | u; psi) is Bernoulli-logistic for binary y or a linear mean for
continuous y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DesignFormula, ObservedRecord, ParamVector, evaluate_design
from .errors import ConfigurationError, ContractViolation


def expit(t):
    """Numerically stable logistic function, elementwise.

    Never overflows: the exponential is only ever taken of a nonpositive
    argument.
    """
    arr = np.asarray(t, dtype=float)
    scalar = arr.ndim == 0
    flat = np.atleast_1d(arr)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    e = np.exp(flat[~pos])
    out[~pos] = e / (1.0 + e)
    return float(out[0]) if scalar else out.reshape(arr.shape)


@dataclass(frozen=True)
class ModelSpec:
    """Design formulas and outcome kind for one estimation problem.

    eta_formula may use z (the exclusion restriction lives in the outcome,
    not the response model); z_formula and y_formula are over u only.
    selection_bias_design is s(x) in the tilt gamma' (y * s(x)); index_d
    is the u-design d(u) multiplying the instrument-outcome cross moment
    and must have the same length as s(x) for the system to be square.
    """

    eta_formula: DesignFormula
    z_formula: DesignFormula
    y_formula: DesignFormula
    outcome_kind: str = "binary"
    selection_bias_design: DesignFormula = field(
        default_factory=lambda: DesignFormula.parse("1")
    )
    index_d: DesignFormula = field(default_factory=lambda: DesignFormula.parse("1"))

    def __post_init__(self):
        if self.outcome_kind not in ("binary", "continuous"):
            raise ConfigurationError(
                f"outcome_kind must be 'binary' or 'continuous', got {self.outcome_kind!r}"
            )
        if self.z_formula.uses_z:
            raise ConfigurationError("z_formula must not reference z")
        if self.y_formula.uses_z:
            raise ConfigurationError(
                "y_formula must not reference z (instrument exclusion)"
            )
        if self.index_d.uses_z:
            raise ConfigurationError("index_d must be a function of u only")
        if len(self.selection_bias_design) != len(self.index_d):
            raise ConfigurationError(
                "selection_bias_design and index_d must have equal length "
                f"({len(self.selection_bias_design)} vs {len(self.index_d)})"
            )

    def param_block_sizes(self) -> tuple:
        """(p_gamma, n_xi, n_beta, n_psi)."""
        return (
            len(self.selection_bias_design),
            len(self.eta_formula),
            len(self.z_formula),
            len(self.y_formula),
        )

    def validate_params(self, params: ParamVector):
        expected = self.param_block_sizes()
        got = params.block_sizes()
        if got != expected:
            raise ContractViolation(
                f"parameter block sizes {got} do not match spec {expected}"
            )

    def zero_params(self) -> ParamVector:
        p_g, n_xi, n_beta, n_psi = self.param_block_sizes()
        return ParamVector(
            mu=0.0,
            gamma=(0.0,) * p_g,
            xi=(0.0,) * n_xi,
            beta=(0.0,) * n_beta,
            psi=(0.0,) * n_psi,
        )


def selection_bias(spec: ModelSpec, y: float, z: float, u, gamma) -> float:
    """Outcome tilt gamma' (y * s(x)) added to the response log odds.

    Zero whenever y == 0 or gamma == 0, for any s(x).
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (len(spec.selection_bias_design),):
        raise ContractViolation(
            f"gamma has shape {gamma.shape}, expected ({len(spec.selection_bias_design)},)"
        )
    s = evaluate_design(spec.selection_bias_design, z, u)
    return float(y) * float(s @ gamma)


def propensity(spec: ModelSpec, y: float, z: float, u, xi, gamma) -> float:
    """Response probability P(R=1 | y, x) under the tilted logistic model."""
    xi = np.asarray(xi, dtype=float)
    h = evaluate_design(spec.eta_formula, z, u)
    if xi.shape != (len(h),):
        raise ContractViolation(
            f"xi has shape {xi.shape}, expected ({len(h)},)"
        )
    return expit(float(h @ xi) + selection_bias(spec, y, z, u, gamma))


def prob_z(spec: ModelSpec, z: float, u, beta) -> float:
    """Model probability of the observed instrument value, p(z | u; beta)."""
    if z not in (0.0, 1.0):
        raise ContractViolation(
            f"binary instrument model requires z in {{0, 1}}, got {z!r}"
        )
    beta = np.asarray(beta, dtype=float)
    h = evaluate_design(spec.z_formula, 0.0, u)
    if beta.shape != (len(h),):
        raise ContractViolation(f"beta has shape {beta.shape}, expected ({len(h)},)")
    p1 = expit(float(h @ beta))
    return p1 if z == 1.0 else 1.0 - p1


@dataclass(frozen=True)
class OutcomeLaw:
    """Fitted conditional outcome law at one covariate point.

    mean is E(Y | u); score(y) is the single-observation estimating score
    of the outcome regression at this point.
    """

    kind: str
    mean: float
    score: Callable[[float], np.ndarray]


def outcome_model(spec: ModelSpec, u, psi) -> OutcomeLaw:
    """Conditional outcome law p(y | u; psi) for one unit."""
    psi = np.asarray(psi, dtype=float)
    h = evaluate_design(spec.y_formula, 0.0, u)
    if psi.shape != (len(h),):
        raise ContractViolation(f"psi has shape {psi.shape}, expected ({len(h)},)")
    if spec.outcome_kind == "binary":
        mean = expit(float(h @ psi))
    else:
        mean = float(h @ psi)

    def score(y: float) -> np.ndarray:
        return (float(y) - mean) * h

    return OutcomeLaw(kind=spec.outcome_kind, mean=mean, score=score)


def propensity_pair(spec: ModelSpec, z: float, u, xi, gamma) -> tuple:
    """(P(R=1|y=0,x), P(R=1|y=1,x)) for a binary outcome at one x."""
    p0 = propensity(spec, 0.0, z, u, xi, gamma)
    p1 = propensity(spec, 1.0, z, u, xi, gamma)
    return p0, p1
