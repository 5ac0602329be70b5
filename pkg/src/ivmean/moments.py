"""Estimating-function building blocks.

Two families of per-record residuals drive everything:

* the nuisance system m = (calibration block, instrument score, weighted
  outcome score), which identifies (xi, beta, psi) jointly with the tilt;
* the target system g for (mu, gamma), either inverse-probability weighted
  (g_tilde) or augmented with the nonrespondent conditional expectation
  (g_augmented, binary outcomes only).

Every g has first component estimating mu and a d-block contrasting the
observed instrument-outcome cross moment with its model-implied centering;
the d-block is what turns instrument exclusion into identification of the
tilt. All rows for nonrespondents avoid the outcome entirely.

Matrix functions evaluate whole datasets at once; the per-record
operations wrap them so both views cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, ObservedRecord, ParamVector
from .errors import (
    ConfigurationError,
    ContractViolation,
    DegenerateMixtureError,
    WeightExplosionError,
)
from .models import ModelSpec, expit

# Respondent weights 1/pi blow past any useful scale below this; treat as a
# numerical-domain failure rather than producing astronomically large rows.
PROPENSITY_FLOOR = 1e-6


@dataclass(frozen=True)
class MomentContext:
    """One record plus the model and parameters to evaluate moments at."""

    spec: ModelSpec
    params: ParamVector
    record: ObservedRecord

    def __post_init__(self):
        self.spec.validate_params(self.params)


@dataclass(frozen=True)
class DesignCache:
    """Evaluated design matrices for one (dataset, spec) pair."""

    h_eta: np.ndarray
    h_z: np.ndarray
    h_y: np.ndarray
    s_sel: np.ndarray
    d_u: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset, spec: ModelSpec) -> "DesignCache":
        z, u = dataset.z, dataset.u
        return cls(
            h_eta=spec.eta_formula.evaluate_many(z, u),
            h_z=spec.z_formula.evaluate_many(z, u),
            h_y=spec.y_formula.evaluate_many(z, u),
            s_sel=spec.selection_bias_design.evaluate_many(z, u),
            d_u=spec.index_d.evaluate_many(z, u),
        )


class _Pieces:
    """Shared fitted quantities reused across the residual blocks."""

    __slots__ = ("r", "y", "z", "eta", "slope", "pi_at_y", "w", "pz1", "py", "cache")

    def __init__(self, dataset: Dataset, spec: ModelSpec, params: ParamVector,
                 cache: DesignCache | None):
        spec.validate_params(params)
        if cache is None:
            cache = DesignCache.build(dataset, spec)
        self.cache = cache
        self.r = dataset.r
        self.y = dataset.y_filled
        self.z = dataset.z
        xi = np.asarray(params.xi)
        gamma = np.asarray(params.gamma)
        beta = np.asarray(params.beta)
        psi = np.asarray(params.psi)
        self.eta = cache.h_eta @ xi
        self.slope = cache.s_sel @ gamma
        # At nonrespondent rows y is the 0.0 fill, so pi_at_y there is the
        # y=0 propensity; those rows only ever enter with weight r/pi = 0.
        self.pi_at_y = expit(self.eta + self.slope * self.y)
        resp = self.r == 1
        bad = resp & (self.pi_at_y < PROPENSITY_FLOOR)
        if np.any(bad):
            raise WeightExplosionError(np.nonzero(bad)[0], PROPENSITY_FLOOR)
        # Nonrespondent weights are identically zero; never divide there, a
        # deep-tail propensity could underflow to 0 and poison rows with nan.
        self.w = np.zeros(len(self.r))
        self.w[resp] = 1.0 / self.pi_at_y[resp]
        self.pz1 = expit(cache.h_z @ beta)
        mean_y = cache.h_y @ psi
        self.py = expit(mean_y) if spec.outcome_kind == "binary" else mean_y


def moment_m_matrix(dataset: Dataset, spec: ModelSpec, params: ParamVector,
                    cache: DesignCache | None = None) -> np.ndarray:
    """Per-record nuisance residuals, shape (n, n_xi + n_beta + n_psi).

    Blocks: response calibration (r/pi - 1) h_eta(x); instrument score
    (z - pz) h_z(u); weighted outcome score (r/pi)(y - py) h_y(u).
    """
    p = _Pieces(dataset, spec, params, cache)
    calib = (p.w - 1.0)[:, None] * p.cache.h_eta
    z_score = (p.z - p.pz1)[:, None] * p.cache.h_z
    y_score = (p.w * (p.y - p.py))[:, None] * p.cache.h_y
    return np.hstack([calib, z_score, y_score])


def _q_matrix(p: _Pieces, mu: float) -> np.ndarray:
    """Core target residual q at observed (y, z): [y - mu, centered cross]."""
    cross = (p.y - p.py) * (p.z - p.pz1)
    return np.hstack([(p.y - mu)[:, None], cross[:, None] * p.cache.d_u])


def g_tilde_matrix(dataset: Dataset, spec: ModelSpec, params: ParamVector,
                   cache: DesignCache | None = None) -> np.ndarray:
    """IPW target residuals (r/pi) q, shape (n, 1 + p_gamma).

    Rows with r = 0 are identically zero and never touch the outcome.
    """
    p = _Pieces(dataset, spec, params, cache)
    return p.w[:, None] * _q_matrix(p, params.mu)


def _nonrespondent_law_values(p: _Pieces, eta: np.ndarray) -> np.ndarray:
    """P(Y=1 | R=0, x) row by row for binary outcomes."""
    pi1 = expit(eta + p.slope)
    pi0 = expit(eta)
    num = (1.0 - pi1) * p.py
    den = num + (1.0 - pi0) * (1.0 - p.py)
    bad = den < 1e-300
    if np.any(bad):
        idx = np.nonzero(bad)[0]
        raise DegenerateMixtureError(
            f"nonrespondent mixture denominator vanished at record index "
            f"{', '.join(str(i) for i in idx[:5])}"
        )
    return num / den


def g_augmented_matrix(dataset: Dataset, spec: ModelSpec, params: ParamVector,
                       cache: DesignCache | None = None) -> np.ndarray:
    """Augmented target residuals g_tilde + (1 - r/pi) E(q | r=0, x).

    Requires a binary outcome: the nonrespondent law is the exponential
    tilt of the fitted Bernoulli regression.
    """
    if spec.outcome_kind != "binary":
        raise ConfigurationError(
            "augmented moments require a binary outcome model"
        )
    p = _Pieces(dataset, spec, params, cache)
    p_law = _nonrespondent_law_values(p, p.eta)
    a1 = p_law - params.mu
    ad = ((p_law - p.py) * (p.z - p.pz1))[:, None] * p.cache.d_u
    aug = np.hstack([a1[:, None], ad])
    return p.w[:, None] * _q_matrix(p, params.mu) + (1.0 - p.w)[:, None] * aug


def stacked_residual_matrix(dataset: Dataset, spec: ModelSpec, params: ParamVector,
                            moment: str = "ipw", include_tilt: bool = True,
                            cache: DesignCache | None = None) -> np.ndarray:
    """Joint per-record residuals [g | m] used by the Z-estimators.

    moment selects the target family ("ipw" or "augmented").
    include_tilt=False drops the d-block of g for runs with the tilt pinned,
    keeping the system square in (mu, xi, beta, psi).
    """
    if cache is None:
        cache = DesignCache.build(dataset, spec)
    if moment == "ipw":
        g = g_tilde_matrix(dataset, spec, params, cache)
    elif moment == "augmented":
        g = g_augmented_matrix(dataset, spec, params, cache)
    else:
        raise ConfigurationError(f"unknown moment family {moment!r}")
    if not include_tilt:
        g = g[:, :1]
    m = moment_m_matrix(dataset, spec, params, cache)
    return np.hstack([g, m])


def _singleton(ctx: MomentContext) -> Dataset:
    return Dataset([ctx.record])


def moment_m(ctx: MomentContext) -> np.ndarray:
    """Nuisance residual for one record."""
    return moment_m_matrix(_singleton(ctx), ctx.spec, ctx.params)[0]


def q_vector(ctx: MomentContext) -> np.ndarray:
    """Core target residual for one respondent record, length 1 + p_gamma."""
    rec = ctx.record
    if rec.r != 1:
        raise ContractViolation("q_vector needs an observed outcome (r=1)")
    p = _Pieces(_singleton(ctx), ctx.spec, ctx.params, None)
    return _q_matrix(p, ctx.params.mu)[0]


def center_fdag(ctx: MomentContext) -> np.ndarray:
    """Centered instrument-outcome cross term d(u)(y - py)(z - pz).

    This is f - f# for f = y z: subtracting the conditional-mean surrogate
    built from the two working models kills its dependence on each single
    coordinate, which is what the exclusion restriction requires.
    """
    return q_vector(ctx)[1:]


def nonrespondent_law(ctx: MomentContext) -> float:
    """P(Y=1 | R=0, x) implied by the tilt and the fitted outcome model."""
    if ctx.spec.outcome_kind != "binary":
        raise ConfigurationError("nonrespondent law requires a binary outcome")
    p = _Pieces(_singleton(ctx), ctx.spec, ctx.params, None)
    return float(_nonrespondent_law_values(p, p.eta)[0])


def g_tilde(ctx: MomentContext) -> np.ndarray:
    """IPW target residual for one record (zero vector when r = 0)."""
    return g_tilde_matrix(_singleton(ctx), ctx.spec, ctx.params)[0]


def g_augmented(ctx: MomentContext) -> np.ndarray:
    """Augmented target residual for one record."""
    return g_augmented_matrix(_singleton(ctx), ctx.spec, ctx.params)[0]
