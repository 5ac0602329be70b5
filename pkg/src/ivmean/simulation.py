"""Seeded Monte Carlo study of the estimators.

The data law draws a bivariate normal covariate pair, a binary instrument
and binary outcome that are dependent only through the covariates, and a
response indicator whose log odds load on the instrument, the covariates,
and the outcome itself (tilt 2 by default, so missingness is heavily
outcome-driven). Five scenarios reuse one drawn dataset per replicate and
differ only in which working models the analyst gets right:

    C1  all three models correct
    C2  instrument model misspecified
    C3  outcome model misspecified
    C4  response index misspecified
    C5  all three misspecified

Misspecified designs replace the true functional form with (1, u1, u1^2).
Replicate seeds are derived from (base_seed, replicate) so results do not
depend on worker scheduling; identical configs give identical reports.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from multiprocessing import Pool

import numpy as np

from .core import Dataset, DesignFormula
from .errors import ConfigurationError, IvmeanError
from .inference import (
    Z_95,
    estimate_cc,
    estimate_full,
    estimate_mar,
    estimate_phi_hat,
    estimate_phi_tilde,
)
from .models import ModelSpec, expit
from .solver import SolverConfig

SCENARIOS = ("C1", "C2", "C3", "C4", "C5")
ESTIMATORS = ("phi_tilde", "phi_hat", "cc", "mar", "full")

_LOG = logging.getLogger(__name__)

_TRUTH_DRAWS = 10_000_000
_TRUTH_SEED = 2024


@dataclass(frozen=True)
class DgpConfig:
    """The simulated data law; defaults give the benchmark configuration."""

    cov_corr: float = 0.2
    z_coefs: tuple = (1.0, 2.0, -1.0, -0.8)        # 1, u1, u2, u1*u2
    y_coefs: tuple = (0.5, -2.0, 1.0)              # 1, u1, u2
    response_coefs: tuple = (2.0, -3.0, 0.8, 1.0)  # 1, z, u1, u2
    tilt: float = 2.0                              # outcome term in response log odds


def _draw_arrays(cfg: DgpConfig, n: int, seed: int):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(
        np.array([[1.0, cfg.cov_corr], [cfg.cov_corr, 1.0]])
    )
    u = rng.standard_normal((n, 2)) @ chol.T
    u1, u2 = u[:, 0], u[:, 1]
    a = cfg.z_coefs
    pz = expit(a[0] + a[1] * u1 + a[2] * u2 + a[3] * u1 * u2)
    z = (rng.random(n) < pz).astype(float)
    b = cfg.y_coefs
    py = expit(b[0] + b[1] * u1 + b[2] * u2)
    y = (rng.random(n) < py).astype(float)
    c = cfg.response_coefs
    pr = expit(c[0] + c[1] * z + c[2] * u1 + c[3] * u2 + cfg.tilt * y)
    r = (rng.random(n) < pr).astype(float)
    return r, y, z, u


def draw_sample(cfg: DgpConfig, n: int, seed: int) -> Dataset:
    """One observed dataset: outcomes hidden where the unit did not respond."""
    r, y, z, u = _draw_arrays(cfg, n, seed)
    return Dataset.from_arrays(r, y, z, u)


@lru_cache(maxsize=16)
def _true_mean_cached(y_coefs: tuple, cov_corr: float, n_draws: int,
                      seed: int) -> float:
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.array([[1.0, cov_corr], [cov_corr, 1.0]]))
    total = 0.0
    left = n_draws
    while left > 0:
        m = min(left, 2_000_000)
        u = rng.standard_normal((m, 2)) @ chol.T
        b = y_coefs
        total += float(np.sum(expit(b[0] + b[1] * u[:, 0] + b[2] * u[:, 1])))
        left -= m
    return total / n_draws


def true_outcome_mean(cfg: DgpConfig, n_draws: int = _TRUTH_DRAWS,
                      seed: int = _TRUTH_SEED) -> float:
    """E(Y) under the data law, by high-precision Monte Carlo integration."""
    return _true_mean_cached(tuple(cfg.y_coefs), cfg.cov_corr, n_draws, seed)


_CORRECT_ETA = "1 + z + u1 + u2"
_CORRECT_Z = "1 + u1 + u2 + u1:u2"
_CORRECT_Y = "1 + u1 + u2"
_WRONG = "1 + u1 + u1^2"


def scenario_model_spec(scenario: str) -> ModelSpec:
    """Analyst working models for one scenario label."""
    if scenario not in SCENARIOS:
        raise ConfigurationError(
            f"unknown scenario {scenario!r}; expected one of {SCENARIOS}"
        )
    eta = _CORRECT_ETA if scenario not in ("C4", "C5") else "1 + z + u1 + u1^2"
    zf = _CORRECT_Z if scenario not in ("C2", "C5") else _WRONG
    yf = _CORRECT_Y if scenario not in ("C3", "C5") else _WRONG
    return ModelSpec(
        eta_formula=DesignFormula.parse(eta),
        z_formula=DesignFormula.parse(zf),
        y_formula=DesignFormula.parse(yf),
    )


@dataclass(frozen=True)
class AnalogConfig:
    """A survey-flavored data law: a binary trait u1, an age-based u2
    stored standardized as (age - 40) / 10, a binary instrument with ~25%
    prevalence, a rare-ish binary outcome, and ~81% response with the
    outcome lowering the response odds (tilt -1)."""

    n: int = 4997
    age_low: float = 16.0
    age_high: float = 65.0
    z_coefs: tuple = (-1.42, 0.5, -0.4)   # 1, u1, u2
    y_coefs: tuple = (-1.68, 0.8, 0.5)    # 1, u1, u2
    response_coefs: tuple = (1.33, 1.5, 0.3, 0.25)  # 1, z, u1, u2
    tilt: float = -1.0


def draw_analog_sample(cfg: AnalogConfig, seed: int) -> Dataset:
    """One observed survey-analog dataset with covariates (u1, u2)."""
    rng = np.random.default_rng(seed)
    n = cfg.n
    u1 = (rng.random(n) < 0.5).astype(float)
    u2 = (rng.uniform(cfg.age_low, cfg.age_high, n) - 40.0) / 10.0
    a = cfg.z_coefs
    z = (rng.random(n) < expit(a[0] + a[1] * u1 + a[2] * u2)).astype(float)
    b = cfg.y_coefs
    y = (rng.random(n) < expit(b[0] + b[1] * u1 + b[2] * u2)).astype(float)
    c = cfg.response_coefs
    pr = expit(c[0] + c[1] * z + c[2] * u1 + c[3] * u2 + cfg.tilt * y)
    r = (rng.random(n) < pr).astype(float)
    return Dataset.from_arrays(r, y, z, np.column_stack([u1, u2]))


def analog_model_spec() -> ModelSpec:
    """Main-effects working models on (u1, age); correctly specified."""
    return ModelSpec(
        eta_formula=DesignFormula.parse("1 + z + u1 + u2"),
        z_formula=DesignFormula.parse("1 + u1 + u2"),
        y_formula=DesignFormula.parse("1 + u1 + u2"),
    )


@lru_cache(maxsize=4)
def _analog_truth_cached(y_coefs: tuple, age_low: float, age_high: float,
                         n_draws: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    total = 0.0
    left = n_draws
    while left > 0:
        m = min(left, 2_000_000)
        u1 = (rng.random(m) < 0.5).astype(float)
        t = (rng.uniform(age_low, age_high, m) - 40.0) / 10.0
        b = y_coefs
        total += float(np.sum(expit(b[0] + b[1] * u1 + b[2] * t)))
        left -= m
    return total / n_draws


def analog_true_mean(cfg: AnalogConfig, n_draws: int = _TRUTH_DRAWS,
                     seed: int = _TRUTH_SEED) -> float:
    return _analog_truth_cached(tuple(cfg.y_coefs), cfg.age_low,
                                cfg.age_high, n_draws, seed)


def replicate_seed(base_seed: int, rep: int) -> int:
    """Stable per-replicate seed, independent of evaluation order."""
    return int(np.random.SeedSequence((base_seed, rep)).generate_state(
        1, np.uint64)[0])


@dataclass(frozen=True)
class MetricRow:
    """Monte Carlo summary for one (scenario, n, estimator) cell."""

    scenario: str
    n: int
    estimator: str
    requested: int
    used: int
    excluded: int
    truth: float
    mean_point: float
    abs_bias: float
    mc_sd: float
    mean_se: float
    cov95: float


@dataclass(frozen=True)
class SimulationReport:
    """All metric rows of one run plus the seed that reproduces it."""

    rows: tuple
    base_seed: int

    _FLOATS = ("truth", "mean_point", "abs_bias", "mc_sd", "mean_se", "cov95")
    _COLS = ("scenario", "n", "estimator", "requested", "used", "excluded") + _FLOATS

    def to_csv_text(self) -> str:
        lines = [",".join(self._COLS)]
        for row in self.rows:
            vals = []
            for col in self._COLS:
                v = getattr(row, col)
                vals.append(f"{v:.6f}" if col in self._FLOATS else str(v))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "base_seed": self.base_seed,
            "rows": [
                {col: getattr(row, col) for col in self._COLS}
                for row in self.rows
            ],
        }


def compute_metrics(points, ses, truth: float):
    """(abs_bias, mc_sd, mean_se, cov95) over converged replicates."""
    pts = np.asarray(points, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if pts.size == 0:
        nan = float("nan")
        return nan, nan, nan, nan
    abs_bias = float(abs(pts.mean() - truth))
    mc_sd = float(pts.std(ddof=1)) if pts.size > 1 else float("nan")
    mean_se = float(np.sqrt(np.mean(ses**2)))
    covered = np.abs(pts - truth) <= Z_95 * ses
    return abs_bias, mc_sd, mean_se, float(covered.mean())


def _fit_one(est_id: str, observed: Dataset, full_data: Dataset | None,
             spec: ModelSpec, cfg: SolverConfig):
    if est_id == "phi_tilde":
        res = estimate_phi_tilde(observed, spec, cfg)
    elif est_id == "phi_hat":
        res = estimate_phi_hat(observed, spec, cfg)
    elif est_id == "cc":
        res = estimate_cc(observed)
    elif est_id == "mar":
        res = estimate_mar(observed, spec, cfg)
    elif est_id == "full":
        res = estimate_full(full_data)
    else:
        raise ConfigurationError(
            f"unknown estimator {est_id!r}; expected one of {ESTIMATORS}"
        )
    return res


def _run_replicate(task):
    """Fit all requested estimators on one replicate; top level so worker
    pools can pickle it."""
    (label, kind, dgp, n, estimators, solver_cfg, base_seed, rep, emit_dir) = task
    seed = replicate_seed(base_seed, rep)
    if kind == "analog":
        observed = draw_analog_sample(dgp, seed)
        spec = analog_model_spec()
        full_data = None
    else:
        r, y, z, u = _draw_arrays(dgp, n, seed)
        observed = Dataset.from_arrays(r, y, z, u)
        spec = scenario_model_spec(label)
        full_data = None
        if "full" in estimators:
            full_data = Dataset.from_arrays(np.ones(n), y, z, u)
    if emit_dir is not None:
        from .cli import write_dataset

        name = f"{label}_n{len(observed)}_rep{rep:04d}.csv"
        write_dataset(observed, os.path.join(emit_dir, name))
    out = []
    for est_id in estimators:
        try:
            res = _fit_one(est_id, observed, full_data, spec, solver_cfg)
            ok = (res.converged and math.isfinite(res.mu)
                  and math.isfinite(res.se_mu))
            out.append((rep, est_id, res.mu, res.se_mu, ok))
        except (IvmeanError, np.linalg.LinAlgError):
            out.append((rep, est_id, float("nan"), float("nan"), False))
    return out


def _run_cells(label, kind, dgp, n, replicates, estimators, base_seed,
               solver_cfg, workers, emit_dir, truth) -> tuple:
    for est_id in estimators:
        if est_id not in ESTIMATORS:
            raise ConfigurationError(
                f"unknown estimator {est_id!r}; expected one of {ESTIMATORS}"
            )
    tasks = [
        (label, kind, dgp, n, tuple(estimators), solver_cfg, base_seed, rep,
         emit_dir)
        for rep in range(replicates)
    ]
    if workers > 1:
        with Pool(workers) as pool:
            chunks = pool.map(_run_replicate, tasks)
    else:
        chunks = [_run_replicate(t) for t in tasks]
    flat = [item for chunk in chunks for item in chunk]
    rows = []
    for est_id in estimators:
        cells = sorted(x for x in flat if x[1] == est_id)
        for rep_id, _, _, _, ok in cells:
            if not ok:
                _LOG.warning(
                    "excluding %s n=%d rep=%d estimator=%s: "
                    "no converged finite fit", label, n, rep_id, est_id,
                )
        points = [x[2] for x in cells if x[4]]
        ses = [x[3] for x in cells if x[4]]
        abs_bias, mc_sd, mean_se, cov95 = compute_metrics(points, ses, truth)
        rows.append(MetricRow(
            scenario=label, n=n, estimator=est_id, requested=replicates,
            used=len(points), excluded=replicates - len(points), truth=truth,
            mean_point=float(np.mean(points)) if points else float("nan"),
            abs_bias=abs_bias, mc_sd=mc_sd, mean_se=mean_se, cov95=cov95,
        ))
    return tuple(rows)


def run_scenario(scenario: str, n: int, replicates: int, estimators,
                 base_seed: int, dgp: DgpConfig | None = None,
                 config: SolverConfig | None = None, workers: int = 1,
                 emit_dir: str | None = None) -> SimulationReport:
    """Monte Carlo metrics for one scenario at one sample size."""
    dgp = dgp or DgpConfig()
    cfg = config or SolverConfig()
    truth = true_outcome_mean(dgp)
    rows = _run_cells(scenario, "scenario", dgp, n, replicates,
                      tuple(estimators), base_seed, cfg, workers, emit_dir,
                      truth)
    return SimulationReport(rows=rows, base_seed=base_seed)


def run_analog(replicates: int, estimators, base_seed: int,
               analog: AnalogConfig | None = None,
               config: SolverConfig | None = None, workers: int = 1,
               emit_dir: str | None = None) -> SimulationReport:
    """Monte Carlo metrics for the survey-analog data law."""
    if "full" in estimators:
        raise ConfigurationError(
            "the full-data estimator is unavailable for the survey analog: "
            "outcomes are partially missing by design"
        )
    analog = analog or AnalogConfig()
    cfg = config or SolverConfig()
    truth = analog_true_mean(analog)
    rows = _run_cells("analog", "analog", analog, analog.n, replicates,
                      tuple(estimators), base_seed, cfg, workers, emit_dir,
                      truth)
    return SimulationReport(rows=rows, base_seed=base_seed)
