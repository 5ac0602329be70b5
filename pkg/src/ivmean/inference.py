"""Point estimators, joint sandwich variances, and Wald intervals.

estimate_phi_tilde solves the stacked system [g_tilde | m] jointly in
(mu, gamma, xi, beta, psi); estimate_phi_hat swaps in the augmented target
residuals. Either route is consistent when at least one of the two working
models (instrument or outcome) is correct, provided the response model
holds. Baselines: complete-case mean, a fully observed mean, and an
ignorable-missingness IPW fit that pins the tilt at zero.

Standard errors come from one sandwich over the full stacked system, so
nuisance estimation error propagates into every block, including mu.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, ParamVector
from .errors import (
    ConfigurationError,
    ContractViolation,
    EstimationError,
    WeightExplosionError,
)
from .models import ModelSpec, expit
from .moments import (
    PROPENSITY_FLOOR,
    DesignCache,
    g_augmented_matrix,
    g_tilde_matrix,
    moment_m_matrix,
    stacked_residual_matrix,
)
from .solver import SolverConfig, numerical_jacobian, solve_system

# Two-sided 95% normal quantile, fixed so intervals are bit-reproducible.
Z_95 = 1.959964


@dataclass(frozen=True, eq=False)
class EstimationResult:
    """A fitted estimator: named coordinates, SEs, and 95% intervals."""

    estimator_id: str
    param_names: tuple
    point: tuple
    se: tuple
    ci95: tuple
    converged: bool
    params: ParamVector | None = None
    covariance: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def mu(self) -> float:
        return self.point[0]

    @property
    def se_mu(self) -> float:
        return self.se[0]

    @property
    def ci95_mu(self) -> tuple:
        return self.ci95[0]

    def block(self, name: str):
        """(values, ses, cis) for the coordinates of one parameter block."""
        idx = [
            i
            for i, pname in enumerate(self.param_names)
            if pname == name or pname.startswith(f"{name}[")
        ]
        return (
            tuple(self.point[i] for i in idx),
            tuple(self.se[i] for i in idx),
            tuple(self.ci95[i] for i in idx),
        )


class _Layout:
    """Maps solver vectors to ParamVector bundles, with the tilt free or pinned."""

    def __init__(self, spec: ModelSpec, fix_gamma=None):
        self.spec = spec
        p_g, n_xi, n_beta, n_psi = spec.param_block_sizes()
        self.tilt_free = fix_gamma is None
        if fix_gamma is not None:
            fix_gamma = tuple(float(v) for v in np.atleast_1d(fix_gamma))
            if len(fix_gamma) != p_g:
                raise ConfigurationError(
                    f"fix_gamma has length {len(fix_gamma)}, expected {p_g}"
                )
        self.fixed_gamma = fix_gamma
        names = ["mu"]
        if self.tilt_free:
            names += _block_names("gamma", spec.selection_bias_design)
        names += _block_names("xi", spec.eta_formula)
        names += _block_names("beta", spec.z_formula)
        names += _block_names("psi", spec.y_formula)
        self.names = tuple(names)
        self.sizes = (p_g, n_xi, n_beta, n_psi)

    def pack(self, mu, gamma, xi, beta, psi) -> np.ndarray:
        parts = [np.atleast_1d(float(mu))]
        if self.tilt_free:
            parts.append(np.asarray(gamma, dtype=float))
        parts += [np.asarray(b, dtype=float) for b in (xi, beta, psi)]
        return np.concatenate(parts)

    def to_params(self, x) -> ParamVector:
        x = np.asarray(x, dtype=float)
        p_g, n_xi, n_beta, n_psi = self.sizes
        pos = 1
        if self.tilt_free:
            gamma = tuple(x[pos : pos + p_g])
            pos += p_g
        else:
            gamma = self.fixed_gamma
        xi = tuple(x[pos : pos + n_xi])
        pos += n_xi
        beta = tuple(x[pos : pos + n_beta])
        pos += n_beta
        psi = tuple(x[pos : pos + n_psi])
        return ParamVector(mu=x[0], gamma=gamma, xi=xi, beta=beta, psi=psi)


def _block_names(block: str, formula) -> list:
    return [f"{block}[{t}]" for t in formula.to_string().split(" + ")]


def _normalized_weights(dataset: Dataset, weights) -> np.ndarray:
    n = len(dataset)
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ContractViolation(f"weights have shape {w.shape}, expected ({n},)")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ContractViolation("weights must be positive and finite")
    return w / w.sum()


def hajek_mean(dataset: Dataset, weights) -> float:
    """Ratio of weighted respondent outcomes to weighted respondent count.

    weights holds one value per record (only respondent entries are used,
    e.g. inverse fitted response probabilities); they must be positive.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(dataset),):
        raise ContractViolation(
            f"weights have shape {w.shape}, expected ({len(dataset)},)"
        )
    r = dataset.r
    mask = r == 1
    if not np.any(mask):
        raise EstimationError("no respondents: weighted mean undefined")
    wr = w[mask]
    if not np.all(np.isfinite(wr)) or np.any(wr <= 0):
        raise ContractViolation("respondent weights must be positive and finite")
    return float(wr @ dataset.y_filled[mask] / wr.sum())


def wald_ci(point: float, se: float, level_quantile: float = Z_95) -> tuple:
    """Two-sided Wald interval point +/- q * se."""
    half = level_quantile * se
    return (point - half, point + half)


def sandwich_from_residuals(matrix_fn, x_root, config: SolverConfig | None = None,
                            weights=None) -> np.ndarray:
    """Sandwich covariance for a Z-estimator given its per-record residuals.

    matrix_fn(x) returns the (n, k) residual matrix; x_root solves the
    weighted mean equations. Bread is the numerical Jacobian of the mean
    residual, meat the weighted mean of residual outer products; the
    estimator covariance is bread_inv meat bread_inv' / n.
    """
    cfg = config or SolverConfig()
    x_root = np.asarray(x_root, dtype=float)
    res = np.asarray(matrix_fn(x_root), dtype=float)
    n = res.shape[0]
    if weights is None:
        wn = np.full(n, 1.0 / n)
    else:
        wn = np.asarray(weights, dtype=float)
        wn = wn / wn.sum()

    def mean_fn(x):
        return wn @ np.asarray(matrix_fn(x), dtype=float)

    bread = numerical_jacobian(mean_fn, x_root, cfg.jacobian_step)
    meat = (res * wn[:, None]).T @ res
    bread_inv = np.linalg.inv(bread)
    return bread_inv @ meat @ bread_inv.T / n


def sandwich_joint(dataset: Dataset, spec: ModelSpec, params: ParamVector,
                   moment: str = "ipw", fix_gamma=None,
                   config: SolverConfig | None = None, weights=None,
                   cache: DesignCache | None = None) -> np.ndarray:
    """Joint sandwich covariance of the stacked system at a fitted root.

    Row/column order matches the free-parameter layout (mu, gamma, xi,
    beta, psi), with gamma omitted when pinned via fix_gamma.
    """
    layout = _Layout(spec, fix_gamma)
    cache = cache or DesignCache.build(dataset, spec)
    wn = _normalized_weights(dataset, weights) * len(dataset)

    def matrix_fn(x):
        return stacked_residual_matrix(
            dataset, spec, layout.to_params(x), moment=moment,
            include_tilt=layout.tilt_free, cache=cache,
        )

    x = layout.pack(params.mu, params.gamma, params.xi, params.beta, params.psi)
    return sandwich_from_residuals(matrix_fn, x, config, weights=wn)


def _result_from_cov(estimator_id, names, point, cov, converged, params, diagnostics):
    point = tuple(float(v) for v in point)
    if cov is None:
        se = tuple(float("nan") for _ in point)
    else:
        diag = np.diag(cov).copy()
        bad = diag < 0
        if np.any(bad):
            diagnostics.setdefault("warnings", ())
            diagnostics["warnings"] = tuple(diagnostics["warnings"]) + (
                "negative variance estimate zeroed to nan",
            )
            diag[bad] = np.nan
        se = tuple(float(np.sqrt(v)) for v in diag)
    ci = tuple(wald_ci(p, s) for p, s in zip(point, se))
    return EstimationResult(
        estimator_id=estimator_id,
        param_names=tuple(names),
        point=point,
        se=se,
        ci95=ci,
        converged=converged,
        params=params,
        covariance=cov,
        diagnostics=diagnostics,
    )


def _check_binary(values, what) -> None:
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ConfigurationError(f"{what} must take values in {{0, 1}}")


def _stage_solve(f, x0, cfg, label, stage_notes):
    out = solve_system(f, x0, cfg)
    if not out.converged:
        stage_notes.append(f"{label} warm start did not converge "
                           f"(residual {out.residual_norm:.3g})")
    return out.root


def _fit_joint(dataset: Dataset, spec: ModelSpec, config, moment,
               fix_gamma, weights, estimator_id) -> EstimationResult:
    cfg = config or SolverConfig()
    layout = _Layout(spec, fix_gamma)
    n = len(dataset)
    r = dataset.r
    n_resp = dataset.n_respondents
    if n_resp == 0:
        raise EstimationError("dataset has no respondents")
    if layout.tilt_free and n_resp == n:
        raise EstimationError(
            "tilt parameter is not identified without nonrespondents; "
            "pass fix_gamma to pin it"
        )
    _check_binary(dataset.z, "instrument z")
    if spec.outcome_kind == "binary":
        _check_binary(dataset.y_filled[r == 1], "binary outcome y")
    if moment == "augmented" and spec.outcome_kind != "binary":
        raise ConfigurationError(
            "the augmented estimator requires a binary outcome model"
        )

    wn = _normalized_weights(dataset, weights)
    cache = DesignCache.build(dataset, spec)
    y = dataset.y_filled
    stage_notes = []

    # Stage 1: instrument model score, self-contained.
    def f_beta(b):
        return wn @ ((dataset.z - expit(cache.h_z @ b))[:, None] * cache.h_z)

    beta = _stage_solve(f_beta, np.zeros(layout.sizes[2]), cfg,
                        "instrument model", stage_notes)

    # Stage 2: response index at the pinned tilt, warm-started at the
    # plain logistic fit of r on the response design.
    gamma0 = np.asarray(layout.fixed_gamma if not layout.tilt_free
                        else (0.0,) * layout.sizes[0])
    slope0 = cache.s_sel @ gamma0

    def f_logistic_r(t):
        return wn @ ((r - expit(cache.h_eta @ t))[:, None] * cache.h_eta)

    xi_start = _stage_solve(f_logistic_r, np.zeros(layout.sizes[1]), cfg,
                            "response regression", stage_notes)

    def f_xi(t):
        pi = expit(cache.h_eta @ t + slope0 * y)
        w = _respondent_weights(pi, r)
        return wn @ ((w - 1.0)[:, None] * cache.h_eta)

    xi = _stage_solve(f_xi, xi_start, cfg, "response calibration", stage_notes)

    # Stage 3: outcome model under the stage-2 weights.
    pi_stage = expit(cache.h_eta @ xi + slope0 * y)
    w_stage = _respondent_weights(pi_stage, r)

    def f_psi(ps):
        fitted = cache.h_y @ ps
        if spec.outcome_kind == "binary":
            fitted = expit(fitted)
        return wn @ ((w_stage * (y - fitted))[:, None] * cache.h_y)

    psi = _stage_solve(f_psi, np.zeros(layout.sizes[3]), cfg,
                       "outcome model", stage_notes)

    # Stage 4: weighted mean of respondent outcomes as the mu start.
    resp = r == 1
    wy = wn[resp] / pi_stage[resp]
    mu0 = float(wy @ y[resp] / wy.sum())

    x0 = layout.pack(mu0, gamma0, xi, beta, psi)

    def matrix_fn(x):
        return stacked_residual_matrix(
            dataset, spec, layout.to_params(x), moment=moment,
            include_tilt=layout.tilt_free, cache=cache,
        )

    def f_joint(x):
        return wn @ matrix_fn(x)

    outcome = solve_system(f_joint, x0, cfg)
    params = layout.to_params(outcome.root)

    pi_root = expit(cache.h_eta @ np.asarray(params.xi)
                    + (cache.s_sel @ np.asarray(params.gamma)) * y)
    diagnostics = {
        "n": n,
        "n_respondents": n_resp,
        "iterations": outcome.iterations,
        "residual_norm": outcome.residual_norm,
        "warnings": tuple(stage_notes) + outcome.warnings,
        "min_respondent_propensity": float(np.min(pi_root[resp])),
        "max_respondent_propensity": float(np.max(pi_root[resp])),
    }

    cov = None
    if outcome.converged:
        try:
            cov = sandwich_from_residuals(matrix_fn, outcome.root, cfg,
                                          weights=wn * n)
        except np.linalg.LinAlgError:
            diagnostics["warnings"] += ("singular sandwich bread matrix",)
    return _result_from_cov(
        estimator_id, layout.names, outcome.root, cov,
        outcome.converged, params, diagnostics,
    )


def _respondent_weights(pi, r):
    """r / pi with the explosion floor applied, zero at nonrespondent rows."""
    resp = r == 1
    bad = resp & (pi < PROPENSITY_FLOOR)
    if np.any(bad):
        raise WeightExplosionError(np.nonzero(bad)[0], PROPENSITY_FLOOR)
    w = np.zeros(len(pi))
    w[resp] = 1.0 / pi[resp]
    return w


def estimate_phi_tilde(dataset: Dataset, spec: ModelSpec,
                       config: SolverConfig | None = None,
                       fix_gamma=None, weights=None) -> EstimationResult:
    """IPW estimator of the outcome mean under outcome-dependent response.

    Solves the joint system in (mu, gamma, xi, beta, psi) with
    inverse-probability-weighted target residuals. fix_gamma pins the tilt
    (e.g. at zero for an ignorable-response fit with the same machinery);
    weights turn the sample into a weighted population, used for exact
    checks on enumerable designs.
    """
    return _fit_joint(dataset, spec, config, "ipw", fix_gamma, weights,
                      "phi_tilde")


def estimate_phi_hat(dataset: Dataset, spec: ModelSpec,
                     config: SolverConfig | None = None,
                     fix_gamma=None, weights=None) -> EstimationResult:
    """Augmented estimator: adds the nonrespondent conditional expectation.

    Shares the IPW estimator's fitted nuisances but replaces the target
    residuals with their augmented version, which also uses the implied
    law of the outcome among nonrespondents. Binary outcomes only.
    """
    return _fit_joint(dataset, spec, config, "augmented", fix_gamma, weights,
                      "phi_hat")


def estimate_cc(dataset: Dataset) -> EstimationResult:
    """Complete-case mean: the respondent average, biased when response
    depends on the outcome."""
    r = dataset.r
    if dataset.n_respondents == 0:
        raise EstimationError("dataset has no respondents")
    y = dataset.y_filled
    n = len(dataset)
    rbar = r.mean()
    mu = float(r @ y / r.sum())
    var = float(np.mean(r * (y - mu) ** 2)) / (rbar**2 * n)
    se = float(np.sqrt(var))
    diagnostics = {"n": n, "n_respondents": dataset.n_respondents}
    return EstimationResult(
        estimator_id="cc",
        param_names=("mu",),
        point=(mu,),
        se=(se,),
        ci95=(wald_ci(mu, se),),
        converged=True,
        diagnostics=diagnostics,
    )


def estimate_full(dataset: Dataset) -> EstimationResult:
    """Sample mean over a fully observed outcome (benchmark only)."""
    if dataset.n_respondents != len(dataset):
        raise EstimationError(
            "full-data estimator needs every outcome observed"
        )
    y = dataset.y_filled
    n = len(dataset)
    mu = float(y.mean())
    se = float(np.sqrt(np.mean((y - mu) ** 2) / n))
    return EstimationResult(
        estimator_id="full",
        param_names=("mu",),
        point=(mu,),
        se=(se,),
        ci95=(wald_ci(mu, se),),
        converged=True,
        diagnostics={"n": n, "n_respondents": n},
    )


def estimate_mar(dataset: Dataset, spec: ModelSpec,
                 config: SolverConfig | None = None) -> EstimationResult:
    """IPW mean under ignorable response: tilt pinned at zero, response
    probability depending on x only.

    Biased when missingness actually depends on the outcome; included as
    the standard benchmark an analyst would otherwise use.
    """
    cfg = config or SolverConfig()
    if dataset.n_respondents == 0:
        raise EstimationError("dataset has no respondents")
    cache = DesignCache.build(dataset, spec)
    r = dataset.r
    y = dataset.y_filled
    n = len(dataset)
    wn = np.full(n, 1.0 / n)
    stage_notes = []

    def f_logistic_r(t):
        return wn @ ((r - expit(cache.h_eta @ t))[:, None] * cache.h_eta)

    xi_start = _stage_solve(f_logistic_r, np.zeros(len(spec.eta_formula)),
                            cfg, "response regression", stage_notes)

    def pi_at(t):
        return expit(cache.h_eta @ t)

    def f_xi(t):
        w = _respondent_weights(pi_at(t), r)
        return wn @ ((w - 1.0)[:, None] * cache.h_eta)

    xi = _stage_solve(f_xi, xi_start, cfg, "response calibration", stage_notes)
    mu0 = hajek_mean(dataset, _respondent_weights(pi_at(xi), r))

    def matrix_fn(x):
        w = _respondent_weights(pi_at(x[1:]), r)
        return np.hstack([
            (w * (y - x[0]))[:, None],
            (w - 1.0)[:, None] * cache.h_eta,
        ])

    def f_joint(x):
        return wn @ matrix_fn(x)

    outcome = solve_system(f_joint, np.concatenate(([mu0], xi)), cfg)
    names = ("mu",) + tuple(_block_names("xi", spec.eta_formula))
    diagnostics = {
        "n": n,
        "n_respondents": dataset.n_respondents,
        "iterations": outcome.iterations,
        "residual_norm": outcome.residual_norm,
        "warnings": tuple(stage_notes) + outcome.warnings,
    }
    cov = None
    if outcome.converged:
        try:
            cov = sandwich_from_residuals(matrix_fn, outcome.root, cfg)
        except np.linalg.LinAlgError:
            diagnostics["warnings"] += ("singular sandwich bread matrix",)
    return _result_from_cov("mar", names, outcome.root, cov,
                            outcome.converged, None, diagnostics)


def phi_covariance_assembled(dataset: Dataset, spec: ModelSpec,
                             params: ParamVector, moment: str = "ipw",
                             config: SolverConfig | None = None) -> np.ndarray:
    """(mu, gamma) covariance assembled from the two-stage influence form.

    Corrects the target-moment residuals for nuisance estimation by
    projecting out the nuisance system, then sandwiches the corrected
    residuals. Algebraically identical to the (mu, gamma) block of the
    joint sandwich; kept as an independent route for verification.
    """
    cfg = config or SolverConfig()
    cache = DesignCache.build(dataset, spec)
    layout = _Layout(spec, None)
    x = layout.pack(params.mu, params.gamma, params.xi, params.beta, params.psi)
    n = len(dataset)
    k_phi = 1 + layout.sizes[0]

    g_fn = g_tilde_matrix if moment == "ipw" else g_augmented_matrix

    def g_mean(v):
        return np.mean(g_fn(dataset, spec, layout.to_params(v), cache), axis=0)

    def m_mean(v):
        return np.mean(
            moment_m_matrix(dataset, spec, layout.to_params(v), cache), axis=0
        )

    full_g = numerical_jacobian(g_mean, x, cfg.jacobian_step)
    full_m = numerical_jacobian(m_mean, x, cfg.jacobian_step)
    g_phi, g_theta = full_g[:, :k_phi], full_g[:, k_phi:]
    m_phi, m_theta = full_m[:, :k_phi], full_m[:, k_phi:]

    correction = g_theta @ np.linalg.inv(m_theta)
    bread = g_phi - correction @ m_phi
    g_res = g_fn(dataset, spec, params, cache)
    m_res = moment_m_matrix(dataset, spec, params, cache)
    corrected = g_res - m_res @ correction.T
    meat = corrected.T @ corrected / n
    bread_inv = np.linalg.inv(bread)
    return bread_inv @ meat @ bread_inv.T / n
