"""Damped Newton root finder for stacked estimating equations.

The residual is reduced under a max-norm Armijo-free line search: a full
Newton step is halved until the residual norm strictly decreases. Trial
points where the residual cannot be evaluated (weight explosions,
degenerate mixtures, non-finite values) count as non-decreasing and are
halved past; the same failures at an accepted iterate propagate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationDomainError, SolverEvaluationError


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and limits for solve_system."""

    tol: float = 1e-9
    max_iter: int = 200
    max_halvings: int = 40
    jacobian_step: float = 1e-6
    condition_warn: float = 1e10


@dataclass(frozen=True)
class SolveOutcome:
    """Result of a root solve; converged=False is an outcome, not an error."""

    root: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    warnings: tuple = ()
    jacobian: np.ndarray | None = None

    @property
    def condition_number(self) -> float:
        if self.jacobian is None:
            return float("nan")
        return float(np.linalg.cond(self.jacobian))


def numerical_jacobian(f, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of f at x.

    Column j uses h_j = step * max(1, |x_j|). Non-finite entries raise,
    naming the offending coordinate.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = step * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        col = (np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / (2 * h)
        if not np.all(np.isfinite(col)):
            raise ValueError(f"non-finite jacobian entries for coordinate {j}")
        cols.append(col)
    return np.column_stack(cols)


def _eval_at_accepted(f, x):
    """Evaluate the residual where failure is not recoverable."""
    try:
        return np.asarray(f(x), dtype=float)
    except EvaluationDomainError as exc:
        raise SolverEvaluationError(
            f"residual evaluation failed at iterate: {exc}", np.array(x)
        ) from exc


def solve_system(f, x0, config: SolverConfig | None = None) -> SolveOutcome:
    """Find a root of f by damped Newton iteration.

    Returns a SolveOutcome whose converged flag reports whether the
    max-norm of the residual reached config.tol. Singular Jacobians and
    stalled line searches yield converged=False with a warning attached
    rather than an exception. Identical inputs give identical outcomes.
    """
    cfg = config or SolverConfig()
    x = np.asarray(x0, dtype=float).copy()
    warnings = []

    fx = _eval_at_accepted(f, x)
    norm = float(np.max(np.abs(fx))) if fx.size else 0.0
    if not np.isfinite(norm):
        return SolveOutcome(x, norm, 0, False, ("non-finite residual at start",))

    iterations = 0
    converged = norm <= cfg.tol
    while not converged and iterations < cfg.max_iter:
        try:
            jac = numerical_jacobian(f, x, cfg.jacobian_step)
        except (ValueError, EvaluationDomainError) as exc:
            warnings.append(f"jacobian evaluation failed: {exc}")
            break
        try:
            step = np.linalg.solve(jac, -fx)
        except np.linalg.LinAlgError:
            warnings.append("singular jacobian at iterate")
            break
        if not np.all(np.isfinite(step)):
            warnings.append("non-finite newton step")
            break

        accepted = False
        scale = 1.0
        for _ in range(cfg.max_halvings + 1):
            trial = x + scale * step
            try:
                f_trial = np.asarray(f(trial), dtype=float)
            except EvaluationDomainError:
                scale *= 0.5
                continue
            trial_norm = float(np.max(np.abs(f_trial)))
            if np.isfinite(trial_norm) and trial_norm < norm:
                x, fx, norm = trial, f_trial, trial_norm
                accepted = True
                break
            scale *= 0.5
        iterations += 1
        if not accepted:
            warnings.append("line search stalled")
            break
        converged = norm <= cfg.tol

    if not converged and iterations >= cfg.max_iter:
        warnings.append(f"no convergence in {cfg.max_iter} iterations")

    jac_root = None
    if converged:
        try:
            jac_root = numerical_jacobian(f, x, cfg.jacobian_step)
            cond = float(np.linalg.cond(jac_root))
            if not np.isfinite(cond) or cond > cfg.condition_warn:
                warnings.append(
                    f"ill-conditioned system at root (condition {cond:.3g})"
                )
        except (ValueError, EvaluationDomainError) as exc:
            warnings.append(f"jacobian at root unavailable: {exc}")

    return SolveOutcome(
        root=x,
        residual_norm=norm,
        iterations=iterations,
        converged=converged,
        warnings=tuple(warnings),
        jacobian=jac_root,
    )
