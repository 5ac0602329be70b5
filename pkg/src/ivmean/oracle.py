"""Exact finite-population checks for the estimating equations.

A ToyPopulation puts mass on a small covariate grid and propagates it
through the same factorization the simulator uses:
p(u) p(z | u) p(y | u) p(r | y, z, u). Everything about the population is
then exactly computable by enumeration, so moment identities (zero mean at
the truth, double robustness) can be asserted to near machine precision,
and the identification map can be probed for multiple roots or a singular
Jacobian before trusting any Monte Carlo result.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import Dataset, DesignFormula, ObservedRecord, ParamVector, flatten, unflatten
from .errors import ConfigurationError
from .models import ModelSpec, outcome_model, prob_z, propensity
from .moments import PROPENSITY_FLOOR, DesignCache, stacked_residual_matrix
from .solver import SolverConfig, numerical_jacobian, solve_system


@dataclass(frozen=True)
class Atom:
    """One point of the complete-data law with its probability."""

    prob: float
    r: int
    y: float
    z: float
    u: tuple


@dataclass(frozen=True)
class ToyPopulation:
    """A fully enumerable binary-outcome population on a covariate grid."""

    spec: ModelSpec
    u_atoms: tuple
    u_pmf: tuple
    gamma: tuple
    xi: tuple
    beta: tuple
    psi: tuple

    def __post_init__(self):
        if self.spec.outcome_kind != "binary":
            raise ConfigurationError("toy populations require a binary outcome")
        if len(self.u_atoms) != len(self.u_pmf):
            raise ConfigurationError("u_atoms and u_pmf lengths differ")
        object.__setattr__(
            self, "u_atoms", tuple(tuple(float(v) for v in u) for u in self.u_atoms)
        )
        object.__setattr__(self, "u_pmf", tuple(float(p) for p in self.u_pmf))
        for name in ("gamma", "xi", "beta", "psi"):
            object.__setattr__(
                self, name, tuple(float(v) for v in getattr(self, name))
            )
        if abs(sum(self.u_pmf) - 1.0) > 1e-12:
            raise ConfigurationError("u_pmf must sum to 1")
        if min(self.u_pmf) <= 0:
            raise ConfigurationError("u_pmf entries must be positive")

    @cached_property
    def atoms(self) -> tuple:
        """All (prob, r, y, z, u) points in a fixed enumeration order."""
        out = []
        for u, pu in zip(self.u_atoms, self.u_pmf):
            pz1 = prob_z(self.spec, 1.0, u, self.beta)
            py1 = outcome_model(self.spec, u, self.psi).mean
            for z in (0.0, 1.0):
                pz = pz1 if z == 1.0 else 1.0 - pz1
                for y in (0.0, 1.0):
                    py = py1 if y == 1.0 else 1.0 - py1
                    pi = propensity(self.spec, y, z, u, self.xi, self.gamma)
                    if pi < PROPENSITY_FLOOR:
                        raise ConfigurationError(
                            "population puts mass on a point with response "
                            f"probability {pi:.3g} below {PROPENSITY_FLOOR:g}"
                        )
                    for r in (0, 1):
                        pr = pi if r == 1 else 1.0 - pi
                        out.append(Atom(pu * pz * py * pr, r, y, z, u))
        return tuple(out)

    @cached_property
    def true_mean(self) -> float:
        return float(
            sum(
                pu * outcome_model(self.spec, u, self.psi).mean
                for u, pu in zip(self.u_atoms, self.u_pmf)
            )
        )

    def true_params(self) -> ParamVector:
        return ParamVector(
            mu=self.true_mean, gamma=self.gamma, xi=self.xi,
            beta=self.beta, psi=self.psi,
        )

    def as_weighted_sample(self) -> tuple:
        """(Dataset, weights): one observed record per atom, pmf weights.

        Nonrespondent atoms hide the outcome, so weighted empirical means
        over this sample equal exact observed-data expectations.
        """
        records = []
        weights = []
        for a in self.atoms:
            records.append(
                ObservedRecord(
                    r=a.r, y=a.y if a.r == 1 else None, z=a.z, u=a.u
                )
            )
            weights.append(a.prob)
        return Dataset(records), np.asarray(weights)


def exact_expectation(pop: ToyPopulation, f) -> np.ndarray:
    """Exact expectation of f(r, y, z, u) over the complete-data law."""
    total = None
    for a in pop.atoms:
        val = a.prob * np.asarray(f(a.r, a.y, a.z, a.u), dtype=float)
        total = val if total is None else total + val
    return total


@dataclass(frozen=True)
class IdentificationReport:
    """Outcome of probing the exact moment system for unique solvability."""

    roots: tuple
    converged_count: int
    n_starts: int
    max_root_spread: float
    jacobian_condition: float
    unique_root: bool
    warnings: tuple


def default_toy_population() -> ToyPopulation:
    """A well-behaved population on the grid {-1, 0, 1}^2."""
    spec = ModelSpec(
        eta_formula=_f("1 + z + u1 + u2"),
        z_formula=_f("1 + u1 + u2"),
        y_formula=_f("1 + u1 + u2"),
    )
    grid = [(a, b) for a in (-1.0, 0.0, 1.0) for b in (-1.0, 0.0, 1.0)]
    return ToyPopulation(
        spec=spec,
        u_atoms=tuple(grid),
        u_pmf=(1.0 / 9,) * 9,
        gamma=(0.7,),
        xi=(0.4, -0.8, 0.5, 0.3),
        beta=(0.2, 0.6, -0.4),
        psi=(-0.3, 0.8, -0.5),
    )


def degenerate_toy_population() -> ToyPopulation:
    """A population whose response ignores both the instrument and the
    outcome, so the tilt has no identifying signal."""
    base = default_toy_population()
    return ToyPopulation(
        spec=base.spec,
        u_atoms=base.u_atoms,
        u_pmf=base.u_pmf,
        gamma=(0.0,),
        xi=(0.4, 0.0, 0.5, 0.3),
        beta=base.beta,
        psi=base.psi,
    )


def _f(text: str) -> DesignFormula:
    return DesignFormula.parse(text)


def verify_identification(pop: ToyPopulation, n_starts: int = 5,
                          seed: int = 7,
                          config: SolverConfig | None = None) -> IdentificationReport:
    """Solve the exact stacked system from scattered starts and inspect it.

    Reports the spread of the recovered roots, the condition number of the
    system Jacobian at the truth, and warnings for boundary pathologies
    (outcome probabilities at 0/1, near-singular identification).
    """
    cfg = config or SolverConfig()
    dataset, weights = pop.as_weighted_sample()
    wn = weights / weights.sum()
    cache = DesignCache.build(dataset, pop.spec)
    spec = pop.spec
    truth = pop.true_params()
    x_true = flatten(truth)

    def f_exact(x):
        params = unflatten(x, spec)
        return wn @ stacked_residual_matrix(dataset, spec, params, cache=cache)

    warnings = []
    jac = numerical_jacobian(f_exact, x_true, cfg.jacobian_step)
    cond = float(np.linalg.cond(jac))
    if not np.isfinite(cond) or cond > 1e12:
        warnings.append(
            f"identification jacobian is near-singular (condition {cond:.3g})"
        )

    for u, pu in zip(pop.u_atoms, pop.u_pmf):
        py = outcome_model(spec, u, pop.psi).mean
        if py < 1e-12 or py > 1 - 1e-12:
            warnings.append(
                f"outcome probability at boundary ({py:.3g}) on atom u={u}"
            )

    rng = np.random.default_rng(seed)
    roots = []
    converged = 0
    for _ in range(n_starts):
        start = x_true + rng.uniform(-0.75, 0.75, size=x_true.size)
        out = solve_system(f_exact, start, cfg)
        if out.converged:
            converged += 1
            roots.append(tuple(out.root))
    spread = 0.0
    for i in range(len(roots)):
        for j in range(i + 1, len(roots)):
            spread = max(
                spread,
                float(np.max(np.abs(np.array(roots[i]) - np.array(roots[j])))),
            )
    unique = converged == n_starts and spread < 1e-8 and not warnings
    return IdentificationReport(
        roots=tuple(roots),
        converged_count=converged,
        n_starts=n_starts,
        max_root_spread=spread,
        jacobian_condition=cond,
        unique_root=unique,
        warnings=tuple(warnings),
    )
