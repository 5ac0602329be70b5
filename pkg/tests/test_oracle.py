"""Exact-enumeration checks: moment identities, double robustness,
identification probing."""

import numpy as np
import pytest

from ivmean import (
    ConfigurationError,
    DesignFormula,
    ModelSpec,
    ParamVector,
    ToyPopulation,
    default_toy_population,
    estimate_phi_hat,
    estimate_phi_tilde,
    exact_expectation,
    hajek_mean,
    verify_identification,
)
from ivmean.core import ObservedRecord
from ivmean.models import propensity
from ivmean.moments import (
    MomentContext,
    g_augmented,
    g_tilde,
    moment_m,
    nonrespondent_law,
    stacked_residual_matrix,
)
from ivmean.oracle import degenerate_toy_population
from ivmean.solver import SolverConfig


@pytest.fixture(scope="module")
def pop():
    return default_toy_population()


@pytest.fixture(scope="module")
def truth_params(pop):
    return pop.true_params()


def _ctx(pop, params, r, y, z, u):
    rec = ObservedRecord(r=r, y=y if r == 1 else None, z=z, u=u)
    return MomentContext(pop.spec, params, rec)


class TestEnumeration:
    def test_total_mass_and_atom_count(self, pop):
        assert len(pop.atoms) == 72
        assert exact_expectation(pop, lambda r, y, z, u: 1.0) == pytest.approx(
            1.0, abs=1e-14
        )

    def test_true_mean_matches_direct_sum(self, pop):
        from ivmean.models import outcome_model

        direct = sum(
            pu * outcome_model(pop.spec, u, pop.psi).mean
            for u, pu in zip(pop.u_atoms, pop.u_pmf)
        )
        assert pop.true_mean == pytest.approx(direct, abs=1e-15)
        assert 0.0 < pop.true_mean < 1.0

    def test_weighted_sample_masks_outcomes(self, pop):
        dataset, weights = pop.as_weighted_sample()
        assert len(dataset) == 72
        assert weights.sum() == pytest.approx(1.0, abs=1e-14)
        for rec, atom in zip(dataset.records, pop.atoms):
            assert rec.r == atom.r
            if rec.r == 0:
                assert rec.y is None
            else:
                assert rec.y == atom.y

    def test_exact_expectation_vector_valued(self, pop):
        out = exact_expectation(pop, lambda r, y, z, u: np.array([r, y, z]))
        assert out.shape == (3,)
        # P(R=1) must match the enumerated response margin.
        direct = sum(a.prob for a in pop.atoms if a.r == 1)
        assert out[0] == pytest.approx(direct, abs=1e-14)


class TestMomentIdentitiesAtTruth:
    def test_all_blocks_have_exact_zero_mean(self, pop, truth_params):
        def f(r, y, z, u):
            ctx = _ctx(pop, truth_params, r, y, z, u)
            return np.concatenate([g_tilde(ctx), g_augmented(ctx),
                                   moment_m(ctx)])

        total = exact_expectation(pop, f)
        np.testing.assert_allclose(total, 0.0, atol=1e-12)

    def test_weighted_sample_route_agrees(self, pop, truth_params):
        dataset, weights = pop.as_weighted_sample()
        wn = weights / weights.sum()
        stacked = stacked_residual_matrix(dataset, pop.spec, truth_params)
        np.testing.assert_allclose(wn @ stacked, 0.0, atol=1e-12)

    def test_hajek_identity(self, pop, truth_params):
        dataset, weights = pop.as_weighted_sample()
        inv_pi = np.ones(len(dataset))
        for i, rec in enumerate(dataset.records):
            if rec.r == 1:
                pi = propensity(pop.spec, rec.y, rec.z, rec.u,
                                pop.xi, pop.gamma)
                inv_pi[i] = 1.0 / pi
        assert hajek_mean(dataset, weights * inv_pi) == pytest.approx(
            pop.true_mean, abs=1e-13
        )

    def test_nonrespondent_law_matches_enumeration(self, pop, truth_params):
        for u in pop.u_atoms[:3]:
            for z in (0.0, 1.0):
                num = sum(a.prob for a in pop.atoms
                          if a.r == 0 and a.y == 1.0 and a.z == z and a.u == u)
                den = sum(a.prob for a in pop.atoms
                          if a.r == 0 and a.z == z and a.u == u)
                ctx = _ctx(pop, truth_params, 0, None, z, u)
                assert nonrespondent_law(ctx) == pytest.approx(
                    num / den, abs=1e-12
                )


def _perturbed(params: ParamVector, **changes) -> ParamVector:
    fields = dict(mu=params.mu, gamma=params.gamma, xi=params.xi,
                  beta=params.beta, psi=params.psi)
    fields.update(changes)
    return ParamVector(**fields)


class TestDoubleRobustnessMomentLevel:
    """E g = 0 at the true (mu, gamma, xi) when either the instrument or
    the outcome model is wrong, but not when both are."""

    WRONG_BETA = (0.9, -0.2, 0.3)
    WRONG_PSI = (0.4, -0.6, 0.1)

    def _mean_g(self, pop, params):
        def f(r, y, z, u):
            ctx = _ctx(pop, params, r, y, z, u)
            return np.concatenate([g_tilde(ctx), g_augmented(ctx)])

        return exact_expectation(pop, f)

    def test_wrong_instrument_model(self, pop, truth_params):
        params = _perturbed(truth_params, beta=self.WRONG_BETA)
        np.testing.assert_allclose(self._mean_g(pop, params), 0.0, atol=1e-10)

    def test_wrong_outcome_model(self, pop, truth_params):
        params = _perturbed(truth_params, psi=self.WRONG_PSI)
        np.testing.assert_allclose(self._mean_g(pop, params), 0.0, atol=1e-10)

    def test_both_wrong_is_detectably_nonzero(self, pop, truth_params):
        params = _perturbed(truth_params, beta=self.WRONG_BETA,
                            psi=self.WRONG_PSI)
        mean_g = self._mean_g(pop, params)
        assert np.max(np.abs(mean_g)) > 1e-4


class TestDoubleRobustnessEstimatorLevel:
    """Fitting with one misspecified working model on the exact population
    still recovers the target mean and tilt."""

    @pytest.mark.parametrize("column", ["z_formula", "y_formula"])
    def test_one_sided_misspecification(self, pop, column):
        base = pop.spec
        fields = dict(
            eta_formula=base.eta_formula,
            z_formula=base.z_formula,
            y_formula=base.y_formula,
        )
        fields[column] = DesignFormula.parse("1 + u1")  # drops u2
        spec = ModelSpec(**fields)
        dataset, weights = pop.as_weighted_sample()
        for fit in (estimate_phi_tilde, estimate_phi_hat):
            res = fit(dataset, spec, weights=weights)
            assert res.converged
            assert res.mu == pytest.approx(pop.true_mean, abs=1e-7)
            np.testing.assert_allclose(res.params.gamma, pop.gamma, atol=1e-6)
            np.testing.assert_allclose(res.params.xi, pop.xi, atol=1e-6)


class TestIdentificationProbe:
    def test_default_population_is_well_posed(self, pop):
        report = verify_identification(pop)
        assert report.unique_root
        assert report.converged_count == report.n_starts == 5
        assert report.max_root_spread < 1e-8
        assert report.jacobian_condition < 1e6
        assert report.warnings == ()

    def test_flat_tilt_population_is_flagged(self):
        degenerate = degenerate_toy_population()
        report = verify_identification(
            degenerate, n_starts=2, config=SolverConfig(max_iter=40)
        )
        assert not report.unique_root
        assert report.jacobian_condition > 1e12
        assert any("near-singular" in w for w in report.warnings)

    def test_boundary_outcome_probability_is_flagged(self, pop):
        shifted = ToyPopulation(
            spec=pop.spec, u_atoms=pop.u_atoms, u_pmf=pop.u_pmf,
            gamma=pop.gamma, xi=pop.xi, beta=pop.beta,
            psi=(-40.0, 0.0, 0.0),
        )
        report = verify_identification(
            shifted, n_starts=1, config=SolverConfig(max_iter=25)
        )
        assert not report.unique_root
        assert any("boundary" in w for w in report.warnings)


class TestPopulationValidation:
    def test_pmf_must_sum_to_one(self, pop):
        with pytest.raises(ConfigurationError):
            ToyPopulation(
                spec=pop.spec, u_atoms=pop.u_atoms,
                u_pmf=(0.5,) + (0.1,) * 8,
                gamma=pop.gamma, xi=pop.xi, beta=pop.beta, psi=pop.psi,
            )

    def test_pmf_must_be_positive(self, pop):
        bad = (0.0,) + (1.0 / 8,) * 8
        with pytest.raises(ConfigurationError):
            ToyPopulation(
                spec=pop.spec, u_atoms=pop.u_atoms, u_pmf=bad,
                gamma=pop.gamma, xi=pop.xi, beta=pop.beta, psi=pop.psi,
            )

    def test_binary_outcome_required(self, pop):
        spec = ModelSpec(
            eta_formula=DesignFormula.parse("1 + z + u1 + u2"),
            z_formula=DesignFormula.parse("1 + u1 + u2"),
            y_formula=DesignFormula.parse("1 + u1 + u2"),
            outcome_kind="continuous",
        )
        with pytest.raises(ConfigurationError):
            ToyPopulation(
                spec=spec, u_atoms=pop.u_atoms, u_pmf=pop.u_pmf,
                gamma=pop.gamma, xi=pop.xi, beta=pop.beta, psi=pop.psi,
            )

    def test_floor_violations_rejected_at_enumeration(self, pop):
        risky = ToyPopulation(
            spec=pop.spec, u_atoms=pop.u_atoms, u_pmf=pop.u_pmf,
            gamma=pop.gamma, xi=(-20.0, 0.0, 0.0, 0.0),
            beta=pop.beta, psi=pop.psi,
        )
        with pytest.raises(ConfigurationError):
            risky.atoms
