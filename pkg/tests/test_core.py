"""Formula language, records, datasets, and parameter packing."""

import numpy as np
import pytest

from ivmean import (
    ConfigurationError,
    ContractViolation,
    DataError,
    Dataset,
    DesignFormula,
    ObservedRecord,
    ParamVector,
    flatten,
    unflatten,
)
from ivmean.core import evaluate_design
from ivmean.models import ModelSpec


class TestFormulaParsing:
    def test_basic_terms_round_trip(self):
        f = DesignFormula.parse("1 + u1 + u2 + z")
        assert f.to_string() == "1 + u1 + u2 + z"
        assert len(f) == 4
        assert DesignFormula.parse(f.to_string()) == f

    def test_products_and_squares(self):
        f = DesignFormula.parse("1 + u1:u2 + u1^2 + z:u1")
        assert f.to_string() == "1 + u1:u2 + u1^2 + z:u1"

    def test_product_operand_order_is_canonicalized(self):
        assert DesignFormula.parse("u2:u1") == DesignFormula.parse("u1:u2")
        assert DesignFormula.parse("u1:z") == DesignFormula.parse("z:u1")

    def test_uses_z_flag(self):
        assert DesignFormula.parse("1 + z").uses_z
        assert DesignFormula.parse("1 + z:u2").uses_z
        assert not DesignFormula.parse("1 + u1 + u1^2").uses_z

    @pytest.mark.parametrize("bad", [
        "1 + w2",
        "u0",
        "u1:u1",
        "z:z",
        "1 + + u1",
        "u1 + u1",
        "1:u1",
        "u1:u2:u3",
        "z^2",
        "",
    ])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ConfigurationError):
            DesignFormula.parse(bad)

    def test_empty_terms_rejected_on_construction(self):
        with pytest.raises(ConfigurationError):
            DesignFormula(())


class TestEvaluateDesign:
    def test_intercept_only(self):
        f = DesignFormula.parse("1")
        assert evaluate_design(f, 1.0, (0.5, -1.0)).tolist() == [1.0]

    def test_main_effects(self):
        f = DesignFormula.parse("1 + u1 + u2 + z")
        np.testing.assert_array_equal(
            evaluate_design(f, 1.0, (0.5, -1.0)), [1.0, 0.5, -1.0, 1.0]
        )

    def test_square_and_products(self):
        f = DesignFormula.parse("1 + u1 + u1^2")
        np.testing.assert_array_equal(
            evaluate_design(f, 0.0, (2.0, 7.0)), [1.0, 2.0, 4.0]
        )
        f2 = DesignFormula.parse("u1:u2 + z:u2")
        np.testing.assert_array_equal(
            evaluate_design(f2, 1.0, (3.0, -2.0)), [-6.0, -2.0]
        )

    def test_missing_covariate_index(self):
        f = DesignFormula.parse("1 + u3")
        with pytest.raises(ConfigurationError):
            evaluate_design(f, 0.0, (1.0, 2.0))

    def test_deterministic(self):
        f = DesignFormula.parse("1 + u1:u2 + z:u1 + u2^2")
        a = evaluate_design(f, 1.0, (0.37, -2.11))
        b = evaluate_design(f, 1.0, (0.37, -2.11))
        assert a.tobytes() == b.tobytes()

    def test_evaluate_many_matches_single(self):
        rng = np.random.default_rng(42)
        f = DesignFormula.parse("1 + u1 + u2 + u1:u2 + u2^2 + z + z:u1")
        z = (rng.random(50) < 0.5).astype(float)
        u = rng.standard_normal((50, 2))
        mat = f.evaluate_many(z, u)
        for i in range(50):
            np.testing.assert_allclose(
                mat[i], evaluate_design(f, z[i], u[i]), rtol=0, atol=0
            )


class TestObservedRecord:
    def test_respondent_requires_outcome(self):
        with pytest.raises(ContractViolation):
            ObservedRecord(r=1, y=None, z=0.0, u=(0.0,))

    def test_nonrespondent_must_hide_outcome(self):
        with pytest.raises(ContractViolation):
            ObservedRecord(r=0, y=1.0, z=0.0, u=(0.0,))

    def test_outcome_access_guard(self):
        rec = ObservedRecord(r=0, y=None, z=1.0, u=(0.5,))
        with pytest.raises(ContractViolation):
            rec.outcome
        rec2 = ObservedRecord(r=1, y=3.5, z=1.0, u=(0.5,))
        assert rec2.outcome == 3.5

    def test_r_must_be_binary(self):
        with pytest.raises(ContractViolation):
            ObservedRecord(r=2, y=1.0, z=0.0, u=(0.0,))


class TestDataset:
    def test_arrays_match_records(self, tiny_dataset):
        ds = tiny_dataset
        np.testing.assert_array_equal(ds.r, [1, 0, 1, 1, 0, 1])
        np.testing.assert_array_equal(ds.y_filled, [1, 0, 0, 1, 0, 0])
        np.testing.assert_array_equal(ds.z, [1, 0, 0, 0, 1, 1])
        assert ds.u.shape == (6, 2)
        assert ds.n_respondents == 4
        assert len(ds) == 6

    def test_immutable(self, tiny_dataset):
        with pytest.raises(AttributeError):
            tiny_dataset.records = ()
        assert not tiny_dataset.r.flags.writeable

    def test_equality_by_value(self, tiny_dataset):
        clone = Dataset(list(tiny_dataset.records))
        assert clone == tiny_dataset

    def test_mixed_covariate_dimension_rejected(self):
        with pytest.raises(DataError):
            Dataset([
                ObservedRecord(r=1, y=1.0, z=0.0, u=(0.0,)),
                ObservedRecord(r=1, y=0.0, z=0.0, u=(0.0, 1.0)),
            ])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            Dataset([])

    def test_from_arrays_hides_nonrespondent_outcomes(self):
        ds = Dataset.from_arrays(
            r=[1, 0], y=[2.5, 99.0], z=[0.0, 1.0], u=np.zeros((2, 1))
        )
        assert ds.records[0].y == 2.5
        assert ds.records[1].y is None


class TestParamVector:
    def test_flatten_order(self):
        p = ParamVector(mu=0.3, gamma=(2.0,), xi=(1.0, -3.0),
                        beta=(0.0,), psi=(0.5,))
        np.testing.assert_array_equal(
            flatten(p), [0.3, 2.0, 1.0, -3.0, 0.0, 0.5]
        )

    def test_round_trip_exact(self, spec_c1):
        rng = np.random.default_rng(7)
        sizes = spec_c1.param_block_sizes()
        total = 1 + sum(sizes)
        for _ in range(20):
            v = rng.standard_normal(total)
            out = flatten(unflatten(v, spec_c1))
            assert out.tobytes() == v.tobytes()

    def test_unflatten_wrong_length(self, spec_c1):
        with pytest.raises(ContractViolation):
            unflatten(np.zeros(3), spec_c1)

    def test_non_finite_rejected(self):
        with pytest.raises(ContractViolation):
            ParamVector(mu=float("nan"), gamma=(0.0,), xi=(0.0,),
                        beta=(0.0,), psi=(0.0,))
        with pytest.raises(ContractViolation):
            ParamVector(mu=0.0, gamma=(float("inf"),), xi=(0.0,),
                        beta=(0.0,), psi=(0.0,))

    def test_block_sizes_match_spec(self, spec_c1):
        zero = spec_c1.zero_params()
        assert zero.block_sizes() == spec_c1.param_block_sizes()
        assert isinstance(spec_c1, ModelSpec)
