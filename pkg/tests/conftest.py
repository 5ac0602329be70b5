"""Shared fixtures: model specs, benchmark parameters, sample datasets."""

import numpy as np
import pytest

from ivmean import (
    Dataset,
    DgpConfig,
    ObservedRecord,
    ParamVector,
    draw_sample,
    scenario_model_spec,
    true_outcome_mean,
)

# True parameter values of the benchmark data law, in working-model
# coordinates: response index (1, z, u1, u2) with tilt 2, instrument model
# (1, u1, u2, u1:u2), outcome model (1, u1, u2).
TRUE_XI = (2.0, -3.0, 0.8, 1.0)
TRUE_GAMMA = (2.0,)
TRUE_BETA = (1.0, 2.0, -1.0, -0.8)
TRUE_PSI = (0.5, -2.0, 1.0)


@pytest.fixture(scope="session")
def spec_c1():
    return scenario_model_spec("C1")


@pytest.fixture(scope="session")
def truth():
    return true_outcome_mean(DgpConfig())


@pytest.fixture(scope="session")
def true_params(truth):
    return ParamVector(mu=truth, gamma=TRUE_GAMMA, xi=TRUE_XI,
                       beta=TRUE_BETA, psi=TRUE_PSI)


@pytest.fixture(scope="session")
def c1_sample():
    """One benchmark draw large enough for stable single-sample checks."""
    return draw_sample(DgpConfig(), 5000, seed=31)


@pytest.fixture(scope="session")
def c1_sample_small():
    return draw_sample(DgpConfig(), 1200, seed=208)


def make_record(r, y, z, u):
    return ObservedRecord(r=r, y=y, z=z, u=u)


@pytest.fixture()
def tiny_dataset():
    """Six records, two of them nonrespondents."""
    return Dataset([
        ObservedRecord(r=1, y=1.0, z=1.0, u=(0.3, -0.2)),
        ObservedRecord(r=0, y=None, z=0.0, u=(-1.1, 0.4)),
        ObservedRecord(r=1, y=0.0, z=0.0, u=(0.0, 0.0)),
        ObservedRecord(r=1, y=1.0, z=0.0, u=(2.0, 1.0)),
        ObservedRecord(r=0, y=None, z=1.0, u=(0.5, 0.5)),
        ObservedRecord(r=1, y=0.0, z=1.0, u=(-0.4, -1.5)),
    ])
