import numpy as np
import pytest

from src.molrg import MoLRGModel, random_model, sample_dataset
from src.schedule import Schedule, ScheduleKind


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def ve():
    return Schedule()


@pytest.fixture
def vp():
    return Schedule(kind=ScheduleKind.VP)


@pytest.fixture
def axis_model():
    """K=1, n=2, U* = e1."""
    return MoLRGModel(bases=(np.array([[1.0], [0.0]]),), weights=np.array([1.0]))


@pytest.fixture
def two_axes_model():
    """K=2, n=2, U1 = e1, U2 = e2, uniform weights."""
    return MoLRGModel(bases=(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])),
                      weights=np.array([0.5, 0.5]), mutually_orthogonal=True)


@pytest.fixture
def orth_pair(rng):
    model = random_model(rng, 48, 2, 6, mutually_orthogonal=True)
    return model, sample_dataset(model, 200, 0.0, rng, balanced=True)
