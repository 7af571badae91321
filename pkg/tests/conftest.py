import numpy as np
import pytest

from app.core.kernels import SquaredExponential
from app.core.mean_basis import ConstantBasis, MeanSpec
from app.core.measurement import LinearFactorItem, MeasurementSpec, ProbitItem
from app.core.model import ConstraintSet, ModelSpec
from app.core.simulate import SimConfig, simulate_dataset

LOADING_FIX = ConstraintSet(scale="first_loading", location="first_item_location")


def make_study1(horizon=10.0):
    return ModelSpec.single(
        MeanSpec(ConstantBasis(horizon), (1.5,)),
        SquaredExponential(np.sqrt(0.4), 0.3),
        MeasurementSpec((LinearFactorItem(1.0, 0.0, 0.1),)),
        LOADING_FIX,
    )


def make_study2(horizon=10.0):
    items = (
        ProbitItem(1.0, (0.0, 1.84)),
        ProbitItem(1.0, (0.45, 1.45)),
        ProbitItem(0.65, (-0.25, 0.44)),
        ProbitItem(0.62, (-0.27, 1.37)),
        ProbitItem(0.53, (0.34, 1.55)),
    )
    return ModelSpec.single(
        MeanSpec(ConstantBasis(horizon), (-0.79,)),
        SquaredExponential(np.sqrt(1.27), 0.3),
        MeasurementSpec(items),
        LOADING_FIX,
    )


def make_grouped(horizon=10.0):
    return ModelSpec(
        (MeanSpec(ConstantBasis(horizon), (1.549,)), MeanSpec(ConstantBasis(horizon), (1.630,))),
        (SquaredExponential(np.sqrt(0.234), 0.237), SquaredExponential(np.sqrt(0.440), 0.249)),
        MeasurementSpec((LinearFactorItem(1.0, 0.0, 0.091),)),
        LOADING_FIX,
        groups=("0", "1"),
    )


@pytest.fixture
def study1_model():
    return make_study1()


@pytest.fixture
def study2_model():
    return make_study2()


@pytest.fixture
def grouped_model():
    return make_grouped()


@pytest.fixture
def study1_data():
    config = SimConfig(N=40, days=10, per_day=4, model=make_study1(), seed=101)
    return simulate_dataset(config)[0]


@pytest.fixture
def study2_data():
    config = SimConfig(N=12, days=4, per_day=4, model=make_study2(4.0), seed=202)
    return simulate_dataset(config)[0]


@pytest.fixture
def grouped_data():
    config = SimConfig(N=16, days=5, per_day=4, model=make_grouped(5.0), seed=303,
                       group_mix={"0": 0.5, "1": 0.5})
    return simulate_dataset(config)[0]
