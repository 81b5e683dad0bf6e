import numpy as np
import pytest

from calibrl.policy import VocabLayout, init_policy
from calibrl.synthworld import make_task_spec, sample_instances


@pytest.fixture
def spec4():
    return make_task_spec({"num_options": 4, "label_temperature": 0.8, "trace_length": 3})


@pytest.fixture
def layout4(spec4):
    return VocabLayout.for_spec(spec4)


@pytest.fixture
def params8(spec4, layout4):
    return init_policy(8, layout4, spec4.trace_length, np.random.default_rng(3))


@pytest.fixture
def instances4(spec4):
    return sample_instances(spec4, 16, seed=5)


def scaled(params, factor):
    """Random params scaled up so distributions are far from uniform."""
    return params.with_flat(params.flat() * factor)
