"""Shared fixtures: one default synthetic sequence and random weights,
built once per session because generation and init are not free."""

import numpy as np
import pytest

from evpoint.network import init_weights
from evpoint.synth import SceneConfig, generate


@pytest.fixture(scope="session")
def checker_seq():
    return generate(SceneConfig())


@pytest.fixture(scope="session")
def square_seq():
    return generate(SceneConfig(pattern="single_square", seed=3))


@pytest.fixture(scope="session")
def random_weights():
    return init_weights(np.random.default_rng(1234))
