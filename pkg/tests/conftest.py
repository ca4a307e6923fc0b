import numpy as np
import pytest

from distilkit.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def rand(rng, *shape, scale=1.0):
    return rng.normal(shape) * scale
