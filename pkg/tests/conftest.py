import numpy as np
import pytest
from hypothesis import settings

from scenegraph.geometry import Box

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_box(rng, canvas=100.0, min_size=1.0):
    w, h = rng.uniform(min_size, canvas / 2, size=2)
    x1, y1 = rng.uniform(0, canvas - w), rng.uniform(0, canvas - h)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
