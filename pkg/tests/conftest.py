import numpy as np
import pytest

from nfseg.field import FieldParams, tiny_config
from nfseg.synthetic import default_spec, make_synthetic_scene


@pytest.fixture(scope="session")
def tiny_scene():
    """A 24x24, 6-view scene: big enough to exercise everything, cheap to trace."""
    spec = default_spec(width=24, height=24, n_views=6, n_test=2, sigma_f=0.2)
    return make_synthetic_scene(spec, seed=11)


@pytest.fixture(scope="session")
def small_scene():
    """The acceptance-scale geometry at reduced resolution for mid-cost tests."""
    spec = default_spec(width=32, height=32, n_views=8, n_test=2, sigma_f=0.3)
    return make_synthetic_scene(spec, seed=5)


@pytest.fixture
def tiny_params():
    return FieldParams.init(tiny_config(), seed=3, dtype=np.float64)


def rand_unit_dirs(rng, n):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)
