import numpy as np
import pytest

from fontus.phantom import PhantomSpec, generate_phantom

# registration-sized phantom geometry shared across test modules
REG_DIMS = (56, 56, 64)
REG_SPACING = (1.7, 1.7, 1.7)
REG_AXES = (24.0, 28.0)

_cache = {}


def cached_phantom(**kwargs):
    spec = PhantomSpec(**kwargs)
    key = (spec.seed, spec.dims, spec.spacing, spec.semi_axes_range,
           spec.ventricle_scale, spec.ventricle_dilation, spec.speckle,
           spec.shadow_strength, None if spec.rotation is None else spec.rotation.tobytes())
    if key not in _cache:
        _cache[key] = generate_phantom(spec)
    return _cache[key]


@pytest.fixture(scope="session")
def default_phantom():
    return cached_phantom(seed=3)


@pytest.fixture(scope="session")
def noiseless_phantom():
    return cached_phantom(seed=3, speckle=0.0, shadow_strength=0.0)


@pytest.fixture(scope="session")
def reg_phantom():
    return cached_phantom(seed=11, dims=REG_DIMS, spacing=REG_SPACING,
                          semi_axes_range=REG_AXES, ventricle_scale=1.6)
