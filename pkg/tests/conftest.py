import numpy as np
import pytest

from trflow import geometry, immersion


@pytest.fixture(scope="session")
def flat_unit_cache():
    state = immersion.flat_lagrangian_torus(resolution=(64, 64))
    return geometry.build_cache(state, full=True)


@pytest.fixture(scope="session")
def graph_cache_64():
    state = immersion.flat_lagrangian_torus(resolution=(64, 64), epsilon=0.05)
    return geometry.build_cache(state, full=True)


@pytest.fixture(scope="session")
def circles_cache():
    state = immersion.product_circles(1.0, 1.0, resolution=(32, 32))
    return geometry.build_cache(state, full=True)


@pytest.fixture(scope="session")
def clifford_cache_32():
    state = immersion.clifford_cp2(resolution=(32, 32))
    return geometry.build_cache(state, full=True)


def random_trig_scalar(grid, seed, modes=4, max_wavenumber=3):
    """Smooth random field: a handful of low Fourier modes."""
    rng = np.random.default_rng(seed)
    x = grid.node_coordinates()
    out = np.zeros(grid.resolution)
    for _ in range(modes):
        k = rng.integers(-max_wavenumber, max_wavenumber + 1, grid.intrinsic_dim)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal()
        arg = sum(2 * np.pi * k[a] * x[..., a] / grid.periods[a]
                  for a in range(grid.intrinsic_dim))
        out += amp * np.cos(arg + phase)
    return out
