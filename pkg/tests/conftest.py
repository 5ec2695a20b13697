import numpy as np
import pytest

from heatgen.procedural import make_grid, make_icosphere, make_tetrahedron


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere(2)  # 162 vertices


@pytest.fixture(scope="session")
def small_sphere():
    return make_icosphere(1)  # 42 vertices


@pytest.fixture(scope="session")
def tetra():
    return make_tetrahedron()


@pytest.fixture(scope="session")
def bumpy_grid_50():
    # 50-vertex irregular open surface; no symmetry, so eigengaps are healthy
    return make_grid(5, 10, height_fn=lambda x, y: 0.2 * np.sin(3 * x) * np.cos(2 * y))


@pytest.fixture(scope="session")
def flat_grid_12():
    return make_grid(12, 12)
