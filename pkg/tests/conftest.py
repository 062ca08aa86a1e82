import numpy as np
import pytest

from mpm.excitation import fourier_family
from mpm.geometry import CellRegion, build_mesh
from mpm.materials import background_assignment


def x_profile(mesh):
    """Boundary trace of x - W/2, which is weighted mean zero on the rectangle."""
    return mesh.boundary_coordinates()[:, 0] - 0.5 * mesh.extent[0]


@pytest.fixture
def unit_mesh():
    return build_mesh(4, 4)


@pytest.fixture
def phantom_mesh():
    return build_mesh(8, 8)


@pytest.fixture
def blob(phantom_mesh):
    return CellRegion.block(8, 8, 3, 3, 2, 2)


@pytest.fixture
def small_family(phantom_mesh):
    return fourier_family(phantom_mesh, 2)


@pytest.fixture
def background(phantom_mesh):
    return background_assignment(1.0, phantom_mesh.nx, phantom_mesh.ny)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
