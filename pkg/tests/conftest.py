import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from plumeflow.grid import GeometryField, GridDims, MacVelocityField, ScalarField


def random_geometry(rng, nx=8, ny=8, n_blocks=2, h=1.0):
    """Border-walled geometry with a few random interior solid cells."""
    dims = GridDims(nx, ny, h)
    solid = np.zeros((nx, ny), dtype=bool)
    for _ in range(n_blocks):
        i = int(rng.integers(1, nx - 1))
        j = int(rng.integers(1, ny - 1))
        solid[i, j] = True
    return GeometryField.build(dims, solid)


def random_velocity(rng, dims):
    nx, ny = dims.shape
    return MacVelocityField(
        dims,
        rng.standard_normal((nx + 1, ny)),
        rng.standard_normal((nx, ny + 1)),
    )


def random_scalar(rng, dims):
    return ScalarField(dims, rng.standard_normal(dims.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
