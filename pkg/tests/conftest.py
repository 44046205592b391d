import numpy as np
import pytest

from decaylab import lattice, weights


@pytest.fixture(scope="session")
def default_params():
    return weights.default_params(A0=1.0, tau=2.0)


@pytest.fixture(scope="session")
def radial_sample():
    """Small radial d=3 operator with the exponential V >= 0 sample."""
    grid = lattice.radial_grid(15.0, 400)
    op = lattice.assemble_radial_sector(
        0, 3, lambda r: np.exp(-2.0 * weights.bracket(r)), grid)
    return grid, op


@pytest.fixture(scope="session")
def square_well_radial():
    grid = lattice.radial_grid(10.0, 800)
    op = lattice.assemble_radial_sector(0, 3, lambda r: -4.0 * (r <= 1.0), grid)
    return grid, op


@pytest.fixture(scope="session")
def exterior_sample():
    """2D exterior disc with smooth gluing cutoff eta."""
    grid = lattice.cartesian_grid(2, 6.0, 31)
    mask = lattice.disc_obstacle(grid, 1.0)
    op = lattice.assemble_dirichlet_exterior(
        grid, mask, lambda p: np.exp(-weights.bracket(p)))
    pts = grid.points()
    rr = np.linalg.norm(pts, axis=1)
    t = np.clip((rr - 1.6) / 1.4, 0.0, 1.0)
    eta = 1.0 - t * t * (3 - 2 * t)
    return grid, op, eta


@pytest.fixture(scope="session")
def magnetic_1d_sample():
    grid = lattice.cartesian_grid(1, 10.0, 200)
    fs = weights.FieldSpec(
        V=lambda x: 0.5 * np.exp(-weights.bracket(x)),
        b=lambda m: 0.6 * np.exp(-weights.bracket(np.asarray(m, dtype=float))),
        tag="exponential", c_exp=1.0, C_bound=10.0)
    return grid, lattice.assemble_magnetic(grid, fs)
