import numpy as np
import pytest
from hypothesis import given, strategies as st

from seqreg.regularizer import curvature_evaluate, curvature_gradient_check, curvature_terms, laplacian
from seqreg.transform import DisplacementGrid
from seqreg.volume import Geometry

GRID = Geometry((6, 5, 7), (1.5, 2.0, 1.0))


def random_field(seed, geom=GRID, scale=1.0):
    return scale * np.random.default_rng(seed).normal(size=geom.dims + (3,))


def test_zero_grid():
    ev = curvature_evaluate(DisplacementGrid.zeros(GRID))
    assert ev.energy == 0.0 and np.all(ev.gradient == 0)


def test_affine_has_zero_interior_laplacian():
    g = Geometry((7, 7, 7), (1.0, 2.0, 0.5))
    x = g.voxel_centers()
    A = np.array([[0.1, -0.2, 0.3], [0.0, 0.4, 0.1], [0.2, 0.1, -0.3]])
    u = x @ A.T + np.array([1.0, -2.0, 0.5])
    lu = laplacian(u, g.spacing)
    assert np.abs(lu[1:-1, 1:-1, 1:-1]).max() < 1e-12
    # constants are free everywhere, including the border rows
    ev = curvature_terms(np.broadcast_to([3.0, -1.0, 2.0], g.dims + (3,)).copy(), g.spacing)
    assert ev[0] == 0.0


def test_quadratic_hand_values():
    g = Geometry((5, 5, 5), (1, 1, 1))
    u = np.zeros(g.dims + (3,))
    u[..., 0] = g.voxel_centers()[..., 0] ** 2
    lu = laplacian(u, g.spacing)
    assert np.all(lu[1:-1, :, :, 0] == 2.0)
    interior_energy = 0.5 * float((lu[1:-1, 1:-1, 1:-1, 0] ** 2).sum()) * g.voxel_volume
    assert interior_energy == 0.5 * 4 * 27
    # replicate border: second differences along x per node are 1, 2, 2, 2, -7
    assert lu[:, 2, 2, 0].tolist() == [1.0, 2.0, 2.0, 2.0, -7.0]
    energy, _ = curvature_terms(u, g.spacing)
    assert energy == 0.5 * 25 * (1 + 4 + 4 + 4 + 49)


def test_gradient_check_31_cube():
    g = Geometry((31, 31, 31), (1.2, 1.0, 0.8))
    grid = DisplacementGrid(g, random_field(0, g, 1e-2))
    assert curvature_gradient_check(grid, samples=300) < 1e-6


def test_gradient_check_full_small_grid():
    assert curvature_gradient_check(DisplacementGrid(GRID, random_field(1))) < 1e-6
    zero = curvature_evaluate(DisplacementGrid.zeros(GRID))
    assert not zero.gradient.any()


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_quadratic_form_properties(seed, c):
    u = random_field(seed)
    v = random_field(seed + 1)
    e_u, g_u = curvature_terms(u, GRID.spacing)
    e_cu, g_cu = curvature_terms(c * u, GRID.spacing)
    _, g_v = curvature_terms(v, GRID.spacing)
    _, g_uv = curvature_terms(u + v, GRID.spacing)
    _, g_neg = curvature_terms(-u, GRID.spacing)
    assert e_u >= 0
    assert e_cu == pytest.approx(c * c * e_u, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(g_uv, g_u + g_v, atol=1e-10)
    assert np.array_equal(g_neg, -g_u)
    assert abs(e_u - 0.5 * np.vdot(u, g_u)) <= 1e-10 * max(1.0, e_u)


@given(st.integers(0, 10_000))
def test_operator_is_symmetric(seed):
    u, v = random_field(seed), random_field(seed + 7)
    lu, lv = laplacian(u, GRID.spacing), laplacian(v, GRID.spacing)
    assert np.vdot(lu, v) == pytest.approx(np.vdot(u, lv), rel=1e-12)
