import time

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from hartgeom.errors import (EmptyLevelSet, NotWatertight, OutOfDomain, ResolutionMismatch,
                             ResolutionNotSupported)
from hartgeom.geometry import OrientedPointCloud, SimilarityTransform, TriangleMesh
from hartgeom.poisson import (IndicatorGrid, PoissonReconstructor, apply_residual, dpsr_loss,
                              fallback_residual, grid_from_mesh, marching_cubes, rasterize_points,
                              solve_poisson_fft, spectral_solve, trilinear_sample)
from hartgeom.synthetic import fibonacci_sphere, uv_sphere_mesh
from oracles import dense_periodic_poisson


def _cloud(p, n=None):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    return OrientedPointCloud(p, np.tile([0, 0, 1.0], (len(p), 1)) if n is None else n)


# -- rasterisation ----------------------------------------------------------------

def test_point_on_node():
    v = rasterize_points(_cloud([4 / 16, 5 / 16, 6 / 16]), 16)
    nz = np.argwhere(np.any(v != 0, axis=-1))
    assert nz.tolist() == [[4, 5, 6]]
    assert np.array_equal(v[4, 5, 6], [0, 0, 1])


def test_point_at_cell_centre():
    v = rasterize_points(_cloud([4.5 / 16, 5.5 / 16, 6.5 / 16]), 16)
    nz = np.argwhere(np.any(v != 0, axis=-1))
    assert len(nz) == 8
    assert np.allclose(v[nz[:, 0], nz[:, 1], nz[:, 2]], [0, 0, 1 / 8], atol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 200))
def test_splat_partition_of_unity(seed, k):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=(k, 3))
    v = rasterize_points(OrientedPointCloud(rng.random((k, 3)) * 0.999, n), 16)
    assert np.allclose(v.reshape(-1, 3).sum(axis=0), n.sum(axis=0), atol=1e-10)


def test_out_of_domain():
    with pytest.raises(OutOfDomain):
        rasterize_points(_cloud([1.0, 0.5, 0.5]), 16)


def test_trilinear_reproduces_linear_field():
    r = 16
    g = np.arange(r) / r
    vals = np.broadcast_to(g[:, None, None] * 2 + g[None, :, None] - g[None, None, :], (r, r, r))
    p = np.random.default_rng(0).uniform(0, (r - 1) / r, (50, 3))
    assert np.allclose(trilinear_sample(vals, p), 2 * p[:, 0] + p[:, 1] - p[:, 2], atol=1e-12)


# -- spectral solve ---------------------------------------------------------------

def test_zero_field():
    chi = solve_poisson_fft(np.zeros((16, 16, 16, 3)), 2.0).values
    assert np.all(chi == 0)


def test_matches_dense_oracle():
    rng = np.random.default_rng(7)
    v = np.zeros((16, 16, 16, 3))
    idx = rng.integers(0, 16, (40, 3))
    v[idx[:, 0], idx[:, 1], idx[:, 2]] = rng.normal(size=(40, 3))
    fft_chi = spectral_solve(v, sigma=0.0)
    dense = dense_periodic_poisson(v)
    assert np.abs((fft_chi - fft_chi.mean()) - dense).max() < 1e-10


def test_resolution_must_be_power_of_two():
    with pytest.raises(ResolutionNotSupported):
        solve_poisson_fft(np.zeros((24, 24, 24, 3)))
    with pytest.raises(ResolutionNotSupported):
        solve_poisson_fft(np.zeros((8, 8, 8, 3)))


@pytest.fixture(scope="module")
def sphere_grid():
    pts, nrm = fibonacci_sphere(10_000)
    v = rasterize_points(OrientedPointCloud(pts, nrm), 128)
    return solve_poisson_fft(v, 2.0, pts), pts


def test_sphere_signs(sphere_grid):
    grid, pts = sphere_grid
    assert grid.sample(np.array([[0.5, 0.5, 0.5]]))[0] < 0
    corners = np.array([[0, 0, 0], [0.99, 0, 0], [0, 0.99, 0.99], [0.99, 0.99, 0.99]])
    assert np.all(grid.sample(corners) > 0)
    assert abs(grid.sample(pts).mean()) < 1e-12


# -- residuals ---------------------------------------------------------------------

def test_residual_algebra(rng):
    chi0 = IndicatorGrid(rng.normal(size=(16, 16, 16)))
    assert np.array_equal(apply_residual(chi0, np.zeros((16, 16, 16))).values, chi0.values)
    assert np.all(apply_residual(chi0, -chi0.values).values == 0)
    res = rng.normal(size=(16, 16, 16))
    out = apply_residual(chi0, IndicatorGrid(res)).values
    for i, j, k in rng.integers(0, 16, (20, 3)):
        assert out[i, j, k] == chi0.values[i, j, k] + res[i, j, k]
    with pytest.raises(ResolutionMismatch):
        apply_residual(chi0, np.zeros((32, 32, 32)))


def test_fallback_full_coverage_is_identity(rng):
    g = np.arange(16) / 16
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    chi0 = IndicatorGrid(rng.normal(size=(16, 16, 16)))
    res = fallback_residual(chi0, pts)
    assert np.all(apply_residual(chi0, res).values == chi0.values)


def test_fallback_zero_iterations(sphere_grid):
    grid, pts = sphere_grid
    assert np.all(fallback_residual(grid, pts, iterations=0).values == 0)


def test_fallback_untouched_near_points(sphere_grid):
    grid, pts = sphere_grid
    res = fallback_residual(grid, pts).values
    idx = np.rint(pts * 128).astype(int)
    assert np.all(res[idx[:, 0], idx[:, 1], idx[:, 2]] == 0)


# -- ground-truth grids -------------------------------------------------------------

def _cube(lo, hi):
    v = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)], dtype=np.float64)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(v, f)


def test_cube_grid_parity():
    g = grid_from_mesh(_cube(0.25, 0.75), 64)
    assert g.values[32, 32, 32] == -0.5
    assert g.values[0, 0, 0] == 0.5
    inside = g.values < 0
    assert inside.sum() == 32 ** 3 or abs(inside.sum() / 32 ** 3 - 1) < 0.1


def test_open_mesh_rejected():
    tri = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    with pytest.raises(NotWatertight):
        grid_from_mesh(tri, 16)


@pytest.mark.slow
def test_sphere_grid_volume():
    mesh = uv_sphere_mesh(0.3, n_lat=96, n_lon=192)
    g = grid_from_mesh(mesh, 128)
    frac = np.mean(g.values < 0)
    assert abs(frac / (4 / 3 * np.pi * 0.3 ** 3) - 1) < 0.02


def test_grid_from_mesh_transform():
    tf = SimilarityTransform(2.0, np.eye(3), [-1.0, -1.0, -1.0])
    g = grid_from_mesh(_cube(0.25, 0.75).transformed(tf), 32, transform=tf)
    assert g.values[16, 16, 16] == -0.5


def test_dpsr_loss(rng):
    a, b = rng.normal(size=(8, 8, 8)), rng.normal(size=(8, 8, 8))
    assert dpsr_loss(a, a) == 0
    assert np.isclose(dpsr_loss(a, a + 0.3), 0.09, rtol=1e-12)
    direct = sum((a[i, j, k] - b[i, j, k]) ** 2 for i in range(8) for j in range(8) for k in range(8)) / 512
    assert abs(dpsr_loss(a, b) / direct - 1) < 1e-12


# -- marching cubes ------------------------------------------------------------------

def _sdf_grid(r):
    g = np.arange(r) / r
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return IndicatorGrid(np.sqrt((x - 0.5) ** 2 + (y - 0.5) ** 2 + (z - 0.5) ** 2) - 0.3)


def test_mc_analytic_sphere():
    mesh = marching_cubes(_sdf_grid(64))
    radii = np.linalg.norm(mesh.vertices - 0.5, axis=1)
    assert np.all(np.abs(radii - 0.3) < 1.5 / 64)
    assert mesh.is_watertight() and mesh.euler_characteristic() == 2
    assert mesh.signed_volume() > 0


def test_mc_empty_level():
    with pytest.raises(EmptyLevelSet):
        marching_cubes(_sdf_grid(16), iso=10.0)


def test_mc_closes_open_domain():
    # a slab touching two faces of the domain still yields a closed surface
    vals = np.full((16, 16, 16), 1.0)
    vals[:, :, 4:9] = -1.0
    mesh = marching_cubes(IndicatorGrid(vals))
    assert mesh.is_watertight()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
@example(18262)
def test_mc_always_watertight(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(16, 16, 16))
    vals[0, 0, 0] = 0.0  # exact iso values are nudged
    mesh = marching_cubes(IndicatorGrid(vals))
    edges = np.sort(mesh.faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_mc_world_transform():
    tf = SimilarityTransform(2.0, np.eye(3), [1.0, 0, 0])
    grid = _sdf_grid(32)
    mesh = marching_cubes(IndicatorGrid(grid.values, tf))
    centre = mesh.vertices.mean(axis=0)
    assert np.allclose(centre, [2.0, 1.0, 1.0], atol=0.05)


# -- estimator ------------------------------------------------------------------------

def test_reconstructor_estimator():
    pts, nrm = fibonacci_sphere(3000, 1.5, (2.0, -1.0, 0.5))
    est = PoissonReconstructor(resolution=64, residual=None).fit(pts, nrm)
    assert est.predict(np.array([[2.0, -1.0, 0.5]]))[0] < 0
    # probe inside the normalised domain; values outside it wrap periodically
    assert est.predict(np.array([[3.4, 0.4, 1.9]]))[0] > 0
    mesh = est.extract_mesh()
    assert mesh.is_watertight()
    assert np.allclose(np.linalg.norm(mesh.vertices - [2.0, -1.0, 0.5], axis=1).mean(), 1.5, atol=0.05)
    assert clone(est).get_params()["resolution"] == 64
    with pytest.raises(ResolutionNotSupported):
        PoissonReconstructor(resolution=100).fit(pts, nrm)
