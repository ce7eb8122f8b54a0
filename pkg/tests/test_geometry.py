import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hartgeom.errors import DegenerateBounds, EmptyCloud, ZeroSumVector
from hartgeom.geometry import (CameraPose, OrientedPointCloud, PredictionSet, SimilarityTransform, TriangleMesh,
                               combine_normals, merge_oriented_points, normalize_to_unit_cube, normals_to_world,
                               sample_surface)
from hartgeom.rotations import (geodesic_distance, log_rotation, matrix_to_quaternion, quaternion_to_matrix,
                                rodrigues)
from hartgeom.synthetic import random_rotation, uv_sphere_mesh

unit_vectors = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1)


# -- normals ------------------------------------------------------------------

def test_zero_residual_is_normalized_base(rng):
    base = rng.normal(size=(4, 5, 3))
    out = combine_normals(base, np.zeros_like(base))
    assert np.allclose(out, base / np.linalg.norm(base, axis=-1, keepdims=True), atol=0, rtol=1e-15)


def test_cancelling_residual():
    with pytest.raises(ZeroSumVector):
        combine_normals(np.array([[1.0, 0, 0]]), np.array([[-1.0, 0, 0]]))


def test_hand_combination():
    out = combine_normals(np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))
    assert np.allclose(out, [1 / np.sqrt(2), 1 / np.sqrt(2), 0], atol=1e-15)


def test_masked_pixels_skip_check():
    base = np.array([[[1.0, 0, 0], [1.0, 0, 0]]])
    res = np.array([[[0.0, 1, 0], [-1.0, 0, 0]]])
    out = combine_normals(base, res, np.array([[True, False]]))
    assert np.allclose(np.linalg.norm(out[0, 0]), 1) and np.all(out[0, 1] == 0)


def _pose(r):
    return CameraPose(r, np.zeros(3), 1, 1, 0, 0)


def test_identity_rotation_to_world(rng):
    n = rng.normal(size=(3, 3, 3))
    assert np.array_equal(normals_to_world(n, _pose(np.eye(3))), n)


def test_quarter_turn_to_world():
    r = rodrigues(np.array([0, 0, np.pi / 2]))
    assert np.allclose(normals_to_world(np.array([1.0, 0, 0]), _pose(r)), [0, 1, 0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(unit_vectors, st.integers(0, 2 ** 31))
def test_rotation_is_isometry(v, seed):
    n = np.asarray(v) / np.linalg.norm(v)
    out = normals_to_world(n, _pose(random_rotation(np.random.default_rng(seed))))
    assert abs(np.linalg.norm(out) - 1) < 1e-6


# -- merge & normalise ----------------------------------------------------------

def _preds(n_views, h, w, rng, conf=None, masks=None):
    pts = [rng.random((h, w, 3)) for _ in range(n_views)]
    masks = masks or [np.ones((h, w), bool) for _ in range(n_views)]
    return PredictionSet(pts, masks, point_confidences=conf)


def test_merge_counts_all_pixels(rng):
    p = _preds(1, 2, 2, rng)
    cloud = merge_oriented_points(p, [np.tile([0, 0, 1.0], (2, 2, 1))], conf_threshold=0.0)
    assert len(cloud) == 4


def test_merge_empty_mask(rng):
    p = _preds(1, 2, 2, rng, masks=[np.zeros((2, 2), bool)])
    with pytest.raises(EmptyCloud):
        merge_oriented_points(p, [np.zeros((2, 2, 3))])


def test_merge_matches_pixel_scan(rng):
    conf = [rng.uniform(0.5, 1.5, (6, 7)) for _ in range(2)]
    masks = [rng.random((6, 7)) > 0.3 for _ in range(2)]
    p = _preds(2, 6, 7, rng, conf, masks)
    normals = [rng.normal(size=(6, 7, 3)) for _ in range(2)]
    cloud = merge_oriented_points(p, normals, conf_threshold=1.0)
    expected = []
    for v in range(2):
        for i in range(6):
            for j in range(7):
                if masks[v][i, j] and conf[v][i, j] >= 1.0:
                    expected.append(p.point_maps[v][i, j])
    assert len(cloud) == len(expected)
    assert np.array_equal(cloud.positions, np.array(expected))


def test_default_confidences_are_one(rng):
    cloud = OrientedPointCloud(rng.random((4, 3)), rng.random((4, 3)))
    assert np.array_equal(cloud.confidences, np.ones(4))


def test_unit_cube_cubic_bbox_recoverable(rng):
    pts = rng.uniform(0.05, 0.95, (50, 3))
    pts[0], pts[1] = 0.05, 0.95
    cloud = OrientedPointCloud(pts, np.tile([0, 0, 1.0], (50, 1)))
    unit, to_world = normalize_to_unit_cube(cloud, 0.05)
    assert np.allclose(unit.positions, pts, atol=1e-12)
    assert np.array_equal(to_world.rotation, np.eye(3))
    assert np.abs(to_world.apply(unit.positions) - pts).max() < 1e-9


def test_unit_cube_degenerate():
    cloud = OrientedPointCloud(np.ones((5, 3)), np.ones((5, 3)))
    with pytest.raises(DegenerateBounds):
        normalize_to_unit_cube(cloud)


def test_unit_cube_margin_zero(rng):
    pts = rng.normal(size=(100, 3)) * [3, 1, 2]
    unit, _ = normalize_to_unit_cube(OrientedPointCloud(pts, pts), 0.0)
    q = unit.positions
    assert q[:, 0].min() == 0.0 and q[:, 0].max() == 1.0
    assert q.min() >= 0.0 and q.max() <= 1.0


def test_unit_cube_short_axes_centred(rng):
    pts = rng.random((80, 3)) * [2, 1, 0.5]
    unit, _ = normalize_to_unit_cube(OrientedPointCloud(pts, pts), 0.1)
    q = unit.positions
    for a in (1, 2):
        assert abs((q[:, a].min() + q[:, a].max()) / 2 - 0.5) < 1e-12


# -- sampling ------------------------------------------------------------------

def test_samples_inside_triangle():
    tri = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    pts, nrm = sample_surface(tri, 1000, seed=3)
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0) and np.all(pts.sum(axis=1) <= 1 + 1e-12)
    assert np.all(pts[:, 2] == 0) and np.allclose(nrm, [0, 0, 1])


def test_sampling_proportional_to_area():
    v = np.array([[0.0, 0, 0], [3, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 2, 0]])
    mesh = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    pts, _ = sample_surface(mesh, 100_000, seed=0)
    ratio = np.sum(pts[:, 0] < 5) / np.sum(pts[:, 0] >= 5)
    assert abs(ratio / 3 - 1) < 0.02


def test_sampling_deterministic():
    mesh = uv_sphere_mesh()
    a, _ = sample_surface(mesh, 500, seed=9)
    b, _ = sample_surface(mesh, 500, seed=9)
    assert np.array_equal(a, b)


# -- mesh & transform helpers ----------------------------------------------------

def test_sphere_mesh_topology():
    m = uv_sphere_mesh()
    assert m.is_watertight() and m.euler_characteristic() == 2 and m.signed_volume() > 0


def test_similarity_inverse_and_compose(rng):
    a = SimilarityTransform(1.7, random_rotation(rng), rng.normal(size=3))
    b = SimilarityTransform(0.4, random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(10, 3))
    assert np.allclose(a.inverse().apply(a.apply(x)), x, atol=1e-12)
    assert np.allclose(a.compose(b).apply(x), a.apply(b.apply(x)), atol=1e-12)
    hom = np.c_[x, np.ones(10)] @ a.matrix.T
    assert np.allclose(hom[:, :3], a.apply(x), atol=1e-12)


# -- rotations -------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_rodrigues_log_roundtrip(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
    r = rodrigues(w)
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12) and np.isclose(np.linalg.det(r), 1)
    assert np.allclose(log_rotation(r), w, atol=1e-9)


def test_rodrigues_small_angle():
    w = np.array([1e-12, -2e-12, 0.0])
    r = rodrigues(w)
    assert np.allclose(r, np.eye(3) + np.array([[0, 0, -2e-12], [0, 0, -1e-12], [2e-12, 1e-12, 0]]), atol=1e-20)


def test_geodesic_distance():
    assert np.isclose(geodesic_distance(np.eye(3), rodrigues(np.array([0, 0.25, 0]))), 0.25)


def test_quaternion_identity_and_sign(rng):
    assert np.allclose(matrix_to_quaternion(np.eye(3)), [1, 0, 0, 0])
    rs = np.stack([random_rotation(rng) for _ in range(50)])
    q = matrix_to_quaternion(rs)
    assert np.all(q[:, 0] >= 0)
    assert np.abs(quaternion_to_matrix(q) - rs).max() < 1e-12
