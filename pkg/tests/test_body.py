import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from hartgeom.body import (BodyFitter, BodyModel, BodyParams, FitConfig, aggregate_confidence, aggregate_markers,
                           argmax_labels, body_model_from_bytes, body_model_to_bytes, fit_body, inner_points,
                           lbs_forward, model_markers, read_body_model, write_body_model)
from hartgeom.errors import AllMarkersEmpty, BadMagic, TooFewMarkers
from hartgeom.metrics import pa_v2v
from hartgeom.rotations import rodrigues
from hartgeom.synthetic import random_body_params
from oracles import loop_weighted_markers


# -- per-pixel maps ----------------------------------------------------------------

def test_confidence_one_hot(rng):
    probs = np.zeros((2, 2, 86))
    probs[..., 7] = 1
    confs = rng.random((2, 2, 86))
    assert np.array_equal(aggregate_confidence(probs, confs), confs[..., 7])


def test_confidence_uniform():
    c = aggregate_confidence(np.full((3, 3, 86), 1 / 86), np.full((3, 3, 86), 0.5))
    assert np.allclose(c, 0.5, atol=1e-15)


def test_confidence_loop_oracle(rng):
    p = rng.dirichlet(np.ones(86), size=(4, 5))
    c = rng.random((4, 5, 86))
    out = aggregate_confidence(p, c)
    for i in range(4):
        for j in range(5):
            assert abs(out[i, j] - sum(p[i, j, k] * c[i, j, k] for k in range(86))) < 1e-7


def test_argmax_rules(rng):
    p = np.zeros((1, 1, 86))
    p[..., 7] = 1
    assert argmax_labels(p)[0, 0] == 7
    p = np.zeros(86)
    p[2] = p[5] = 0.5
    assert argmax_labels(p) == 2
    logits = rng.normal(size=(6, 6, 86))
    soft = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert np.array_equal(argmax_labels(soft), np.argmax(logits, -1))


def test_inner_points(rng):
    p = rng.normal(size=(3, 3, 3))
    d = rng.normal(size=(3, 3, 3))
    assert np.array_equal(inner_points(p, d, np.zeros((3, 3))), p)
    assert np.allclose(inner_points(np.zeros(3), np.array([0, 1.0, 0]), 0.05), [0, 0.05, 0])
    b = rng.random((3, 3))
    out = inner_points(p, d, b)
    for i in range(3):
        for j in range(3):
            assert np.allclose(out[i, j], p[i, j] + b[i, j] * d[i, j], atol=1e-15)


# -- marker aggregation ---------------------------------------------------------------

def _one(y, lab, c, k=4, alpha=2.0):
    y = np.asarray(y, float)[None]
    return aggregate_markers(y, np.asarray(lab)[None], np.asarray(c, float)[None],
                             np.ones_like(np.asarray(lab), bool)[None], alpha, k)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 2.0, 3.7])
@pytest.mark.parametrize("c", [1e-3, 0.5, 1.0])
def test_singleton_exact(alpha, c):
    y = [[0.1234567, -9.87654321, 3.3]]
    ms = _one(y, [2], [c], alpha=alpha)
    assert np.array_equal(ms.positions[2], y[0])
    assert ms.valid.tolist() == [False, False, True, False]


def test_two_pixel_hand_value():
    ms = _one([[0, 0, 0], [4, 0, 0]], [1, 1], [1, 3], alpha=1.0)
    assert np.allclose(ms.positions[1], [3, 0, 0], atol=1e-15)
    assert ms.support_weight[1] == 4


def test_alpha_zero_unweighted(rng):
    y = rng.normal(size=(6, 3))
    a = _one(y, [0] * 6, rng.random(6), alpha=0.0)
    b = _one(y, [0] * 6, rng.random(6), alpha=0.0)
    assert np.abs(a.positions[0] - y.mean(axis=0)).max() < 1e-15
    assert np.array_equal(a.positions[0], b.positions[0])


def test_zero_weights_fall_back_to_mean():
    ms = _one([[0, 0, 0], [2, 0, 0]], [0, 0], [0, 0])
    assert np.allclose(ms.positions[0], [1, 0, 0]) and ms.support_weight[0] == 0


def test_aggregation_loop_oracle(rng):
    views = 3
    inner = [rng.normal(size=(7, 6, 3)) for _ in range(views)]
    labels = [rng.integers(0, 10, (7, 6)) for _ in range(views)]
    conf = [rng.random((7, 6)) for _ in range(views)]
    masks = [rng.random((7, 6)) > 0.2 for _ in range(views)]
    ms = aggregate_markers(inner, labels, conf, masks, 2.0, 12)
    ref = loop_weighted_markers(inner, labels, conf, masks, 2.0, 12)
    assert np.array_equal(np.isnan(ms.positions), np.isnan(ref))
    ok = ~np.isnan(ref)
    assert np.abs(ms.positions[ok] - ref[ok]).max() < 1e-9
    assert ms.valid.tolist() == (~np.isnan(ref[:, 0])).tolist()


def test_all_markers_empty():
    with pytest.raises(AllMarkersEmpty):
        aggregate_markers(np.zeros((2, 2, 3)), np.zeros((2, 2), int), np.ones((2, 2)), np.zeros((2, 2), bool))


# -- forward model -------------------------------------------------------------------

def test_rest_pose_is_template(toy_model):
    v, _ = lbs_forward(toy_model, BodyParams.rest(toy_model))
    assert np.abs(v - toy_model.template_vertices).max() < 1e-12


def test_scale_doubles_distances(toy_model, rng):
    p = random_body_params(toy_model, rng)
    v1, _ = lbs_forward(toy_model, p)
    v2, _ = lbs_forward(toy_model, BodyParams(p.pose, p.shape, p.translation, 2 * p.scale))
    i, j = rng.integers(0, toy_model.n_vertices, (2, 50))
    d1 = np.linalg.norm(v1[i] - v1[j], axis=1)
    d2 = np.linalg.norm(v2[i] - v2[j], axis=1)
    assert np.allclose(d2, 2 * d1, rtol=1e-12, atol=1e-12)


def test_root_rotation_is_rigid(toy_model):
    pose = np.zeros((toy_model.n_joints, 3))
    pose[0] = [0, 0, np.pi / 2]
    v, _ = lbs_forward(toy_model, BodyParams(pose, np.zeros(toy_model.n_shape)))
    j0 = toy_model.joint_regressor[0] @ toy_model.template_vertices
    expected = (toy_model.template_vertices - j0) @ rodrigues(pose[0]).T + j0
    assert np.abs(v - expected).max() < 1e-12


def test_markers_rest_and_translation(toy_model, rng):
    rest = model_markers(toy_model, BodyParams.rest(toy_model)).positions
    assert np.array_equal(rest, toy_model.template_vertices[toy_model.marker_vertex_ids])
    t = np.array([0.3, -1.0, 2.0])
    moved = model_markers(toy_model, BodyParams(np.zeros((8, 3)), np.zeros(4), t)).positions
    assert np.allclose(moved, rest + t, atol=1e-12)


def test_markers_gather_oracle(toy_model, rng):
    p = random_body_params(toy_model, rng)
    v, _ = lbs_forward(toy_model, p)
    assert np.abs(model_markers(toy_model, p).positions - v[toy_model.marker_vertex_ids]).max() < 1e-12


def test_model_invariants(toy_model):
    assert toy_model.n_joints == 8 and toy_model.n_markers == 86
    assert np.allclose(toy_model.skinning_weights.sum(axis=1), 1, atol=1e-6)
    with pytest.raises(ValueError):
        BodyModel(toy_model.template_vertices, toy_model.shape_blendshapes, toy_model.joint_regressor,
                  np.array([-1, 0, 1, 1, 1, 0, -1, 3]), toy_model.skinning_weights, toy_model.marker_vertex_ids)


# -- fitting --------------------------------------------------------------------------

def test_rest_markers_fit_to_rest(toy_model):
    fit = fit_body(model_markers(toy_model, BodyParams.rest(toy_model)), toy_model, FitConfig(lambda_reg=0.0))
    assert np.linalg.norm(fit.params.pose) < 1e-4 and np.linalg.norm(fit.params.shape) < 1e-4


def test_too_few_markers(toy_model):
    ms = model_markers(toy_model, BodyParams.rest(toy_model))
    ms.valid[:] = False
    ms.valid[:5] = True
    with pytest.raises(TooFewMarkers):
        fit_body(ms, toy_model)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_fit_roundtrip_property(toy_model, seed):
    rng = np.random.default_rng(seed)
    gt = random_body_params(toy_model, rng)
    res = fit_body(model_markers(toy_model, gt), toy_model, FitConfig(lambda_reg=0.0))
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    v_fit, _ = lbs_forward(toy_model, res.params)
    v_gt, _ = lbs_forward(toy_model, gt)
    assert pa_v2v(v_fit, v_gt) / 1000 < 1e-4


def test_partial_markers_fit(toy_model, rng):
    gt = random_body_params(toy_model, rng)
    ms = model_markers(toy_model, gt)
    ms.valid[rng.choice(86, 30, replace=False)] = False
    res = fit_body(ms, toy_model, FitConfig(lambda_reg=0.0))
    ok = ms.valid
    fitted = model_markers(toy_model, res.params).positions
    assert np.abs(fitted[ok] - ms.positions[ok]).max() < 1e-4


def test_fitter_estimator(toy_model, rng):
    gt = random_body_params(toy_model, rng)
    markers = model_markers(toy_model, gt).positions.copy()
    markers[3] = np.nan
    est = BodyFitter(toy_model, lambda_reg=0.0).fit(markers)
    v_gt, j_gt = lbs_forward(toy_model, gt)
    assert np.abs(est.predict() - v_gt).max() < 1e-4
    assert est.joints().shape == (8, 3)
    assert clone(est).get_params()["lambda_reg"] == 0.0


# -- container --------------------------------------------------------------------------

def test_hbm_roundtrip(toy_model, tmp_path):
    write_body_model(tmp_path / "m.hbm", toy_model)
    back = read_body_model(tmp_path / "m.hbm")
    assert np.array_equal(back.template_vertices, toy_model.template_vertices.astype(np.float32))
    assert np.array_equal(back.parents, toy_model.parents)
    assert np.array_equal(back.marker_vertex_ids, toy_model.marker_vertex_ids)
    assert np.array_equal(back.faces, toy_model.faces)
    assert body_model_to_bytes(back) == (tmp_path / "m.hbm").read_bytes()


def test_hbm_bad_magic(toy_model):
    buf = body_model_to_bytes(toy_model)
    assert buf[:8] == b"HBM1\0\0\0\0"
    with pytest.raises(BadMagic):
        body_model_from_bytes(b"XBM1" + buf[4:])
