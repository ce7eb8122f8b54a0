"""Marker aggregation from tightness/label maps and parametric body fitting.

The body model is a generic linear-blend-skinned mesh: shape blendshapes,
a joint regressor, a kinematic tree with axis-angle joint rotations, and a
fixed list of marker vertices. Any model with that structure can be loaded
from an HBM1 container.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .camera import umeyama
from .errors import AllMarkersEmpty, BadMagic, TooFewMarkers, TruncatedFile
from .geometry import N_MARKERS
from .io import tensor_from_bytes, tensor_to_bytes
from .lm import levenberg_marquardt
from .rotations import log_rotation, rodrigues

HBM_MAGIC = b"HBM1\0\0\0\0"
MIN_VALID_MARKERS = 12


@dataclass
class BodyModel:
    template_vertices: np.ndarray  # V×3
    shape_blendshapes: np.ndarray  # V×3×B
    joint_regressor: np.ndarray  # J×V
    parents: np.ndarray  # J, parents[0] == -1
    skinning_weights: np.ndarray  # V×J
    marker_vertex_ids: np.ndarray  # M
    joint_names: Optional[list] = None
    faces: Optional[np.ndarray] = None

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.shape_blendshapes = np.asarray(self.shape_blendshapes, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.skinning_weights = np.asarray(self.skinning_weights, dtype=np.float64)
        self.marker_vertex_ids = np.asarray(self.marker_vertex_ids, dtype=np.int64)
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        V, J = self.n_vertices, self.n_joints
        if self.shape_blendshapes.ndim == 2:
            self.shape_blendshapes = self.shape_blendshapes[:, :, None]
        if self.shape_blendshapes.shape[:2] != (V, 3):
            raise ValueError(f"blendshapes must be V×3×B, got {self.shape_blendshapes.shape}")
        if self.joint_regressor.shape != (J, V) or self.skinning_weights.shape != (V, J):
            raise ValueError("joint regressor must be J×V and skinning weights V×J")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, J)):
            raise ValueError("parents must list a single root first and every parent before its child")
        if np.abs(self.skinning_weights.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")
        if np.any(self.marker_vertex_ids < 0) or np.any(self.marker_vertex_ids >= V):
            raise ValueError("marker vertex id out of range")
        # joints depend linearly on the shape coefficients
        self._joint_template = self.joint_regressor @ self.template_vertices
        self._joint_dirs = np.einsum("jv,vcb->jcb", self.joint_regressor, self.shape_blendshapes)

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_blendshapes.shape[2]

    @property
    def n_markers(self) -> int:
        return len(self.marker_vertex_ids)


@dataclass
class BodyParams:
    pose: np.ndarray  # J×3 axis-angle
    shape: np.ndarray  # B
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1, 3)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def rest(cls, model: BodyModel) -> "BodyParams":
        return cls(np.zeros((model.n_joints, 3)), np.zeros(model.n_shape))

    def to_dict(self) -> dict:
        return {"pose": self.pose.tolist(), "shape": self.shape.tolist(),
                "translation": self.translation.tolist(), "scale": self.scale}


@dataclass
class MarkerSet:
    positions: np.ndarray  # M×3, NaN where invalid
    valid: np.ndarray
    support_weight: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


# -- per-pixel label/tightness maps -----------------------------------------

def aggregate_confidence(label_probs: np.ndarray, label_confs: np.ndarray) -> np.ndarray:
    """Per-pixel expected confidence ``sum_k p_k c_k``."""
    return np.einsum("...k,...k->...", np.asarray(label_probs, dtype=np.float64),
                     np.asarray(label_confs, dtype=np.float64))


def argmax_labels(label_probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(np.asarray(label_probs), axis=-1)


def inner_points(point_map, tightness_dir, tightness_mag) -> np.ndarray:
    """Body-surface points: clothed points moved along their tightness vectors."""
    mag = np.asarray(tightness_mag, dtype=np.float64)
    if mag.ndim == np.ndim(point_map):
        mag = mag[..., 0]
    return np.asarray(point_map, dtype=np.float64) + mag[..., None] * np.asarray(tightness_dir, dtype=np.float64)


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def aggregate_markers(inner, labels, confidence, masks, alpha: float = 2.0,
                      n_markers: int = N_MARKERS) -> MarkerSet:
    """Confidence-weighted mean of inner points per label, pooled over views.

    Each argument is a single map or a list with one map per view. A
    pixel's weight is ``confidence ** alpha``; a marker whose supporting
    pixels all have zero weight falls back to their plain mean.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ys, ls, ws = [], [], []
    for y, lab, c, m in zip(_as_list(inner), _as_list(labels), _as_list(confidence), _as_list(masks)):
        m = np.asarray(m, dtype=bool)
        ys.append(np.asarray(y, dtype=np.float64)[m])
        ls.append(np.asarray(lab)[m].astype(np.int64))
        ws.append(np.asarray(c, dtype=np.float64)[m] ** alpha)
    y = np.concatenate(ys).reshape(-1, 3)
    lab = np.concatenate(ls)
    w = np.concatenate(ws)
    in_range = (lab >= 0) & (lab < n_markers)
    y, lab, w = y[in_range], lab[in_range], w[in_range]

    count = np.bincount(lab, minlength=n_markers)
    total = np.bincount(lab, weights=w, minlength=n_markers)
    zero_w = (count > 0) & (total <= 0)
    w = np.where(zero_w[lab], 1.0, w)
    total = np.bincount(lab, weights=w, minlength=n_markers)
    valid = count > 0
    coef = w / np.where(total[lab] > 0, total[lab], 1.0)
    pos = np.full((n_markers, 3), np.nan)
    for c in range(3):
        pos[valid, c] = np.bincount(lab, weights=coef * y[:, c], minlength=n_markers)[valid]
    if not valid.any():
        raise AllMarkersEmpty("no pixel supports any marker")
    support = np.where(zero_w, 0.0, total)
    return MarkerSet(pos, valid, support)


# -- forward model ----------------------------------------------------------

def _lbs(model: BodyModel, pose, shape, translation, scale, vertex_ids=None):
    """Batched forward kinematics; returns vertices (n, V', 3) and joints (n, J, 3)."""
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, model.n_joints, 3)
    n = len(pose)
    shape = np.asarray(shape, dtype=np.float64).reshape(n, -1)
    translation = np.asarray(translation, dtype=np.float64).reshape(n, 3)
    scale = np.asarray(scale, dtype=np.float64).reshape(n)
    ids = slice(None) if vertex_ids is None else vertex_ids
    T = model.template_vertices[ids]
    S = model.shape_blendshapes[ids]
    W = model.skinning_weights[ids]
    v_shaped = T[None] + np.einsum("vcb,nb->nvc", S, shape)
    joints = model._joint_template[None] + np.einsum("jcb,nb->njc", model._joint_dirs, shape)

    R = rodrigues(pose)
    G = np.zeros((n, model.n_joints, 4, 4))
    G[:, :, 3, 3] = 1.0
    G[:, 0, :3, :3] = R[:, 0]
    G[:, 0, :3, 3] = joints[:, 0]
    for j in range(1, model.n_joints):
        p = model.parents[j]
        local = np.zeros((n, 4, 4))
        local[:, :3, :3] = R[:, j]
        local[:, :3, 3] = joints[:, j] - joints[:, p]
        local[:, 3, 3] = 1.0
        G[:, j] = G[:, p] @ local
    posed_joints = G[:, :, :3, 3]
    rot = G[:, :, :3, :3]
    offset = posed_joints - np.einsum("njab,njb->nja", rot, joints)
    blend_rot = np.einsum("vj,njab->nvab", W, rot)
    blend_off = np.einsum("vj,nja->nva", W, offset)
    verts = np.einsum("nvab,nvb->nva", blend_rot, v_shaped) + blend_off
    verts = scale[:, None, None] * verts + translation[:, None, :]
    posed_joints = scale[:, None, None] * posed_joints + translation[:, None, :]
    return verts, posed_joints


def lbs_forward(model: BodyModel, params: BodyParams):
    """Posed ``(vertices V×3, joints J×3)``."""
    v, j = _lbs(model, params.pose, params.shape, params.translation, params.scale)
    return v[0], j[0]


def model_markers(model: BodyModel, params: BodyParams) -> MarkerSet:
    v, _ = _lbs(model, params.pose, params.shape, params.translation, params.scale, model.marker_vertex_ids)
    m = model.n_markers
    return MarkerSet(v[0], np.ones(m, dtype=bool), np.ones(m))


# -- fitting ----------------------------------------------------------------

@dataclass
class FitConfig:
    lambda_reg: float = 1e-2
    max_iters: int = 100
    rtol: float = 1e-9
    fd_step: float = 1e-5
    lam0: float = 1e-3
    stage1_shape: int = 2


@dataclass
class FitResult:
    params: BodyParams
    final_cost: float
    trace: list
    stage_costs: list
    n_iters: list


def _initial_params(model: BodyModel, targets: np.ndarray, valid: np.ndarray) -> BodyParams:
    rest = model.template_vertices[model.marker_vertex_ids][valid]
    spread_t = np.sqrt(np.mean(np.sum((targets - targets.mean(axis=0)) ** 2, axis=1)))
    spread_r = np.sqrt(np.mean(np.sum((rest - rest.mean(axis=0)) ** 2, axis=1)))
    s = spread_t / spread_r
    pose = np.zeros((model.n_joints, 3))
    # global orientation from a rigid fit; the rotation acts about the root joint
    tf = umeyama(rest, targets, with_scale=False)
    pose[0] = log_rotation(tf.rotation)
    j0 = model._joint_template[0]
    t = targets.mean(axis=0) - s * (tf.rotation @ (rest.mean(axis=0) - j0) + j0)
    return BodyParams(pose, np.zeros(model.n_shape), t, s)


def fit_body(markers: MarkerSet, model: BodyModel, config: Optional[FitConfig] = None) -> FitResult:
    """Two-stage Levenberg-Marquardt fit of (scale, translation, pose, shape) to markers.

    Stage 1 solves for scale, translation, pose and the first
    ``config.stage1_shape`` shape coefficients with the rest held at 0;
    stage 2 frees every shape coefficient. The objective is the squared
    marker distance plus ``lambda_reg`` times the squared norms of the
    non-root joint rotations and the shape coefficients.
    """
    config = config or FitConfig()
    if len(markers.valid) != model.n_markers:
        raise ValueError(f"marker set has {len(markers.valid)} entries, model defines {model.n_markers}")
    valid = np.asarray(markers.valid, dtype=bool)
    if valid.sum() < MIN_VALID_MARKERS:
        raise TooFewMarkers(f"{int(valid.sum())} valid markers, need {MIN_VALID_MARKERS}")
    targets = np.asarray(markers.positions, dtype=np.float64)[valid]
    ids = model.marker_vertex_ids[valid]
    J, B = model.n_joints, model.n_shape
    sqrt_reg = np.sqrt(config.lambda_reg)

    init = _initial_params(model, targets, valid)
    full = np.concatenate([[init.scale], init.translation, init.pose.ravel(), init.shape])
    n_pose = 3 * J

    def unpack(x, n_active_shape):
        x = np.atleast_2d(x)
        shape = np.zeros((len(x), B))
        shape[:, :n_active_shape] = x[:, 4 + n_pose:4 + n_pose + n_active_shape]
        return x[:, 0], x[:, 1:4], x[:, 4:4 + n_pose], shape

    trace, stage_costs, iters = [], [], []
    for n_active in (min(config.stage1_shape, B), B):
        def residuals(x, n_active=n_active):
            single = x.ndim == 1
            s, t, pose, shape = unpack(x, n_active)
            v, _ = _lbs(model, pose, shape, t, s, ids)
            r = (v - targets[None]).reshape(len(s), -1)
            if config.lambda_reg > 0:
                r = np.hstack([r, sqrt_reg * pose[:, 3:], sqrt_reg * shape[:, :n_active]])
            return r[0] if single else r

        x0 = full[:4 + n_pose + n_active]
        res = levenberg_marquardt(residuals, x0, lam0=config.lam0, max_iters=config.max_iters,
                                  rtol=config.rtol, fd_step=config.fd_step, batched=True,
                                  is_valid=lambda x: x[0] > 0)
        full[:4 + n_pose + n_active] = res.x
        trace.extend(res.trace if not trace else res.trace[1:])
        stage_costs.append(res.cost)
        iters.append(res.n_iters)

    params = BodyParams(full[4:4 + n_pose].reshape(J, 3), full[4 + n_pose:], full[1:4], full[0])
    return FitResult(params, stage_costs[-1], trace, stage_costs, iters)


class BodyFitter(BaseEstimator):
    """Marker-based body fit with the sklearn estimator interface.

    ``fit(X, valid=None)`` takes the target markers ``X`` (M×3, NaN rows
    allowed when ``valid`` is omitted). After fitting, ``predict()``
    returns posed vertices and ``params_`` holds the solution.

    Parameters
    ----------
    model : BodyModel
    lambda_reg : float, default=1e-2
    max_iters : int, default=100
        Iteration cap per stage.
    rtol : float, default=1e-9
    """

    def __init__(self, model=None, lambda_reg=1e-2, max_iters=100, rtol=1e-9):
        self.model = model
        self.lambda_reg = lambda_reg
        self.max_iters = max_iters
        self.rtol = rtol

    def fit(self, X, valid=None):
        if isinstance(X, MarkerSet):
            markers = X
        else:
            X = np.asarray(X, dtype=np.float64)
            if valid is None:
                valid = np.all(np.isfinite(X), axis=1)
            markers = MarkerSet(X, np.asarray(valid, dtype=bool), np.ones(len(X)))
        cfg = FitConfig(lambda_reg=self.lambda_reg, max_iters=self.max_iters, rtol=self.rtol)
        res = fit_body(markers, self.model, cfg)
        self.params_ = res.params
        self.cost_ = res.final_cost
        self.cost_trace_ = res.trace
        self.n_iter_ = sum(res.n_iters)
        return self

    def predict(self, X=None):
        """Posed vertices of the fitted body (``X`` is ignored)."""
        check_is_fitted(self, "params_")
        return lbs_forward(self.model, self.params_)[0]

    def joints(self):
        check_is_fitted(self, "params_")
        return lbs_forward(self.model, self.params_)[1]


# -- HBM1 container ---------------------------------------------------------

_HBM_TENSORS = ("template_vertices", "shape_blendshapes", "joint_regressor", "skinning_weights")


def body_model_to_bytes(model: BodyModel) -> bytes:
    payload = b""
    offsets = {}
    tensors = {name: np.asarray(getattr(model, name), dtype=np.float32) for name in _HBM_TENSORS}
    if model.faces is not None:
        tensors["faces"] = model.faces.astype(np.uint32)
    for name, arr in tensors.items():
        blob = tensor_to_bytes(arr)
        offsets[name] = {"offset": len(payload), "nbytes": len(blob)}
        payload += blob
    header = {
        "names": model.joint_names or [f"joint_{j}" for j in range(model.n_joints)],
        "J": model.n_joints, "B": model.n_shape, "V": model.n_vertices,
        "parents": model.parents.tolist(),
        "marker_ids": model.marker_vertex_ids.tolist(),
        "payload_offsets": offsets,
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    return HBM_MAGIC + struct.pack("<Q", len(hjson)) + hjson + payload


def body_model_from_bytes(buf: bytes) -> BodyModel:
    if buf[:8] != HBM_MAGIC:
        raise BadMagic(f"bad body-model magic {buf[:8]!r} at byte offset 0")
    if len(buf) < 16:
        raise TruncatedFile("body-model header truncated at byte offset 8")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) < 16 + hlen:
        raise TruncatedFile(f"JSON header truncated at byte offset {len(buf)}")
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for name, loc in header["payload_offsets"].items():
        arr, _ = tensor_from_bytes(buf, base + loc["offset"])
        arrays[name] = arr
    faces = arrays.get("faces")
    return BodyModel(
        template_vertices=arrays["template_vertices"],
        shape_blendshapes=arrays["shape_blendshapes"],
        joint_regressor=arrays["joint_regressor"],
        parents=np.asarray(header["parents"]),
        skinning_weights=arrays["skinning_weights"],
        marker_vertex_ids=np.asarray(header["marker_ids"]),
        joint_names=header.get("names"),
        faces=None if faces is None else faces.astype(np.int64),
    )


def write_body_model(path, model: BodyModel) -> None:
    with open(path, "wb") as fh:
        fh.write(body_model_to_bytes(model))


def read_body_model(path) -> BodyModel:
    with open(path, "rb") as fh:
        return body_model_from_bytes(fh.read())
