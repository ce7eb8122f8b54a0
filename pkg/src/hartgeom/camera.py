"""Camera recovery from point maps and similarity alignment of point sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import rq
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paired, check_points
from .errors import DegenerateConfiguration, DegenerateSource, NoConsensus, RankDeficient
from .geometry import CameraPose, SimilarityTransform
from .lm import levenberg_marquardt
from .rotations import log_rotation, rodrigues

MIN_CORRESPONDENCES = 6


@dataclass
class PnPResult:
    pose: CameraPose
    inlier_mask: np.ndarray
    mean_reproj_error: float

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Hartley normalisation: zero centroid, mean distance sqrt(dim)."""
    dim = pts.shape[1]
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(dim) / max(d, 1e-300)
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * c
    return T


def _check_pnp_input(points2d, points3d):
    p2 = np.asarray(points2d, dtype=np.float64)
    if p2.ndim != 2 or len(p2) < MIN_CORRESPONDENCES:
        raise DegenerateConfiguration(f"need at least {MIN_CORRESPONDENCES} correspondences, got {len(p2)}")
    return check_paired(p2, points3d, ("points2d", "points3d"), MIN_CORRESPONDENCES, (2, 3))


def reprojection_errors(pose: CameraPose, points2d: np.ndarray, points3d: np.ndarray) -> np.ndarray:
    """Pixel distance per correspondence; ``inf`` for points behind the camera."""
    z = pose.to_camera(points3d)[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(pose.project(points3d) - points2d, axis=1)
    return np.where(z > 0, err, np.inf)


def pnp_dlt(points2d, points3d) -> CameraPose:
    """Direct linear transform for a full projection matrix, split into K[R|t].

    Focal lengths and principal point are all free; skew is discarded.
    """
    p2, p3 = _check_pnp_input(points2d, points3d)
    centered = p3 - p3.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[2] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("3D points are coplanar or collinear")

    T2 = _normalizing_transform(p2)
    T3 = _normalizing_transform(p3)
    x = p2 @ T2[:2, :2].T + T2[:2, 2]
    X = np.hstack([p3 @ T3[:3, :3].T + T3[:3, 3], np.ones((len(p3), 1))])
    n = len(x)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -x[:, :1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -x[:, 1:2] * X
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise RankDeficient("DLT system has a multi-dimensional null space")
    P = np.linalg.inv(T2) @ vt[-1].reshape(3, 4) @ T3

    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    K, R = rq(M)
    D = np.diag(np.sign(np.diag(K)))
    K, R = K @ D, D @ R
    if np.linalg.det(R) < 0 or K[2, 2] <= 0:
        raise DegenerateConfiguration("projection matrix does not factor into a proper camera")
    t = np.linalg.solve(K, P[:, 3])
    K = K / K[2, 2]
    # (R, t) map world -> camera; CameraPose stores camera -> world
    return CameraPose(R.T, -R.T @ t, K[0, 0], K[1, 1], K[0, 2], K[1, 2])


def _pose_to_params(pose: CameraPose) -> np.ndarray:
    return np.concatenate([log_rotation(pose.rotation_w2c), pose.translation_w2c,
                           [pose.fx, pose.fy, pose.cx, pose.cy]])


def _params_to_pose(x: np.ndarray) -> CameraPose:
    R = rodrigues(x[:3])
    return CameraPose(R.T, -R.T @ x[3:6], x[6], x[7], x[8], x[9])


def refine_pose(pose: CameraPose, points2d, points3d, huber_delta: float = 2.0, max_iters: int = 100):
    """Minimise the Huber-robust pixel reprojection error over pose and intrinsics."""
    p2 = np.asarray(points2d, dtype=np.float64)
    p3 = np.asarray(points3d, dtype=np.float64)

    def residuals(x):
        R = rodrigues(x[:3])
        pc = p3 @ R.T + x[3:6]
        u = x[6] * pc[:, 0] / pc[:, 2] + x[8]
        v = x[7] * pc[:, 1] / pc[:, 2] + x[9]
        return np.stack([u - p2[:, 0], v - p2[:, 1]], axis=1).ravel()

    def valid(x):
        return x[6] > 0 and x[7] > 0

    res = levenberg_marquardt(residuals, _pose_to_params(pose), max_iters=max_iters, rtol=1e-12,
                              fd_step=1e-7, loss="huber", huber_delta=huber_delta, group=2,
                              is_valid=valid)
    return _params_to_pose(res.x)


def _fit_inliers(p2, p3, inliers, huber_delta):
    pose = pnp_dlt(p2[inliers], p3[inliers])
    return refine_pose(pose, p2[inliers], p3[inliers], huber_delta)


def pnp_ransac(points2d, points3d, threshold_px: float = 1.0, max_iters: int = 512,
               confidence: float = 0.999, seed: int = 0, refine: bool = True) -> PnPResult:
    """Robust camera estimation: 6-point DLT hypotheses scored by inlier count.

    The correspondence list is put into a canonical order first, so the
    result does not depend on how the caller ordered it. The winning
    hypothesis is re-estimated on its inliers (DLT then robust LM), and the
    inlier set is re-derived until it stops changing.
    """
    p2, p3 = _check_pnp_input(points2d, points3d)
    order = np.lexsort(np.hstack([p2, p3]).T[::-1])
    p2s, p3s = p2[order], p3[order]
    m = len(p2s)
    rng = np.random.default_rng(seed)

    best_count, best_mask = 0, None
    needed = max_iters
    trial = 0
    while trial < min(needed, max_iters):
        trial += 1
        idx = rng.choice(m, size=MIN_CORRESPONDENCES, replace=False)
        try:
            pose = pnp_dlt(p2s[idx], p3s[idx])
        except (DegenerateConfiguration, RankDeficient, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(pose, p2s, p3s)
        if not np.all(np.isfinite(err[idx])):
            continue
        mask = err < threshold_px
        count = int(mask.sum())
        # strict improvement: ties keep the earlier trial
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / m
            if w >= 1.0:
                needed = trial
            else:
                denom = np.log1p(-w**MIN_CORRESPONDENCES)
                needed = int(np.ceil(np.log(1.0 - confidence) / denom)) if denom < 0 else max_iters
    if best_count < MIN_CORRESPONDENCES:
        raise NoConsensus(f"best hypothesis has {best_count} inliers after {trial} trials")

    mask = best_mask
    delta = 2.0 * threshold_px
    pose = None
    for _ in range(10):
        try:
            pose = _fit_inliers(p2s, p3s, mask, delta) if refine else pnp_dlt(p2s[mask], p3s[mask])
        except (DegenerateConfiguration, RankDeficient) as exc:
            raise NoConsensus(f"inlier set is degenerate: {exc}") from exc
        new_mask = reprojection_errors(pose, p2s, p3s) < threshold_px
        if new_mask.sum() < MIN_CORRESPONDENCES:
            break
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    err = reprojection_errors(pose, p2s, p3s)
    final = err < threshold_px
    if final.sum() < MIN_CORRESPONDENCES:
        raise NoConsensus(f"refined pose keeps only {int(final.sum())} inliers")
    inlier_mask = np.zeros(m, dtype=bool)
    inlier_mask[order] = final
    return PnPResult(pose, inlier_mask, float(err[final].mean()))


def pointmap_correspondences(point_map: np.ndarray, mask: np.ndarray, stride: int = 4):
    """Pixel-centre coordinates ``(col + 0.5, row + 0.5)`` paired with the map's 3D points."""
    point_map = np.asarray(point_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows, cols = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
    keep = mask[rows, cols]
    rows, cols = rows[keep], cols[keep]
    p2 = np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)
    p3 = point_map[rows, cols]
    finite = np.all(np.isfinite(p3), axis=1)
    return p2[finite], p3[finite]


def camera_from_pointmap(point_map, mask, stride: int = 4, threshold_px: float = 1.0,
                         max_iters: int = 512, confidence: float = 0.999, seed: int = 0) -> PnPResult:
    p2, p3 = pointmap_correspondences(point_map, mask, stride)
    if len(p2) < MIN_CORRESPONDENCES:
        raise DegenerateConfiguration(f"only {len(p2)} masked pixels after stride {stride}")
    return pnp_ransac(p2, p3, threshold_px, max_iters, confidence, seed)


def umeyama(src, dst, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity ``dst ~ s R src + t`` (proper rotations only)."""
    src, dst = check_paired(src, dst, ("src", "dst"), 3)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs * xs).sum() / len(src)
    if var_s <= 1e-300:
        raise DegenerateSource("source points are coincident")
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        S[2] = -1.0
    R = (u * S) @ vt
    s = float((d * S).sum() / var_s) if with_scale else 1.0
    return SimilarityTransform(s, R, mu_d - s * R @ mu_s)


def procrustes_align(pred, gt):
    """Similarity-align ``pred`` onto ``gt``; returns ``(aligned, transform)``."""
    tf = umeyama(pred, gt, with_scale=True)
    return tf.apply(pred), tf


class SimilarityAligner(TransformerMixin, BaseEstimator):
    """Umeyama alignment as a transformer: ``fit(src, dst)`` then ``transform(src)``.

    Parameters
    ----------
    with_scale : bool, default=True
        Estimate a uniform scale in addition to rotation and translation.

    Attributes
    ----------
    transform_ : SimilarityTransform
    scale_, rotation_, translation_ : float, ndarray, ndarray
    rmse_ : float
        Root-mean-square residual of the aligned training points.
    """

    def __init__(self, with_scale=True):
        self.with_scale = with_scale

    def fit(self, X, y):
        X, y = check_paired(X, y, ("X", "y"), 3)
        self.transform_ = umeyama(X, y, self.with_scale)
        self.scale_ = self.transform_.scale
        self.rotation_ = self.transform_.rotation
        self.translation_ = self.transform_.translation
        self.rmse_ = float(np.sqrt(np.mean(np.sum((self.transform_.apply(X) - y) ** 2, axis=1))))
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_points(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.inverse().apply(check_points(X))


class PnPEstimator(BaseEstimator):
    """RANSAC + PnP camera estimation with a free principal point.

    ``fit(X, y)`` takes world points ``X`` (M×3) and their pixel
    observations ``y`` (M×2); ``predict(X)`` projects new world points.
    """

    def __init__(self, threshold_px=1.0, max_iters=512, confidence=0.999, seed=0):
        self.threshold_px = threshold_px
        self.max_iters = max_iters
        self.confidence = confidence
        self.seed = seed

    def fit(self, X, y):
        res = pnp_ransac(y, X, self.threshold_px, self.max_iters, self.confidence, self.seed)
        self.pose_ = res.pose
        self.inlier_mask_ = res.inlier_mask
        self.mean_reproj_error_ = res.mean_reproj_error
        return self

    def predict(self, X):
        check_is_fitted(self, "pose_")
        return self.pose_.project(check_points(X))

    def score(self, X, y):
        """Fraction of correspondences reprojecting within the threshold."""
        check_is_fitted(self, "pose_")
        X, y = check_paired(X, y, ("X", "y"), 1, (3, 2))
        return float(np.mean(reprojection_errors(self.pose_, y, X) < self.threshold_px))
