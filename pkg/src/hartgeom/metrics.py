"""Evaluation metrics for clothed meshes and fitted bodies."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points
from .camera import procrustes_align
from .errors import CountMismatch, EmptyCloud, EmptyMesh
from .geometry import TriangleMesh, sample_surface


@dataclass
class MeshEvalReport:
    """Raw distances are in the inputs' units; ``chamfer`` is always acc + comp."""

    accuracy: float
    completeness: float
    fscore: float = float("nan")
    normal_consistency: float = float("nan")
    n_pred_samples: int = 0
    n_gt_samples: int = 0
    tau: float = float("nan")

    @property
    def chamfer(self) -> float:
        return self.accuracy + self.completeness

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chamfer"] = self.chamfer
        return d


@dataclass
class BodyEvalReport:
    pa_v2v: float  # millimetres
    pa_mpjpe: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _nn_distances(query: np.ndarray, ref: np.ndarray, workers: int = 1) -> np.ndarray:
    return cKDTree(ref).query(query, k=1, workers=workers)[0]


def _check_cloud(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyCloud(f"{name} is empty")
    return check_points(x, name)


def chamfer(pred_samples, gt_samples, workers: int = 1):
    """Return ``(accuracy, completeness, chamfer)``.

    Accuracy is the mean distance from each predicted point to the nearest
    ground-truth point; completeness is the reverse direction.
    """
    pred = _check_cloud(pred_samples, "pred_samples")
    gt = _check_cloud(gt_samples, "gt_samples")
    acc = float(_nn_distances(pred, gt, workers).mean())
    comp = float(_nn_distances(gt, pred, workers).mean())
    return acc, comp, acc + comp


def fscore(pred_samples, gt_samples, tau: float, workers: int = 1) -> float:
    if not tau > 0:
        raise ValueError("tau must be positive")
    pred = _check_cloud(pred_samples, "pred_samples")
    gt = _check_cloud(gt_samples, "gt_samples")
    precision = float(np.mean(_nn_distances(pred, gt, workers) < tau))
    recall = float(np.mean(_nn_distances(gt, pred, workers) < tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def normal_consistency(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = 100_000, seed: int = 0,
                       workers: int = 1) -> float:
    """Symmetric mean of ``|n_pred . n_gt|`` between nearest surface samples."""
    if len(pred.faces) == 0 or len(gt.faces) == 0:
        raise EmptyMesh("both meshes need faces")
    pp, pn = sample_surface(pred, n_samples, seed)
    gp, gn = sample_surface(gt, n_samples, seed)
    _, i_pg = cKDTree(gp).query(pp, workers=workers)
    _, i_gp = cKDTree(pp).query(gp, workers=workers)
    a = np.abs(np.einsum("ij,ij->i", pn, gn[i_pg])).mean()
    b = np.abs(np.einsum("ij,ij->i", gn, pn[i_gp])).mean()
    return float(0.5 * (a + b))


def evaluate_mesh(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = 100_000, seed: int = 0,
                  tau: Optional[float] = None, tau_rel: float = 0.005, workers: int = 1) -> MeshEvalReport:
    """All clothed-mesh metrics from seeded surface samples.

    ``tau`` defaults to ``tau_rel`` times the ground-truth bbox diagonal.
    """
    if len(pred.faces) == 0 or len(gt.faces) == 0:
        raise EmptyMesh("both meshes need faces")
    if tau is None:
        tau = tau_rel * gt.bbox_diagonal()
    ps, _ = sample_surface(pred, n_samples, seed)
    gs, _ = sample_surface(gt, n_samples, seed)
    acc, comp, _ = chamfer(ps, gs, workers)
    f = fscore(ps, gs, tau, workers)
    nc = normal_consistency(pred, gt, n_samples, seed, workers)
    return MeshEvalReport(acc, comp, f, nc, n_samples, n_samples, float(tau))


def _pa_error(pred, gt, name) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise CountMismatch(f"{name}: {len(pred)} predicted vs {len(gt)} ground-truth points")
    aligned, _ = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=1).mean() * 1000.0)


def pa_v2v(pred_vertices, gt_vertices) -> float:
    """Mean vertex error after similarity alignment, in mm for metre inputs."""
    return _pa_error(pred_vertices, gt_vertices, "vertices")


def pa_mpjpe(pred_joints, gt_joints) -> float:
    return _pa_error(pred_joints, gt_joints, "joints")
