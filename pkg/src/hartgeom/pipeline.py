"""End-to-end chains of the individual stages."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .body import (BodyModel, FitConfig, FitResult, MarkerSet, aggregate_confidence, aggregate_markers,
                   argmax_labels, fit_body, inner_points)
from .camera import camera_from_pointmap
from ._validation import check_power_of_two
from .errors import HartGeomError, ResolutionNotSupported
from .geometry import (PredictionSet, TriangleMesh, combine_normals, merge_oriented_points,
                       normalize_to_unit_cube, normals_to_world)
from .poisson import (IndicatorGrid, apply_residual, fallback_residual, marching_cubes, rasterize_points,
                      solve_poisson_fft)


class StageError(HartGeomError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(f"{stage}: {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (HartGeomError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


@dataclass
class ReconResult:
    mesh: TriangleMesh
    poses: list
    chi0: IndicatorGrid
    chi_refined: IndicatorGrid
    n_points: int


def recover_cameras(preds: PredictionSet, stride=4, threshold_px=1.0, max_iters=512,
                    confidence=0.999, seed=0) -> list:
    return [camera_from_pointmap(preds.point_maps[i], preds.masks[i], stride, threshold_px,
                                 max_iters, confidence, seed)
            for i in range(preds.n_views)]


def reconstruct(preds: PredictionSet, poses=None, residual=None, resolution=256, sigma=2.0,
                conf_threshold=1.0, margin=0.05, fallback_radius=3.0, fallback_iters=16,
                camera_kwargs=None, workers=None) -> ReconResult:
    """Prediction maps to a watertight mesh in world coordinates.

    ``residual`` may be an :class:`IndicatorGrid`/array to add to the
    initial grid; ``None`` uses :func:`fallback_residual`.
    """
    with stage("solve"):
        if not check_power_of_two(resolution):
            raise ResolutionNotSupported(f"resolution {resolution} must be a power of two >= 16")
    with stage("combine_normals"):
        if preds.normal_maps_base is None:
            raise ValueError("base normal maps are required")
        normals = []
        for i in range(preds.n_views):
            res = (preds.normal_residuals[i] if preds.normal_residuals is not None
                   else np.zeros_like(preds.normal_maps_base[i]))
            normals.append(combine_normals(preds.normal_maps_base[i], res, preds.masks[i]))
    if poses is None:
        with stage("cameras"):
            poses = [r.pose for r in recover_cameras(preds, **(camera_kwargs or {}))]
    with stage("normals_to_world"):
        if len(poses) != preds.n_views:
            raise ValueError(f"{len(poses)} cameras for {preds.n_views} views")
        world = [normals_to_world(n, p) for n, p in zip(normals, poses)]
    with stage("merge"):
        cloud = merge_oriented_points(preds, world, conf_threshold)
    with stage("normalize"):
        unit, to_world = normalize_to_unit_cube(cloud, margin)
    with stage("rasterize"):
        v = rasterize_points(unit, resolution)
    with stage("solve"):
        chi0 = solve_poisson_fft(v, sigma, unit.positions, to_world, workers)
    with stage("residual"):
        if residual is None:
            chi_res = fallback_residual(chi0, unit.positions, fallback_radius, fallback_iters)
        else:
            chi_res = residual
        chi = apply_residual(chi0, chi_res)
    with stage("marching_cubes"):
        mesh = marching_cubes(chi, 0.0)
    return ReconResult(mesh, list(poses), chi0, chi, len(cloud))


def markers_from_predictions(preds: PredictionSet, alpha: float = 2.0, n_markers: Optional[int] = None) -> MarkerSet:
    with stage("markers"):
        for name in ("tightness_dirs", "tightness_mags", "label_probs", "label_confs"):
            if getattr(preds, name) is None:
                raise ValueError(f"{name} maps are required for body fitting")
        inner, labels, conf = [], [], []
        for i in range(preds.n_views):
            inner.append(inner_points(preds.point_maps[i], preds.tightness_dirs[i], preds.tightness_mags[i]))
            labels.append(argmax_labels(preds.label_probs[i]))
            conf.append(aggregate_confidence(preds.label_probs[i], preds.label_confs[i]))
        k = n_markers or np.shape(preds.label_probs[0])[-1]
        return aggregate_markers(inner, labels, conf, preds.masks, alpha, k)


def fit_body_from_predictions(preds: PredictionSet, model: BodyModel, alpha: float = 2.0,
                              config: Optional[FitConfig] = None):
    """Returns ``(markers, fit_result)``."""
    n_labels = np.shape(preds.label_probs[0])[-1] if preds.label_probs else None
    with stage("markers"):
        if n_labels is not None and n_labels != model.n_markers:
            raise ValueError(f"label maps have {n_labels} classes but the model defines {model.n_markers} markers")
    markers = markers_from_predictions(preds, alpha, model.n_markers)
    with stage("fit_body"):
        result: FitResult = fit_body(markers, model, config)
    return markers, result
