"""Deterministic geometry back end for sparse-view clothed human reconstruction.

Prediction maps go in; watertight meshes, cameras, fitted bodies, surfels and
evaluation reports come out.
"""
__version__ = "0.1.0"

from .body import BodyFitter, BodyModel, BodyParams, FitConfig, MarkerSet, aggregate_markers, fit_body, lbs_forward
from .camera import PnPEstimator, SimilarityAligner, camera_from_pointmap, pnp_ransac, procrustes_align, umeyama
from .geometry import CameraPose, OrientedPointCloud, PredictionSet, SimilarityTransform, TriangleMesh
from .metrics import chamfer, evaluate_mesh, fscore, normal_consistency, pa_mpjpe, pa_v2v
from .pipeline import reconstruct, recover_cameras
from .poisson import IndicatorGrid, PoissonReconstructor, marching_cubes, solve_poisson_fft
from .splats import SurfelSet, init_surfels

__all__ = [
    "BodyFitter", "BodyModel", "BodyParams", "CameraPose", "FitConfig", "IndicatorGrid", "MarkerSet",
    "OrientedPointCloud", "PnPEstimator", "PoissonReconstructor", "PredictionSet", "SimilarityAligner",
    "SimilarityTransform", "SurfelSet", "TriangleMesh", "aggregate_markers", "camera_from_pointmap", "chamfer",
    "evaluate_mesh", "fit_body", "fscore", "init_surfels", "lbs_forward", "marching_cubes", "normal_consistency",
    "pa_mpjpe", "pa_v2v", "pnp_ransac", "procrustes_align", "reconstruct", "recover_cameras",
    "solve_poisson_fft", "umeyama",
]
