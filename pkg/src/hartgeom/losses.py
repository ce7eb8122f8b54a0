"""Reference evaluators for the training losses.

Reduction convention: the point and normal losses average over the masked
pixels of each view and sum over views. The SMPL terms pool the masked
pixels of all views; direction, magnitude and confidence terms are sums,
the label term is a mean. Arguments accept one map or a list of per-view
maps.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import NonFiniteComponent, NonPositiveConfidence, NonUnitNormal

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha_conf: float = 0.2

    def __post_init__(self):
        if self.alpha_conf < 0:
            raise ValueError("alpha_conf must be non-negative")


def _views(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _masks(masks, like):
    if masks is None:
        return [np.ones(np.shape(v)[:2], dtype=bool) for v in like]
    return [np.asarray(m, dtype=bool) for m in _views(masks)]


def _per_view(pred, gt, conf, masks, cfg, residual_fn):
    cfg = cfg or LossConfig()
    preds, gts, confs = _views(pred), _views(gt), _views(conf)
    ms = _masks(masks, preds)
    total = 0.0
    for p, g, c, m in zip(preds, gts, confs, ms):
        c = np.asarray(c, dtype=np.float64)[m]
        if np.any(c <= 0):
            raise NonPositiveConfidence("confidence must be strictly positive on masked pixels")
        if c.size == 0:
            continue
        r = residual_fn(np.asarray(p, dtype=np.float64)[m], np.asarray(g, dtype=np.float64)[m])
        total += float(np.mean(c * r - cfg.alpha_conf * np.log(c)))
    return total


def point_loss(pred, gt, conf, masks=None, cfg: Optional[LossConfig] = None) -> float:
    """Confidence-weighted L1 point-map loss with a log-confidence penalty."""
    return _per_view(pred, gt, conf, masks, cfg, lambda p, g: np.abs(p - g).sum(axis=-1))


def _check_unit(x, name, tol=1e-3):
    n = np.linalg.norm(x, axis=-1)
    if n.size and np.abs(n - 1.0).max() > tol:
        raise NonUnitNormal(f"{name} has a vector of norm {n[np.argmax(np.abs(n - 1))]:.6g}")


def normal_loss(pred, gt, conf, masks=None, cfg: Optional[LossConfig] = None) -> float:
    """Confidence-weighted ``1 - cos`` normal loss with a log-confidence penalty."""
    def residual(p, g):
        _check_unit(p, "predicted normals")
        _check_unit(g, "ground-truth normals")
        return 1.0 - np.einsum("...c,...c->...", p, g)
    return _per_view(pred, gt, conf, masks, cfg, residual)


def smpl_losses(pred: Mapping, gt: Mapping, masks=None) -> dict:
    """Tightness direction/magnitude, label and confidence losses.

    ``pred`` holds ``dir``, ``mag``, ``label_probs``, ``conf``; ``gt`` holds
    ``dir``, ``mag``, ``label`` (int class map) and ``conf``. The result
    contains ``L_d, L_b, L_l, L_c, L_SMPL`` and ``clamped``, the number of
    pixels whose true-class probability was floored at 1e-12.
    """
    ms = _masks(masks, _views(pred["dir"]))

    def gather(maps):
        return np.concatenate([np.asarray(x, dtype=np.float64)[m].reshape(int(m.sum()), -1)
                               for x, m in zip(_views(maps), ms)])

    d_hat, d = gather(pred["dir"]), gather(gt["dir"])
    b_hat, b = gather(pred["mag"]).ravel(), gather(gt["mag"]).ravel()
    c_hat, c = gather(pred["conf"]).ravel(), gather(gt["conf"]).ravel()
    probs = gather(pred["label_probs"])
    labels = gather(gt["label"]).ravel().astype(np.int64)

    p_true = probs[np.arange(len(labels)), labels]
    clamped = int(np.sum(p_true < PROB_FLOOR))
    if clamped:
        warnings.warn(f"{clamped} pixel(s) have zero probability at the true class; clamped to {PROB_FLOOR}")
    out = {
        "L_d": float(np.sum(1.0 - np.einsum("ij,ij->i", d_hat, d))),
        "L_b": float(np.sum((b_hat - b) ** 2)),
        "L_l": float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR)))) if len(labels) else 0.0,
        "L_c": float(np.sum((c_hat - c) ** 2)),
    }
    out["L_SMPL"] = out["L_d"] + out["L_b"] + out["L_l"] + out["L_c"]
    out["clamped"] = clamped
    return out


def total_loss(components: Union[Mapping, Sequence[float]]) -> float:
    """Unweighted sum of point, normal, indicator-grid and SMPL losses."""
    values = list(components.values()) if isinstance(components, Mapping) else list(components)
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteComponent(f"non-finite loss component in {values}")
    return float(sum(values))
