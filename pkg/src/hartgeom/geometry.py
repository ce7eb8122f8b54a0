"""Core geometric types and the per-pixel fusion helpers built on them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateBounds, EmptyCloud, EmptyMesh, ZeroSumVector

N_MARKERS = 86


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera with camera-to-world extrinsics.

    The principal point is a free parameter; nothing assumes it sits at the
    image centre.
    """

    rotation_c2w: np.ndarray
    translation_c2w: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        object.__setattr__(self, "rotation_c2w", np.asarray(self.rotation_c2w, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation_c2w", np.asarray(self.translation_c2w, dtype=np.float64).reshape(3))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def rotation_w2c(self) -> np.ndarray:
        return self.rotation_c2w.T

    @property
    def translation_w2c(self) -> np.ndarray:
        return -self.rotation_c2w.T @ self.translation_c2w

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation_c2w) @ self.rotation_c2w

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project world points to pixel coordinates (M×2)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no scale, no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
        }


@dataclass(frozen=True)
class OrientedPointCloud:
    positions: np.ndarray
    normals: np.ndarray
    confidences: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise ValueError(f"positions {p.shape} and normals {n.shape} differ")
        if len(p) == 0:
            raise EmptyCloud("oriented point cloud has no points")
        c = np.ones(len(p)) if self.confidences is None else np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if len(c) != len(p):
            raise ValueError("confidences must have one entry per point")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "confidences", c)

    def __len__(self):
        return len(self.positions)


class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex RGB colours in [0, 1]."""

    def __init__(self, vertices, faces, colors=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.colors = None if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise IndexError("face index out of range")
        if self.colors is not None and len(self.colors) != len(self.vertices):
            raise ValueError("colors must have one row per vertex")

    def __repr__(self):
        return f"TriangleMesh(V={len(self.vertices)}, F={len(self.faces)})"

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        norm = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(norm > 0, norm, 1.0)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        tri = self.triangles
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per face-edge incidence (3F×2, sorted)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        if len(self.faces) == 0:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        n_edges = len(np.unique(self.edges(), axis=0))
        return int(len(used) - n_edges + len(self.faces))

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def transformed(self, transform: SimilarityTransform) -> "TriangleMesh":
        faces = self.faces
        # a reflection-free similarity keeps winding; negative scale is not representable
        return TriangleMesh(transform.apply(self.vertices), faces, self.colors)

    def drop_degenerate_faces(self, rel_tol: float = 1e-12) -> "TriangleMesh":
        """Remove faces whose area is below ``rel_tol`` times the bbox face area."""
        if len(self.faces) == 0:
            return self
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        bbox_area = max(ext[0] * ext[1], ext[1] * ext[2], ext[0] * ext[2])
        keep = self.face_areas() > rel_tol * bbox_area
        if keep.all():
            return self
        return TriangleMesh(self.vertices, self.faces[keep], self.colors)


@dataclass
class PredictionSet:
    """Per-view prediction maps as emitted by the upstream network.

    Each attribute is a list with one array per view. Optional fields may be
    ``None`` when a stage does not need them.
    """

    point_maps: list
    masks: list
    normal_maps_base: Optional[list] = None
    normal_residuals: Optional[list] = None
    point_confidences: Optional[list] = None
    normal_confidences: Optional[list] = None
    tightness_dirs: Optional[list] = None
    tightness_mags: Optional[list] = None
    label_probs: Optional[list] = None
    label_confs: Optional[list] = None

    def __post_init__(self):
        self.point_maps = [np.asarray(p, dtype=np.float64) for p in self.point_maps]
        self.masks = [np.asarray(m).astype(bool) for m in self.masks]
        if len(self.point_maps) != len(self.masks):
            raise ValueError("need one mask per point map")
        for p, m in zip(self.point_maps, self.masks):
            if p.shape[:2] != m.shape or p.shape[-1] != 3:
                raise ValueError(f"point map {p.shape} does not match mask {m.shape}")

    @property
    def n_views(self) -> int:
        return len(self.point_maps)

    def view_confidences(self, i: int) -> np.ndarray:
        if self.point_confidences is None:
            return np.ones(self.masks[i].shape)
        return np.asarray(self.point_confidences[i], dtype=np.float64)


def normalize(vectors: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norm < eps):
        raise ZeroSumVector(f"{int(np.sum(norm < eps))} vector(s) have norm below {eps}")
    return vectors / norm


def combine_normals(base: np.ndarray, residual: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Add a residual to base normals and renormalise to unit length.

    If ``mask`` is given only those pixels are checked and normalised; the
    rest of the output is zero.
    """
    base = np.asarray(base, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if base.shape != residual.shape:
        raise ValueError(f"shape mismatch {base.shape} vs {residual.shape}")
    total = base + residual
    if mask is None:
        return normalize(total)
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(total)
    out[mask] = normalize(total[mask])
    return out


def normals_to_world(normals: np.ndarray, pose: CameraPose) -> np.ndarray:
    return np.asarray(normals, dtype=np.float64) @ pose.rotation_c2w.T


def merge_oriented_points(preds: PredictionSet, world_normals: Sequence[np.ndarray],
                          conf_threshold: float = 1.0) -> OrientedPointCloud:
    """Gather masked, confident pixels of every view into one cloud."""
    if len(world_normals) != preds.n_views:
        raise ValueError("need one world-normal map per view")
    pos, nrm, conf = [], [], []
    for i in range(preds.n_views):
        c = preds.view_confidences(i)
        keep = preds.masks[i] & (c >= conf_threshold)
        pos.append(preds.point_maps[i][keep])
        nrm.append(np.asarray(world_normals[i], dtype=np.float64)[keep])
        conf.append(c[keep])
    positions = np.concatenate(pos)
    if len(positions) == 0:
        raise EmptyCloud(f"no pixel passes mask and confidence >= {conf_threshold}")
    return OrientedPointCloud(positions, np.concatenate(nrm), np.concatenate(conf))


def normalize_to_unit_cube(cloud: OrientedPointCloud, margin: float = 0.05):
    """Fit the cloud into ``[margin, 1 - margin]^3`` with a uniform scale.

    Returns the normalised cloud and the transform mapping normalised
    coordinates back to the original ones. The longest bbox axis spans the
    full usable range; shorter axes are centred.
    """
    if not 0.0 <= margin < 0.5:
        raise ValueError("margin must lie in [0, 0.5)")
    p = cloud.positions
    if len(p) < 2:
        raise DegenerateBounds("need at least two points")
    lo, hi = p.min(axis=0), p.max(axis=0)
    extent = hi - lo
    if np.any(extent < 1e-9):
        raise DegenerateBounds(f"bounding box extent {extent} is degenerate")
    span = 1.0 - 2.0 * margin
    s = span / extent.max()
    offset = margin + 0.5 * (span - extent * s)
    to_unit = SimilarityTransform(s, np.eye(3), offset - s * lo)
    q = to_unit.apply(p)
    # the longest axis must hit the margins exactly
    a = int(np.argmax(extent))
    q[:, a] = np.where(p[:, a] == lo[a], margin, q[:, a])
    q[:, a] = np.where(p[:, a] == hi[a], 1.0 - margin, q[:, a])
    return OrientedPointCloud(q, cloud.normals, cloud.confidences), to_unit.inverse()


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-weighted uniform samples on the mesh surface.

    Returns ``(points, normals)``; each sample carries its face normal.
    """
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has no face with positive area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    points = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
              + (r1 * r2)[:, None] * tri[:, 2])
    return points, mesh.face_normals()[face]
