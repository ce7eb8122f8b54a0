"""Gaussian surfel initialisation on mesh faces and its PLY serialisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMesh, MissingField
from .geometry import TriangleMesh
from .io import read_ply_elements
from .rotations import matrix_to_quaternion, quaternion_to_matrix

SURFEL_FIELDS = [
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("scale_0", "<f4"), ("scale_1", "<f4"),
    ("rot_0", "<f4"), ("rot_1", "<f4"), ("rot_2", "<f4"), ("rot_3", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("opacity", "<f4"),
]


@dataclass
class SurfelSet:
    """Flat 2D Gaussians. ``rotations`` are (w, x, y, z) quaternions taking the
    canonical axes to (tangent_u, tangent_v, normal)."""

    centers: np.ndarray
    normals: np.ndarray
    scales: np.ndarray  # K×2
    rotations: np.ndarray  # K×4
    colors: np.ndarray  # K×3 in [0, 1]
    opacity: np.ndarray  # K

    def __len__(self):
        return len(self.centers)

    @property
    def frames(self) -> np.ndarray:
        """K×3×3 matrices with columns (tangent_u, tangent_v, normal)."""
        return quaternion_to_matrix(self.rotations)

    @property
    def tangent_u(self) -> np.ndarray:
        return self.frames[:, :, 0]

    @property
    def tangent_v(self) -> np.ndarray:
        return self.frames[:, :, 1]


def init_surfels(mesh: TriangleMesh, default_opacity: float = 0.8,
                 default_color=(0.5, 0.5, 0.5)) -> SurfelSet:
    """One surfel per face, centred on the centroid and lying in the face plane.

    The first tangent follows the face's longest edge; both scales are the
    square root of the face area. Colours average the face's vertex colours
    when the mesh has them.
    """
    if len(mesh.faces) == 0:
        raise EmptyMesh("cannot place surfels on a mesh without faces")
    tri = mesh.triangles
    areas = mesh.face_areas()
    if np.any(areas <= 0):
        raise EmptyMesh(f"{int(np.sum(areas <= 0))} degenerate face(s)")
    normal = mesh.face_normals()
    edges = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]], axis=1)
    longest = np.argmax(np.linalg.norm(edges, axis=2), axis=1)
    u = edges[np.arange(len(tri)), longest]
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normal, u)
    frames = np.stack([u, v, normal], axis=2)
    k = len(tri)
    if mesh.colors is not None:
        colors = mesh.colors[mesh.faces].mean(axis=1)
    else:
        colors = np.tile(np.asarray(default_color, dtype=np.float64), (k, 1))
    s = np.sqrt(areas)
    return SurfelSet(tri.mean(axis=1), normal, np.stack([s, s], axis=1), matrix_to_quaternion(frames),
                     colors, np.full(k, float(default_opacity)))


def write_surfels_ply(surfels: SurfelSet, path) -> None:
    if len(surfels) == 0:
        raise EmptyMesh("surfel set is empty")
    arr = np.zeros(len(surfels), dtype=SURFEL_FIELDS)
    arr["x"], arr["y"], arr["z"] = surfels.centers.T
    arr["nx"], arr["ny"], arr["nz"] = surfels.normals.T
    arr["scale_0"], arr["scale_1"] = surfels.scales.T
    for i in range(4):
        arr[f"rot_{i}"] = surfels.rotations[:, i]
    rgb = np.clip(np.round(surfels.colors * 255.0), 0, 255).astype(np.uint8)
    arr["red"], arr["green"], arr["blue"] = rgb.T
    arr["opacity"] = surfels.opacity
    ply_type = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(arr)}"]
    header += [f"property {ply_type[t]} {name}" for name, t in SURFEL_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def read_surfels_ply(path) -> SurfelSet:
    _, data = read_ply_elements(path)
    v = data.get("vertex")
    if v is None:
        raise MissingField("surfel PLY has no vertex element")
    missing = [name for name, _ in SURFEL_FIELDS if name not in v.dtype.names]
    if missing:
        raise MissingField(f"surfel PLY lacks {missing}")
    col = lambda *names: np.stack([v[n].astype(np.float64) for n in names], axis=1)  # noqa: E731
    return SurfelSet(
        centers=col("x", "y", "z"),
        normals=col("nx", "ny", "nz"),
        scales=col("scale_0", "scale_1"),
        rotations=col("rot_0", "rot_1", "rot_2", "rot_3"),
        colors=col("red", "green", "blue") / 255.0,
        opacity=v["opacity"].astype(np.float64),
    )
