"""Deterministic synthetic fixtures: a toy skinned body, spheres, rendered views.

These stand in for licensed body-model assets and network predictions so
every stage can be exercised end to end.
"""
from __future__ import annotations

import numpy as np

from .body import BodyModel
from .geometry import N_MARKERS, CameraPose, TriangleMesh
from .rotations import rodrigues

# joint positions of the toy body in its rest pose (y up, metres)
_TOY_JOINTS = np.array([
    [0.0, 0.95, 0.0],    # 0 pelvis
    [0.0, 1.05, 0.0],    # 1 spine
    [0.0, 1.45, 0.0],    # 2 head
    [0.2, 1.45, 0.0],    # 3 left upper arm
    [-0.2, 1.45, 0.0],   # 4 right arm
    [0.1, 0.9, 0.0],     # 5 left leg
    [-0.1, 0.9, 0.0],    # 6 right leg
    [0.5, 1.45, 0.0],    # 7 left forearm
])
_TOY_PARENTS = np.array([-1, 0, 1, 1, 1, 0, 0, 3])
_TOY_NAMES = ["pelvis", "spine", "head", "l_upperarm", "r_arm", "l_leg", "r_leg", "l_forearm"]
# (start, end, radius) of the tube skinned to each joint
_TOY_SEGMENTS = [
    ((-0.15, 0.95, 0.0), (0.15, 0.95, 0.0), 0.12),
    ((0.0, 1.05, 0.0), (0.0, 1.4, 0.0), 0.13),
    ((0.0, 1.45, 0.0), (0.0, 1.75, 0.0), 0.09),
    ((0.2, 1.45, 0.0), (0.5, 1.45, 0.0), 0.05),
    ((-0.2, 1.45, 0.0), (-0.75, 1.45, 0.0), 0.05),
    ((0.1, 0.9, 0.0), (0.1, 0.05, 0.0), 0.07),
    ((-0.1, 0.9, 0.0), (-0.1, 0.05, 0.0), 0.07),
    ((0.5, 1.45, 0.0), (0.78, 1.45, 0.0), 0.04),
]


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def farthest_point_indices(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen)


def make_toy_body_model(n_rings: int = 9, n_around: int = 8, n_markers: int = N_MARKERS) -> BodyModel:
    """An 8-joint, 4-shape-coefficient tube body with 576 vertices."""
    J = len(_TOY_PARENTS)
    verts, weights, faces, radial, seg_of = [], [], [], [], []
    for j, (a, b, rad) in enumerate(_TOY_SEGMENTS):
        a, b = np.asarray(a), np.asarray(b)
        u, w = _frame(b - a)
        base = len(verts)
        for i in range(n_rings):
            s = i / (n_rings - 1)
            centre = a + s * (b - a)
            for k in range(n_around):
                ang = 2 * np.pi * k / n_around
                d = np.cos(ang) * u + np.sin(ang) * w
                verts.append(centre + rad * d)
                radial.append(d)
                seg_of.append(j)
                row = np.zeros(J)
                if j == 0 or s >= 0.25:
                    row[j] = 1.0
                else:
                    # blend into the parent near the joint
                    t = 0.5 + 2.0 * s
                    row[j] = t
                    row[_TOY_PARENTS[j]] = 1.0 - t
                weights.append(row)
        for i in range(n_rings - 1):
            for k in range(n_around):
                p0 = base + i * n_around + k
                p1 = base + i * n_around + (k + 1) % n_around
                q0, q1 = p0 + n_around, p1 + n_around
                faces += [[p0, p1, q1], [p0, q1, q0]]
    verts = np.asarray(verts)
    radial = np.asarray(radial)
    V = len(verts)

    dirs = np.zeros((V, 3, 4))
    dirs[:, 1, 0] = 0.1 * (verts[:, 1] - 0.95)                      # height
    dirs[:, :, 1] = 0.02 * radial                                   # girth
    arm = np.isin(np.asarray(seg_of), [3, 4, 7])
    dirs[arm, 0, 2] = 0.1 * verts[arm, 0]                           # arm span
    dirs[:, 0, 3] = 0.01 * np.sin(3 * verts[:, 1])
    dirs[:, 1, 3] = 0.01 * np.cos(2 * verts[:, 0])
    dirs[:, 2, 3] = 0.01 * np.sin(5 * verts[:, 2] + verts[:, 1])

    # each joint regresses to the mean of the vertex ring closest to it
    regressor = np.zeros((J, V))
    rings = verts.reshape(-1, n_around, 3).mean(axis=1)
    for j in range(J):
        ring = int(np.argmin(np.linalg.norm(rings - _TOY_JOINTS[j], axis=1)))
        regressor[j, ring * n_around:(ring + 1) * n_around] = 1.0 / n_around

    markers = farthest_point_indices(verts, n_markers)
    return BodyModel(verts, dirs, regressor, _TOY_PARENTS.copy(), np.asarray(weights), markers,
                     list(_TOY_NAMES), np.asarray(faces))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    v = q[1:] / np.linalg.norm(q[1:])
    angle = 2 * np.arccos(abs(q[0]) / np.linalg.norm(q))
    return rodrigues(v * angle)


def fibonacci_sphere(n: int, radius: float = 0.3, centre=(0.5, 0.5, 0.5)):
    """Near-uniform oriented samples on a sphere: ``(points, outward normals)``."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    d = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return np.asarray(centre) + radius * d, d


def random_sphere_points(n: int, radius: float = 0.3, centre=(0.5, 0.5, 0.5), seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(centre) + radius * d


def capped_sphere(n: int, cap_degrees: float = 60.0, radius: float = 0.3, centre=(0.5, 0.5, 0.5)):
    """Sphere samples with a polar cap of apex angle ``cap_degrees`` around +z removed."""
    p, d = fibonacci_sphere(n, radius, centre)
    keep = d[:, 2] < np.cos(np.radians(cap_degrees / 2.0))
    return p[keep], d[keep]


def uv_sphere_mesh(radius: float = 0.3, centre=(0.5, 0.5, 0.5), n_lat: int = 32, n_lon: int = 64) -> TriangleMesh:
    """Closed UV sphere with outward-facing triangles."""
    centre = np.asarray(centre, dtype=np.float64)
    verts = [centre + [0, 0, radius]]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            th = 2 * np.pi * j / n_lon
            verts.append(centre + radius * np.array([np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)]))
    verts.append(centre - [0, 0, radius])
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + j % n_lon  # noqa: E731
    for j in range(n_lon):
        faces.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, c, d], [a, d, b]]
    bottom = len(verts) - 1
    for j in range(n_lon):
        faces.append([bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    return TriangleMesh(np.asarray(verts), np.asarray(faces))


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0), fx=300.0, fy=300.0, cx=64.0, cy=64.0) -> CameraPose:
    """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, -up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose(np.stack([x, y, z], axis=1), eye, fx, fy, cx, cy)


def render_sphere_view(pose: CameraPose, width: int, height: int, radius: float = 0.3, centre=(0.0, 0.0, 0.0)):
    """Ray-cast a sphere: world point map, camera-frame normal map and mask."""
    centre = np.asarray(centre, dtype=np.float64)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    dirs_c = np.stack([(cols + 0.5 - pose.cx) / pose.fx, (rows + 0.5 - pose.cy) / pose.fy,
                       np.ones_like(rows, dtype=np.float64)], axis=-1)
    dirs = dirs_c @ pose.rotation_c2w.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    oc = pose.translation_c2w - centre
    b = dirs @ oc
    c = oc @ oc - radius ** 2
    disc = b * b - c
    mask = disc > 0
    t = -b - np.sqrt(np.where(mask, disc, 0.0))
    mask &= t > 0
    pts = pose.translation_c2w + t[..., None] * dirs
    n_world = (pts - centre) / radius
    n_cam = n_world @ pose.rotation_c2w
    pts[~mask] = 0.0
    n_cam[~mask] = 0.0
    return pts, n_cam, mask


def sphere_views(n_views: int = 4, size: int = 96, radius: float = 0.3, distance: float = 1.2, cx_offset: float = 0.0):
    """Views of a sphere centred at the origin, expressed in the first camera's frame.

    Cameras sit on a tetrahedron-like arrangement so the union of the views
    covers the whole sphere. Returns ``(poses, point_maps, normal_maps, masks)``
    with poses mapping first-camera coordinates to each camera.
    """
    dirs = np.array([[0.0, 0.0, -1.0], [0.94, 0.0, 0.33], [-0.47, 0.82, 0.33], [-0.47, -0.82, 0.33]])
    if n_views > len(dirs):
        extra = fibonacci_sphere(n_views - len(dirs), 1.0, (0, 0, 0))[0]
        dirs = np.vstack([dirs, extra])
    dirs = dirs[:n_views] / np.linalg.norm(dirs[:n_views], axis=1, keepdims=True)
    f = size * 1.1
    world_poses = []
    for d in dirs:
        up = (0.0, 1.0, 0.0) if abs(d[1]) < 0.9 else (1.0, 0.0, 0.0)
        world_poses.append(look_at_pose(distance * d, (0, 0, 0), up, f, f, size / 2 + cx_offset, size / 2))
    # re-express everything in the first camera's frame
    ref = world_poses[0]
    to_ref_r = ref.rotation_c2w.T
    to_ref_t = -to_ref_r @ ref.translation_c2w
    centre_ref = to_ref_t
    poses, pmaps, nmaps, masks = [], [], [], []
    for wp in world_poses:
        pose = CameraPose(to_ref_r @ wp.rotation_c2w, to_ref_r @ wp.translation_c2w + to_ref_t,
                          wp.fx, wp.fy, wp.cx, wp.cy)
        pts, n_cam, mask = render_sphere_view(pose, size, size, radius, centre_ref)
        poses.append(pose)
        pmaps.append(pts)
        nmaps.append(n_cam)
        masks.append(mask)
    return poses, pmaps, nmaps, masks


def random_body_params(model: BodyModel, rng: np.random.Generator, max_angle: float = 0.3,
                       shape_scale: float = 0.5):
    from .body import BodyParams

    axes = rng.normal(size=(model.n_joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    pose = axes * rng.uniform(0.0, max_angle, size=(model.n_joints, 1))
    return BodyParams(pose, rng.normal(scale=shape_scale, size=model.n_shape),
                      rng.normal(scale=0.1, size=3), float(rng.uniform(0.8, 1.2)))


def body_prediction_views(model: BodyModel, params, n_views: int = 2, per_marker: int = 3, seed: int = 0):
    """Prediction maps whose inner points land exactly on the posed markers.

    Each view is a ``per_marker x n_markers`` image; column ``k`` holds pixels
    labelled ``k`` whose clothed points sit off the marker along a random
    direction, with the tightness vector pointing back onto it. One pixel per
    view is masked out to exercise masking.
    """
    from .body import model_markers
    from .geometry import PredictionSet

    rng = np.random.default_rng(seed)
    targets = model_markers(model, params).positions
    K = model.n_markers
    pmaps, masks, dirs, mags, probs, confs = [], [], [], [], [], []
    for _ in range(n_views):
        d = rng.normal(size=(per_marker, K, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        b = rng.uniform(0.005, 0.05, size=(per_marker, K))
        pmaps.append(targets[None] - b[..., None] * d)
        dirs.append(d)
        mags.append(b)
        p = np.full((per_marker, K, K), 0.1 / (K - 1))
        p[:, np.arange(K), np.arange(K)] = 0.9
        probs.append(p)
        confs.append(rng.uniform(0.5, 1.0, size=(per_marker, K, K)))
        m = np.ones((per_marker, K), dtype=bool)
        m[0, 0] = False
        masks.append(m)
    return PredictionSet(pmaps, masks, tightness_dirs=dirs, tightness_mags=mags,
                         label_probs=probs, label_confs=confs)


def pnp_scenario(n: int = 200, outlier_frac: float = 0.3, cx_offset: float = 40.0, seed: int = 0,
                 noise_px: float = 0.0):
    """Correspondences seen by a 640×480 pinhole whose principal point is shifted by ``cx_offset``.

    Returns ``(points2d, points3d, camera, outlier_index)``; outliers get
    uniformly random pixels.
    """
    rng = np.random.default_rng(seed)
    cam = CameraPose(rodrigues(np.array([0.2, -0.3, 0.1])), [0.3, -0.2, -3.0], 600.0, 620.0,
                     320.0 + cx_offset, 240.0)
    pc = np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.uniform(2.5, 4.0, n)])
    pw = pc @ cam.rotation_c2w.T + cam.translation_c2w
    uv = cam.project(pw) + rng.normal(scale=noise_px, size=(n, 2)) if noise_px else cam.project(pw)
    n_out = int(round(outlier_frac * n))
    idx = np.sort(rng.choice(n, n_out, replace=False))
    uv[idx] = rng.uniform([0, 0], [640, 480], (n_out, 2))
    return uv, pw, cam, idx
