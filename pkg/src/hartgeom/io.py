"""Readers and writers for every artifact the pipeline touches.

HTF1 tensor layout (little-endian)::

    b"HTF1" | dtype code u8 | ndim u8 | 6 zero bytes | ndim x u64 dims | payload

Dtype codes: 0 = f32, 1 = u8, 2 = u32.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import (BadMagic, MissingField, NonTriangleFace, NotARotation, TruncatedFile,
                     UnsupportedDtype, UnsupportedElement)
from .geometry import CameraPose, TriangleMesh

HTF_MAGIC = b"HTF1"
HTF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<u4")}
_HTF_CODES = {v.name: k for k, v in HTF_DTYPES.items()}
_HTF_PREFIX = 12
MAX_NDIM = 6


# -- tensors -----------------------------------------------------------------

def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0:
        raise ValueError("tensor must have at least one dimension")
    if t.ndim > MAX_NDIM:
        raise ValueError(f"tensor has {t.ndim} dimensions, at most {MAX_NDIM} supported")
    code = _HTF_CODES.get(t.dtype.name)
    if code is None:
        raise UnsupportedDtype(f"dtype {t.dtype} is not one of f32, u8, u32")
    header = HTF_MAGIC + struct.pack("<BB6x", code, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=HTF_DTYPES[code]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Decode one HTF tensor starting at ``offset``.

    Returns ``(array, end_offset)``.
    """
    if len(buf) - offset < _HTF_PREFIX:
        raise TruncatedFile(f"header truncated at byte offset {len(buf)} (need {offset + _HTF_PREFIX})")
    if buf[offset:offset + 4] != HTF_MAGIC:
        raise BadMagic(f"bad magic {buf[offset:offset + 4]!r} at byte offset {offset}")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in HTF_DTYPES:
        raise UnsupportedDtype(f"dtype code {code} at byte offset {offset + 4}")
    if not 1 <= ndim <= MAX_NDIM:
        raise UnsupportedDtype(f"ndim {ndim} at byte offset {offset + 5} outside [1, {MAX_NDIM}]")
    pos = offset + _HTF_PREFIX
    if len(buf) < pos + 8 * ndim:
        raise TruncatedFile(f"shape truncated at byte offset {len(buf)} (need {pos + 8 * ndim})")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = HTF_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedFile(f"payload truncated at byte offset {len(buf)} (need {pos + nbytes})")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.copy(), pos + nbytes


def write_tensor(path, t: np.ndarray) -> None:
    data = tensor_to_bytes(t)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, _ = tensor_from_bytes(buf)
    return arr


def read_tensor_dir(directory) -> list:
    """Read ``000.htf, 001.htf, ...`` from a directory in view order."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".htf"))
    if not names:
        raise FileNotFoundError(f"no .htf files in {directory}")
    return [read_tensor(os.path.join(directory, n)) for n in names]


def write_tensor_dir(directory, tensors) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, t in enumerate(tensors):
        write_tensor(os.path.join(directory, f"{i:03d}.htf"), t)


# -- meshes ------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise BadMagic("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise TruncatedFile("PLY header not terminated")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise UnsupportedElement(f"PLY format {fmt!r} not supported")
    return fmt, elements


def read_ply_elements(path):
    """Return the parsed PLY header and a dict of element name -> structured array.

    Face lists are returned as an ``(F, 3)`` integer array under ``"face"``.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()
    out = {}
    pos = 0
    ascii_rows = body.decode("ascii").split("\n") if fmt == "ascii" else None
    row = 0
    for el in elements:
        if el["name"] not in ("vertex", "face"):
            raise UnsupportedElement(f"PLY element {el['name']!r}")
        lists = [p for p in el["props"] if p[1] == "list"]
        if el["name"] == "face":
            if len(lists) != 1 or len(el["props"]) != 1 or lists[0][0] not in ("vertex_indices", "vertex_index"):
                raise UnsupportedElement("face element must hold a single vertex_indices list")
            _, _, ctype, itype = lists[0]
            n = el["count"]
            if fmt == "ascii":
                faces = []
                for k in range(n):
                    vals = [int(x) for x in ascii_rows[row + k].split()]
                    if vals[0] != 3:
                        raise NonTriangleFace(f"face {k} has {vals[0]} vertices")
                    faces.append(vals[1:4])
                row += n
                out["face"] = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
                continue
            dt = np.dtype([("n", "<" + ctype), ("idx", "<" + itype, (3,))])
            need = n * dt.itemsize
            if len(body) < pos + need:
                # a short buffer can also mean wider (non-triangle) faces
                cnt = np.frombuffer(body, dtype="<" + ctype, count=1, offset=pos) if len(body) > pos else []
                if len(cnt) and cnt[0] != 3:
                    raise NonTriangleFace(f"face 0 has {int(cnt[0])} vertices")
                raise TruncatedFile(f"face data truncated at byte offset {len(body)}")
            arr = np.frombuffer(body, dtype=dt, count=n, offset=pos)
            bad = np.nonzero(arr["n"] != 3)[0]
            if len(bad):
                raise NonTriangleFace(f"face {int(bad[0])} has {int(arr['n'][bad[0]])} vertices")
            pos += need
            out["face"] = arr["idx"].astype(np.int64)
        else:
            if lists:
                raise UnsupportedElement("list properties on vertices are not supported")
            dt = np.dtype([(name, "<" + t) for name, t in el["props"]])
            n = el["count"]
            if fmt == "ascii":
                vals = np.array([ascii_rows[row + k].split() for k in range(n)], dtype=np.float64)
                row += n
                arr = np.zeros(n, dtype=dt)
                for j, (name, _) in enumerate(el["props"]):
                    arr[name] = vals[:, j]
            else:
                need = n * dt.itemsize
                if len(body) < pos + need:
                    raise TruncatedFile(f"vertex data truncated at byte offset {len(body)}")
                arr = np.frombuffer(body, dtype=dt, count=n, offset=pos).copy()
                pos += need
            out["vertex"] = arr
    return elements, out


def _read_ply(path) -> TriangleMesh:
    _, data = read_ply_elements(path)
    if "vertex" not in data:
        raise MissingField("PLY has no vertex element")
    v = data["vertex"]
    for c in "xyz":
        if c not in v.dtype.names:
            raise MissingField(f"PLY vertex element lacks property {c!r}")
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in v.dtype.names for c in ("red", "green", "blue")):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    faces = data.get("face", np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(vertices, faces, colors)


def _read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise NonTriangleFace(f"OBJ face with {len(tok) - 1} vertices")
                idx = [int(x.split("/")[0]) for x in tok[1:]]
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> TriangleMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return _read_obj(path)
    return _read_ply(path)


def write_mesh(path, mesh: TriangleMesh) -> None:
    """Write binary little-endian PLY (or ASCII OBJ for a ``.obj`` path)."""
    if os.path.splitext(str(path))[1].lower() == ".obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
        return
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vert = np.zeros(len(mesh.vertices), dtype=fields)
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    if mesh.colors is not None:
        rgb = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = rgb.T
    face = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face["n"] = 3
    face["idx"] = mesh.faces
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vert)}"]
    lines += [f"property float {c}" for c in "xyz"]
    if mesh.colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    lines += [f"element face {len(face)}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(vert.tobytes())
        fh.write(face.tobytes())


def read_points(path) -> np.ndarray:
    """Load an N×3 point array from an HTF tensor, PLY or OBJ file."""
    if str(path).endswith(".htf"):
        return np.asarray(read_tensor(path), dtype=np.float64).reshape(-1, 3)
    return read_mesh(path).vertices


# -- cameras -----------------------------------------------------------------

def nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def camera_from_dict(d: dict, tol: float = 1e-4) -> CameraPose:
    for key in ("rotation", "translation", "fx", "fy", "cx", "cy"):
        if key not in d:
            raise MissingField(f"camera entry lacks {key!r}")
    r = np.asarray(d["rotation"], dtype=np.float64)
    if r.size != 9 or np.asarray(d["translation"]).size != 3:
        raise MissingField("rotation needs 9 numbers and translation 3")
    r = r.reshape(3, 3)
    det = np.linalg.det(r)
    if det <= 0:
        raise NotARotation(f"rotation determinant {det:.6g} is not positive")
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise NotARotation(f"rotation is not orthonormal within {tol}")
    if float(d["fx"]) <= 0 or float(d["fy"]) <= 0:
        raise ValueError("focal lengths must be positive")
    return CameraPose(nearest_rotation(r), d["translation"], d["fx"], d["fy"], d["cx"], d["cy"])


def camera_to_dict(pose: CameraPose) -> dict:
    return {
        "rotation": pose.rotation_c2w.ravel().tolist(),
        "translation": pose.translation_c2w.tolist(),
        "fx": pose.fx, "fy": pose.fy, "cx": pose.cx, "cy": pose.cy,
    }


def read_camera_json(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise MissingField("camera file must hold a JSON array")
    return [camera_from_dict(d) for d in data]


def write_camera_json(path, poses, extra=None) -> None:
    """Write poses; ``extra`` is an optional list of per-pose dicts merged in."""
    out = []
    for i, p in enumerate(poses):
        d = camera_to_dict(p)
        if extra is not None:
            d.update(extra[i])
        out.append(d)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
