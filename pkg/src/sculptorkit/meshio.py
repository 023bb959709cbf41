"""Mesh and landmark file I/O.

Formats: ASCII OBJ (v/vt/vn/f, 1-based indices) and binary little-endian PLY.
Landmarks are JSON arrays of {name, position, anchor?}; vertex groups are
JSON objects {group_name: [vertex indices]}.

Writers are deterministic: identical geometry yields identical bytes, and
floats are written with shortest round-trip representation so a save/load
cycle is lossless.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedFormat
from .mesh import LandmarkSet, TriMesh


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# OBJ

def mesh_to_obj_bytes(mesh: TriMesh) -> bytes:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    if mesh.uvs is not None:
        for uv in mesh.uvs:
            lines.append(f"vt {_fmt(uv[0])} {_fmt(uv[1])}")
    if mesh.normals is not None:
        for n in mesh.normals:
            lines.append(f"vn {_fmt(n[0])} {_fmt(n[1])} {_fmt(n[2])}")
    has_uv, has_n = mesh.uvs is not None, mesh.normals is not None
    for f in mesh.faces:
        a, b, c = (int(i) + 1 for i in f)
        if has_uv and has_n:
            lines.append(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}")
        elif has_uv:
            lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
        elif has_n:
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    return ("\n".join(lines) + "\n").encode("ascii")


def obj_bytes_to_mesh(data: bytes, path: str = "<obj>") -> TriMesh:
    verts, uvs, normals, faces = [], [], [], []
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError("uv needs 2 coordinates")
                uvs.append([float(parts[1]), float(parts[2])])
            elif tag == "vn":
                if len(parts) < 4:
                    raise ValueError("normal needs 3 coordinates")
                normals.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "f":
                if len(parts) < 4:
                    raise ValueError("face needs 3 vertices")
                idx = [int(p.split("/")[0]) for p in parts[1:4]]
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            # other tags (o, s, g, mtllib, usemtl, ...) are ignored
        except ValueError as exc:
            raise ParseError(str(exc), path=path, line=lineno) from exc
    if not verts:
        raise ParseError("no vertices found", path=path, line=None)
    v = np.array(verts)
    return TriMesh(
        v,
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(normals) if len(normals) == len(verts) else None,
        np.array(uvs) if len(uvs) == len(verts) else None,
    )


# ---------------------------------------------------------------------------
# PLY (binary little-endian)

_PLY_TYPES = {
    "char": "b", "uchar": "B", "int8": "b", "uint8": "B",
    "short": "h", "ushort": "H", "int16": "h", "uint16": "H",
    "int": "i", "uint": "I", "int32": "i", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def mesh_to_ply_bytes(mesh: TriMesh) -> bytes:
    props = ["property double x", "property double y", "property double z"]
    cols = [mesh.vertices]
    if mesh.normals is not None:
        props += ["property double nx", "property double ny", "property double nz"]
        cols.append(mesh.normals)
    if mesh.uvs is not None:
        props += ["property double s", "property double t"]
        cols.append(mesh.uvs)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n" + "\n".join(props) + "\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    vdata = np.concatenate(cols, axis=1).astype("<f8").tobytes()
    fbuf = bytearray()
    for f in mesh.faces:
        fbuf += struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2]))
    return header.encode("ascii") + vdata + bytes(fbuf)


def ply_bytes_to_mesh(data: bytes, path: str = "<ply>") -> TriMesh:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing header)", path=path, line=1)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    elements = []  # (name, count, [(prop_name, fmt) or ('list', count_fmt, item_fmt, name)])
    fmt_ok = False
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise UnsupportedFormat(f"unsupported PLY format '{parts[1]}' (binary little-endian only)")
            fmt_ok = True
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", path=path, line=lineno)
            if parts[1] == "list":
                elements[-1]["props"].append(("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]], parts[4]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown property type '{parts[1]}'", path=path, line=lineno)
                elements[-1]["props"].append(("scalar", _PLY_TYPES[parts[1]], parts[2]))
    if not fmt_ok:
        raise ParseError("missing format line", path=path, line=1)

    offset = 0
    vertices = normals = uvs = None
    faces = []
    try:
        for elem in elements:
            if elem["name"] == "vertex" and all(p[0] == "scalar" for p in elem["props"]):
                fmt = "<" + "".join(p[1] for p in elem["props"])
                size = struct.calcsize(fmt)
                rows = []
                for _ in range(elem["count"]):
                    rows.append(struct.unpack_from(fmt, body, offset))
                    offset += size
                arr = np.array(rows, dtype=np.float64)
                names = [p[2] for p in elem["props"]]
                def col(n):
                    return arr[:, names.index(n)] if n in names else None
                vertices = np.stack([col("x"), col("y"), col("z")], axis=1)
                if all(col(n) is not None for n in ("nx", "ny", "nz")):
                    normals = np.stack([col("nx"), col("ny"), col("nz")], axis=1)
                if all(col(n) is not None for n in ("s", "t")):
                    uvs = np.stack([col("s"), col("t")], axis=1)
                elif all(col(n) is not None for n in ("u", "v")):
                    uvs = np.stack([col("u"), col("v")], axis=1)
            else:
                for _ in range(elem["count"]):
                    for p in elem["props"]:
                        if p[0] == "list":
                            (n,) = struct.unpack_from("<" + p[1], body, offset)
                            offset += struct.calcsize(p[1])
                            items = struct.unpack_from("<" + p[2] * n, body, offset)
                            offset += struct.calcsize(p[2]) * n
                            if elem["name"] == "face":
                                if n != 3:
                                    raise UnsupportedFormat("only triangle faces are supported")
                                faces.append(items)
                        else:
                            offset += struct.calcsize(p[1])
    except struct.error as exc:
        raise ParseError(f"truncated binary payload ({exc})", path=path, line=None) from exc
    if vertices is None:
        raise ParseError("no vertex element", path=path, line=None)
    return TriMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3), normals, uvs)


# ---------------------------------------------------------------------------
# dispatch

def save_mesh(mesh: TriMesh, path: str | Path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        data = mesh_to_obj_bytes(mesh)
    elif suffix == ".ply":
        data = mesh_to_ply_bytes(mesh)
    else:
        raise UnsupportedFormat(f"unsupported mesh format '{suffix}' (use .obj or .ply)")
    path.write_bytes(data)


def load_mesh(path: str | Path) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    data = path.read_bytes()
    if suffix == ".obj":
        return obj_bytes_to_mesh(data, path=str(path))
    if suffix == ".ply":
        return ply_bytes_to_mesh(data, path=str(path))
    raise UnsupportedFormat(f"unsupported mesh format '{suffix}' (use .obj or .ply)")


# ---------------------------------------------------------------------------
# landmarks and vertex groups

def save_landmarks(lmk: LandmarkSet, path: str | Path) -> None:
    entries = []
    for name, pos, anchor in zip(lmk.names, lmk.positions, lmk.anchors):
        e = {"name": name, "position": [float(pos[0]), float(pos[1]), float(pos[2])]}
        if anchor is not None:
            e["anchor"] = int(anchor)
        entries.append(e)
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")


def load_landmarks(path: str | Path) -> LandmarkSet:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=str(path), line=exc.lineno) from exc
    names = [e["name"] for e in entries]
    positions = np.array([e["position"] for e in entries], dtype=np.float64).reshape(-1, 3)
    anchors = [e.get("anchor") for e in entries]
    return LandmarkSet(names, positions, anchors)


def save_vertex_groups(groups: dict[str, list[int]], path: str | Path) -> None:
    payload = {k: [int(i) for i in v] for k, v in groups.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_vertex_groups(path: str | Path) -> dict[str, np.ndarray]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=str(path), line=exc.lineno) from exc
    return {k: np.asarray(v, dtype=np.int64) for k, v in payload.items()}
