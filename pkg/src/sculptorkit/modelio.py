"""Model container serialization.

A model is stored as a directory (or a single `.sculptor` zip archive) holding
`manifest.json` plus named little-endian raw blobs: float32 `.f32` and int32
`.i32` arrays, and an optional 8-bit PNG mean texture. The manifest records
ranks, vertex counts, part ranges, the format version and per-blob sha256
checksums.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.sparse import csr_matrix

from .errors import ChecksumFailure, VersionMismatch
from .mesh import LandmarkSet
from .model import SculptorModel

FORMAT_VERSION = 1


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _i32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<i4").tobytes()


def _model_blobs(model: SculptorModel) -> dict[str, bytes]:
    blobs = {
        "template_vertices.f32": _f32(model.template_vertices),
        "shape_basis.f32": _f32(model.shape_basis),
        "trait_basis.f32": _f32(model.trait_basis),
        "expr_basis.f32": _f32(model.expr_basis),
        "pose_basis.f32": _f32(model.pose_basis),
        "skinning.f32": _f32(model.skinning),
        "sigma_beta.f32": _f32(model.sigma_beta),
        "sigma_gamma.f32": _f32(model.sigma_gamma),
        "sigma_phi.f32": _f32(model.sigma_phi),
        "sigma_alpha.f32": _f32(model.sigma_alpha),
    }
    for part, faces in model.faces_by_part.items():
        blobs[f"faces_{part}.i32"] = _i32(faces)
    jr = model.joint_regressor.tocoo()
    blobs["joint_regressor_rows.i32"] = _i32(jr.row)
    blobs["joint_regressor_cols.i32"] = _i32(jr.col)
    blobs["joint_regressor_vals.f32"] = _f32(jr.data)
    if model.face_uvs is not None:
        blobs["face_uvs.f32"] = _f32(model.face_uvs)
    if model.texture_basis is not None:
        blobs["texture_basis.f32"] = _f32(model.texture_basis)
    if model.mean_texture is not None:
        img = Image.fromarray(
            np.clip(np.round(model.mean_texture * 255.0), 0, 255).astype(np.uint8)
        )
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        blobs["mean_texture.png"] = buf.getvalue()
    return blobs


def _manifest(model: SculptorModel, blobs: dict[str, bytes]) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "ranks": {"beta": model.n_beta, "gamma": model.n_gamma,
                  "phi": model.n_phi, "alpha": model.n_alpha},
        "vertex_count": model.n_vertices,
        "part_ranges": {k: list(v) for k, v in model.part_ranges.items()},
        "face_counts": {k: int(len(v)) for k, v in model.faces_by_part.items()},
        "texture_shape": None if model.mean_texture is None else list(model.mean_texture.shape),
        "trait_axis_names": list(model.trait_axis_names),
        "landmarks": None if model.landmarks is None else [
            {"name": n, "position": p.tolist(), **({"anchor": int(a)} if a is not None else {})}
            for n, p, a in zip(model.landmarks.names, model.landmarks.positions,
                               model.landmarks.anchors)
        ],
        "vertex_groups": {k: np.asarray(v).astype(int).tolist()
                          for k, v in model.vertex_groups.items()},
        "checksums": {name: _sha256(data) for name, data in sorted(blobs.items())},
    }


def save_model(model: SculptorModel, path: str | Path) -> None:
    """Write the container; `.sculptor`/`.zip` suffix selects the archive form."""
    path = Path(path)
    blobs = _model_blobs(model)
    manifest = json.dumps(_manifest(model, blobs), indent=2, sort_keys=True).encode()
    if path.suffix in (".sculptor", ".zip"):
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", manifest)
            for name, data in sorted(blobs.items()):
                zf.writestr(name, data)
    else:
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_bytes(manifest)
        for name, data in blobs.items():
            (path / name).write_bytes(data)


def _read_container(path: Path) -> dict[str, bytes]:
    if path.is_dir():
        return {p.name: p.read_bytes() for p in path.iterdir() if p.is_file()}
    with zipfile.ZipFile(path) as zf:
        return {info.filename: zf.read(info) for info in zf.infolist()}


def load_model(path: str | Path) -> SculptorModel:
    path = Path(path)
    files = _read_container(path)
    if "manifest.json" not in files:
        raise VersionMismatch("not a model container: missing manifest.json")
    manifest = json.loads(files["manifest.json"])
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported container version {version!r}")
    for name, digest in manifest["checksums"].items():
        if name not in files:
            raise ChecksumFailure(f"missing blob {name}")
        if _sha256(files[name]) != digest:
            raise ChecksumFailure(f"checksum mismatch for {name}")

    N = manifest["vertex_count"]
    ranks = manifest["ranks"]

    def f32(name, shape):
        return np.frombuffer(files[name], dtype="<f4").astype(np.float64).reshape(shape)

    def i32(name, shape):
        return np.frombuffer(files[name], dtype="<i4").astype(np.int64).reshape(shape)

    part_ranges = {k: tuple(v) for k, v in manifest["part_ranges"].items()}
    faces_by_part = {k: i32(f"faces_{k}.i32", (-1, 3)) for k in part_ranges}
    n_skull = part_ranges["maxilla"][1] - part_ranges["mandible"][0]
    jr = csr_matrix(
        (f32("joint_regressor_vals.f32", (-1,)),
         (i32("joint_regressor_rows.i32", (-1,)), i32("joint_regressor_cols.i32", (-1,)))),
        shape=(3, 3 * n_skull),
    )
    n_face = part_ranges["face"][1] - part_ranges["face"][0]

    mean_texture = texture_basis = None
    if "mean_texture.png" in files:
        img = Image.open(io.BytesIO(files["mean_texture.png"])).convert("RGB")
        mean_texture = np.asarray(img, dtype=np.float64) / 255.0
    if "texture_basis.f32" in files and mean_texture is not None:
        texture_basis = f32("texture_basis.f32", (mean_texture.size, ranks["alpha"]))

    landmarks = None
    if manifest.get("landmarks"):
        entries = manifest["landmarks"]
        landmarks = LandmarkSet(
            [e["name"] for e in entries],
            np.array([e["position"] for e in entries], dtype=np.float64),
            [e.get("anchor") for e in entries],
        )

    return SculptorModel(
        template_vertices=f32("template_vertices.f32", (N, 3)),
        faces_by_part=faces_by_part,
        part_ranges=part_ranges,
        shape_basis=f32("shape_basis.f32", (3 * N, ranks["beta"])),
        trait_basis=f32("trait_basis.f32", (3 * N, ranks["gamma"])),
        expr_basis=f32("expr_basis.f32", (3 * n_face, ranks["phi"])),
        pose_basis=f32("pose_basis.f32", (3 * N, 12)),
        skinning=f32("skinning.f32", (N, 2)),
        joint_regressor=jr,
        sigma_beta=f32("sigma_beta.f32", (-1,)),
        sigma_gamma=f32("sigma_gamma.f32", (-1,)),
        sigma_phi=f32("sigma_phi.f32", (-1,)),
        sigma_alpha=f32("sigma_alpha.f32", (-1,)),
        mean_texture=mean_texture,
        texture_basis=texture_basis,
        face_uvs=f32("face_uvs.f32", (n_face, 2)) if "face_uvs.f32" in files else None,
        trait_axis_names=list(manifest.get("trait_axis_names", [])),
        landmarks=landmarks,
        vertex_groups={k: np.asarray(v, dtype=np.int64)
                       for k, v in manifest.get("vertex_groups", {}).items()},
    )
