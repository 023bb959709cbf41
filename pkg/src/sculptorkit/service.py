"""Local HTTP generation service backing the editor UI.

Loads one immutable model and serves metadata, head generation and scan
fitting. Responses are deterministic: identical requests produce byte-
identical payloads, so the UI and the CLI can cross-check geometry exactly.
"""
from __future__ import annotations

import base64
import io
import json
import struct
import threading

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from .errors import ParseError, SculptorError, UnsupportedFormat
from .fitting import FitPriors, fit_to_scan
from .meshio import mesh_to_obj_bytes, obj_bytes_to_mesh, ply_bytes_to_mesh
from .model import ParamVector, SculptorModel, THETA_DIM, generate

MAX_UPLOAD_BYTES = 16 * 1024 * 1024
CLAMP_SIGMA = 6.0
FORMATS = ("obj", "binary", "json-geometry")


def head_obj_bytes(head) -> bytes:
    """Canonical OBJ serialization of a generated head (CLI and HTTP share it)."""
    return mesh_to_obj_bytes(head.full_mesh())


def head_binary_bytes(head) -> bytes:
    """Compact little-endian container: positions f32, faces u32, uv f32, PNG."""
    mesh = head.full_mesh()
    model = head.model
    lo_f, hi_f = model.face_range
    uv = np.zeros((mesh.n_vertices, 2), dtype="<f4")
    if model.face_uvs is not None:
        uv[lo_f:hi_f] = model.face_uvs
    png = b""
    if head.texture is not None:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.clip(np.round(head.texture * 255), 0, 255).astype(np.uint8)
                        ).save(buf, format="PNG")
        png = buf.getvalue()
    out = bytearray()
    out += b"SCLP"
    out += struct.pack("<III", 1, mesh.n_vertices, mesh.n_faces)
    out += struct.pack("<I", len(png))
    out += np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes()
    out += np.ascontiguousarray(mesh.faces, dtype="<u4").tobytes()
    out += uv.tobytes()
    out += struct.pack("<fff", *head.jaw_joint)
    out += png
    return bytes(out)


def head_json_payload(head, warnings: list[str]) -> bytes:
    mesh = head.full_mesh()
    model = head.model
    lo_f, hi_f = model.face_range
    uv = np.zeros((mesh.n_vertices, 2))
    if model.face_uvs is not None:
        uv[lo_f:hi_f] = model.face_uvs
    texture_b64 = None
    if head.texture is not None:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.clip(np.round(head.texture * 255), 0, 255).astype(np.uint8)
                        ).save(buf, format="PNG")
        texture_b64 = base64.b64encode(buf.getvalue()).decode("ascii")
    payload = {
        "positions": np.round(mesh.vertices, 9).ravel().tolist(),
        "faces": mesh.faces.ravel().tolist(),
        "uv": np.round(uv, 9).ravel().tolist(),
        "jaw_joint": np.round(head.jaw_joint, 9).tolist(),
        "part_ranges": {k: list(v) for k, v in model.part_ranges.items()},
        "texture_png_base64": texture_b64,
        "warnings": warnings,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def _parse_params(model: SculptorModel, raw: dict) -> tuple[ParamVector, list[str]]:
    sizes = {"beta": model.n_beta, "gamma": model.n_gamma, "theta": THETA_DIM,
             "phi": model.n_phi, "alpha": model.n_alpha}
    params = ParamVector.zeros(model)
    warnings: list[str] = []
    for name, size in sizes.items():
        if name not in raw or raw[name] is None:
            continue
        arr = np.asarray(raw[name], dtype=np.float64).ravel()
        if arr.size > size:
            raise HTTPException(400, f"{name} has {arr.size} entries, model rank is {size}")
        if not np.all(np.isfinite(arr)):
            raise HTTPException(422, f"{name} contains non-finite values")
        getattr(params, name)[: arr.size] = arr
    sigmas = {"beta": model.sigma_beta, "gamma": model.sigma_gamma,
              "phi": model.sigma_phi, "alpha": model.sigma_alpha}
    for name, sigma in sigmas.items():
        vec = getattr(params, name)
        if not vec.size or not sigma.size:
            continue
        bound = CLAMP_SIGMA * sigma
        if np.any(np.abs(vec) > bound + 1e-12):
            np.clip(vec, -bound, bound, out=vec)
            warnings.append(f"{name} clamped to +/- {CLAMP_SIGMA} sigma")
    return params, warnings


def create_app(model: SculptorModel | None = None, model_path: str | None = None,
               fit_workers: int | None = None) -> FastAPI:
    app = FastAPI(title="head-model service")
    app.add_middleware(
        CORSMiddleware,
        allow_origin_regex=r"https?://(localhost|127\.0\.0\.1)(:\d+)?",
        allow_methods=["*"],
        allow_headers=["*"],
    )
    state = {"model": model}
    if model is None and model_path is not None:
        try:
            from .modelio import load_model

            state["model"] = load_model(model_path)
        except Exception:
            state["model"] = None
    import os

    workers = fit_workers or os.cpu_count() or 1
    fit_slots = threading.Semaphore(workers)

    def require_model() -> SculptorModel:
        if state["model"] is None:
            raise HTTPException(503, "no model loaded")
        return state["model"]

    @app.get("/model/meta")
    def model_meta():
        m = require_model()
        return Response(json.dumps(m.meta(), sort_keys=True), media_type="application/json")

    @app.post("/generate")
    async def generate_head(request: Request):
        m = require_model()
        try:
            body = json.loads(await request.body() or b"{}")
        except json.JSONDecodeError as exc:
            raise HTTPException(400, f"invalid JSON body: {exc}")
        fmt = body.get("format", "json-geometry")
        if fmt not in FORMATS:
            raise HTTPException(400, f"unknown format {fmt!r}; use one of {FORMATS}")
        params, warnings = _parse_params(m, body.get("params", {}))
        want_texture = bool(body.get("want_texture", True))
        head = generate(m, params, want_texture=want_texture)
        headers = {"X-Clamped": "; ".join(warnings)} if warnings else {}
        if fmt == "obj":
            return Response(head_obj_bytes(head), media_type="text/plain; charset=ascii",
                            headers=headers)
        if fmt == "binary":
            return Response(head_binary_bytes(head), media_type="application/octet-stream",
                            headers=headers)
        return Response(head_json_payload(head, warnings), media_type="application/json")

    @app.post("/fit")
    async def fit_scan(request: Request):
        m = require_model()
        body = await request.body()
        if len(body) > MAX_UPLOAD_BYTES:
            raise HTTPException(413, f"upload exceeds {MAX_UPLOAD_BYTES} bytes")
        try:
            if body.lstrip().startswith(b"ply"):
                mesh = ply_bytes_to_mesh(body)
            else:
                mesh = obj_bytes_to_mesh(body.decode("utf-8", errors="strict").encode())
        except (ParseError, UnsupportedFormat, UnicodeDecodeError) as exc:
            raise HTTPException(400, f"cannot parse uploaded mesh: {exc}")
        with fit_slots:
            try:
                # small pose prior resolves the jaw-translation/protrusion
                # near-degeneracy of face-only uploads
                result = fit_to_scan(m, target_face=mesh,
                                     priors=FitPriors(1e-9, 1e-9, 1e-9,
                                                      lambda_theta=1e-3),
                                     max_iter=1500)
            except SculptorError as exc:
                raise HTTPException(400, str(exc))
        payload = {
            "params": result.params.to_dict(),
            "msve": result.msve,
            "energy": result.energy,
            "iterations": result.iterations,
        }
        return Response(json.dumps(payload, sort_keys=True), media_type="application/json")

    return app


def serve(model_path: str, host: str = "127.0.0.1", port: int = 7461):
    import uvicorn

    from .modelio import load_model

    app = create_app(load_model(model_path))
    uvicorn.run(app, host=host, port=port, log_level="warning")
