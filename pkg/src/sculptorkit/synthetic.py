"""Deterministic synthetic head worlds.

A procedural low-poly head (ellipsoid face shell plus interior offset-shell
maxilla and hinged mandible with condyle groups) carries a fabricated
ground-truth model: smooth polynomial blend-shape fields, mandible-localized
trait fields, mouth-localized expressions, a soft jaw skinning band and a
small texture space. Corpora sampled from it supply the oracle for every
registration, learning and application test; every record keeps its
generating parameters for verification only.

Generation is single-threaded and byte-reproducible per (seed, config).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learning import SubjectRecord, save_corpus
from .mesh import LandmarkSet, TriMesh
from .model import (
    ParamVector,
    SculptorModel,
    condyle_joint_regressor,
    generate,
    personalize,
    synthesize_texture,
)

RADII = np.array([70.0, 90.0, 80.0])   # x (width), y (height), z (depth), mm
SKULL_GAP = 10.0                       # constant face-to-skull offset, mm

TIERS = {
    "tiny": {"lat": 10, "lon": 12, "tex": 16,
             "ranks": {"beta": 4, "gamma": 3, "phi": 2, "alpha": 2}},
    "small": {"lat": 16, "lon": 20, "tex": 32,
              "ranks": {"beta": 6, "gamma": 4, "phi": 3, "alpha": 3}},
    "medium": {"lat": 24, "lon": 30, "tex": 48,
               "ranks": {"beta": 8, "gamma": 5, "phi": 4, "alpha": 4}},
}

SPLIT_DEG = 108.0    # jawline latitude separating maxilla and mandible shells
BAND_START, BAND_END = 108.0, 132.0   # soft skinning band on the face


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _window(x, lo, hi, soft):
    """Smooth indicator of [lo, hi] with `soft` degrees of falloff."""
    up = _smoothstep((x - (lo - soft)) / soft)
    down = 1.0 - _smoothstep((x - hi) / soft)
    return up * down


class _SphereGrid:
    """Lat-long grid on the head ellipsoid; angles are kept for masks."""

    def __init__(self, n_lat: int, n_lon: int):
        self.n_lat, self.n_lon = n_lat, n_lon
        lat, lon = [0.0], [0.0]
        for i in range(1, n_lat):
            for j in range(n_lon):
                lat.append(180.0 * i / n_lat)
                lon.append(360.0 * j / n_lon - 180.0)
        lat.append(180.0)
        lon.append(0.0)
        self.lat = np.array(lat)
        self.lon = np.array(lon)
        th = np.deg2rad(self.lat)
        ph = np.deg2rad(self.lon)
        # lon 0 faces +z (front of the head)
        self.unit = np.stack(
            [np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)], axis=1
        )
        self.vertices = self.unit * RADII
        self.normals = self._ellipsoid_normals()
        self.faces = self._triangulate()

    def _ellipsoid_normals(self):
        n = self.vertices / (RADII ** 2)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def _triangulate(self):
        L, M = self.n_lat, self.n_lon
        faces = []
        ring = lambda i, j: 1 + (i - 1) * M + (j % M)
        for j in range(M):
            faces.append([0, ring(1, j), ring(1, j + 1)])
        for i in range(1, L - 1):
            for j in range(M):
                a, b = ring(i, j), ring(i, j + 1)
                c, d = ring(i + 1, j), ring(i + 1, j + 1)
                faces.append([a, d, b])
                faces.append([a, c, d])
        last = len(self.vertices) - 1
        for j in range(M):
            faces.append([last, ring(L - 1, j + 1), ring(L - 1, j)])
        return np.array(faces, dtype=np.int64)

    def row_indices(self, ring_lo: int, ring_hi: int,
                    include_top: bool = False, include_bottom: bool = False) -> np.ndarray:
        """Vertex ids of rings ring_lo..ring_hi inclusive, optionally with poles."""
        ids = []
        if include_top:
            ids.append(0)
        for i in range(ring_lo, ring_hi + 1):
            ids.extend(range(1 + (i - 1) * self.n_lon, 1 + i * self.n_lon))
        if include_bottom:
            ids.append(len(self.vertices) - 1)
        return np.array(ids, dtype=np.int64)


def _subgrid_faces(grid: _SphereGrid, keep: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(grid.vertices), dtype=bool)
    mask[keep] = True
    remap = -np.ones(len(grid.vertices), dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    faces = grid.faces[mask[grid.faces].all(axis=1)]
    return remap[faces]


def _nearest_grid_vertex(grid: _SphereGrid, lat_deg: float, lon_deg: float) -> int:
    th, ph = np.deg2rad(lat_deg), np.deg2rad(lon_deg)
    p = np.array([np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)])
    return int(((grid.unit - p) ** 2).sum(axis=1).argmin())


_SKELETAL_LANDMARKS = [
    ("mdb_condyle_l", 112.0, -90.0, "mandible"),
    ("mdb_condyle_r", 112.0, 90.0, "mandible"),
    ("mdb_gonion_l", 150.0, -70.0, "mandible"),
    ("mdb_gonion_r", 150.0, 70.0, "mandible"),
    ("mdb_pogonion", 150.0, 0.0, "mandible"),
    ("mdb_menton", 170.0, 0.0, "mandible"),
    ("mxl_prosthion", 104.0, 0.0, "maxilla"),
    ("mxl_zygoma_l", 80.0, -55.0, "maxilla"),
    ("mxl_zygoma_r", 80.0, 55.0, "maxilla"),
    ("mxl_nasion", 68.0, 0.0, "maxilla"),
    ("mxl_vertex", 6.0, 0.0, "maxilla"),
]

_FACIAL_LANDMARKS = [
    ("face_pronasale", 95.0, 0.0),
    ("face_menton", 162.0, 0.0),
    ("face_cheek_l", 110.0, -52.0),
    ("face_cheek_r", 110.0, 52.0),
    ("face_zygion_l", 85.0, -80.0),
    ("face_zygion_r", 85.0, 80.0),
    ("face_brow_l", 62.0, -25.0),
    ("face_brow_r", 62.0, 25.0),
    ("face_forehead", 40.0, 0.0),
]


def make_template(tier: str = "tiny") -> SculptorModel:
    """Procedural head: mandible and maxilla as interior offset shells of the
    face ellipsoid, hinged at condyle groups, with valid part ranges, skinning,
    joint regressor, landmarks and vertex groups. Blend-shape bases are empty.
    """
    if tier not in TIERS:
        raise ValueError(f"unknown tier '{tier}' (have {sorted(TIERS)})")
    spec = TIERS[tier]
    grid = _SphereGrid(spec["lat"], spec["lon"])
    split_ring = round(SPLIT_DEG * spec["lat"] / 180.0)

    inner = grid.vertices - SKULL_GAP * grid.normals
    mdb_rows = grid.row_indices(split_ring, spec["lat"] - 1, include_bottom=True)
    mxl_rows = grid.row_indices(1, split_ring, include_top=True)

    v_mdb, f_mdb = inner[mdb_rows], _subgrid_faces(grid, mdb_rows)
    v_mxl, f_mxl = inner[mxl_rows], _subgrid_faces(grid, mxl_rows)
    v_face, f_face = grid.vertices, grid.faces

    n_mdb, n_mxl, n_face = len(v_mdb), len(v_mxl), len(v_face)
    offs = {"mandible": 0, "maxilla": n_mdb, "face": n_mdb + n_mxl}
    verts = _f32(np.concatenate([v_mdb, v_mxl, v_face]))
    part_ranges = {
        "mandible": (0, n_mdb),
        "maxilla": (n_mdb, n_mdb + n_mxl),
        "face": (n_mdb + n_mxl, n_mdb + n_mxl + n_face),
    }
    faces_by_part = {
        "mandible": f_mdb + offs["mandible"],
        "maxilla": f_mxl + offs["maxilla"],
        "face": f_face + offs["face"],
    }

    lat_mdb = grid.lat[mdb_rows]
    lon_mdb = grid.lon[mdb_rows]
    lat_all = np.concatenate([lat_mdb, grid.lat[mxl_rows], grid.lat])
    lon_all = np.concatenate([lon_mdb, grid.lon[mxl_rows], grid.lon])

    # skinning: skull parts hard, face band soft between the band latitudes
    N = len(verts)
    w = np.zeros(N)
    w[0:n_mdb] = 1.0
    lo_f = offs["face"]
    t = (lat_all[lo_f:] - BAND_START) / (BAND_END - BAND_START)
    w[lo_f:] = _smoothstep(t)
    w = _f32(w)
    w[0:n_mdb] = 1.0
    skinning = np.stack([1.0 - w, w], axis=1)

    # condyle groups: top mandible ring near lon = ±90
    top_ring = (np.abs(lat_mdb - (180.0 * split_ring / spec["lat"])) < 1e-9)
    def condyle(side):
        ids = np.where(top_ring)[0]
        score = np.abs(lon_mdb[ids] - side * 90.0)
        return ids[np.argsort(score)[:3]] + offs["mandible"]

    condyle_l, condyle_r = condyle(-1), condyle(+1)
    jr = condyle_joint_regressor(n_mdb + n_mxl, condyle_l, condyle_r)

    # landmarks anchored to nearest grid vertices
    names, pos, anch = [], [], []
    for name, lat, lon, part in _SKELETAL_LANDMARKS:
        local = _nearest_grid_vertex(grid, lat, lon)
        if part == "mandible":
            where = np.where(mdb_rows == local)[0]
            if not len(where):
                continue
            idx = int(where[0]) + offs["mandible"]
        else:
            where = np.where(mxl_rows == local)[0]
            if not len(where):
                continue
            idx = int(where[0]) + offs["maxilla"]
        names.append(name)
        anch.append(idx)
        pos.append(verts[idx])
    for name, lat, lon in _FACIAL_LANDMARKS:
        idx = _nearest_grid_vertex(grid, lat, lon) + offs["face"]
        names.append(name)
        anch.append(idx)
        pos.append(verts[idx])
    landmarks = LandmarkSet(names, np.array(pos), anch)

    # vertex groups (global indices)
    mxl_lat, mxl_lon = grid.lat[mxl_rows], grid.lon[mxl_rows]
    orbit = np.where((mxl_lat >= 54) & (mxl_lat <= 92)
                     & (np.abs(mxl_lon) >= 18) & (np.abs(mxl_lon) <= 62))[0] + offs["maxilla"]
    nasal = np.where((mxl_lat >= 80) & (mxl_lat <= 108) & (np.abs(mxl_lon) <= 17))[0] \
        + offs["maxilla"]
    face_lat, face_lon = grid.lat, grid.lon
    upper_face = np.where(face_lat < BAND_START)[0] + offs["face"]
    lower_face = np.where(face_lat >= BAND_START)[0] + offs["face"]
    jaw_ring = np.where(np.abs(face_lat - BAND_START) < (90.0 / spec["lat"]))[0] + offs["face"]
    cheek = _window(face_lat, 96, 134, 10) * (
        _window(face_lon, 42, 112, 12) + _window(face_lon, -112, -42, 12))
    cheek_l = np.where((cheek > 0.5) & (face_lon < 0))[0] + offs["face"]
    cheek_r = np.where((cheek > 0.5) & (face_lon > 0))[0] + offs["face"]
    groups = {
        "condyle_left": condyle_l, "condyle_right": condyle_r,
        "orbit": orbit, "nasal": nasal,
        "upper_face": upper_face, "lower_face": lower_face, "jawline": jaw_ring,
        "cheek_left": cheek_l, "cheek_right": cheek_r,
    }

    uvs = _f32(np.stack([(grid.lon + 180.0) / 360.0, 1.0 - grid.lat / 180.0], axis=1))

    return SculptorModel(
        template_vertices=verts,
        faces_by_part=faces_by_part,
        part_ranges=part_ranges,
        shape_basis=np.zeros((3 * N, 0)),
        trait_basis=np.zeros((3 * N, 0)),
        expr_basis=np.zeros((3 * n_face, 0)),
        pose_basis=np.zeros((3 * N, 12)),
        skinning=skinning,
        joint_regressor=jr,
        sigma_beta=np.zeros(0), sigma_gamma=np.zeros(0),
        sigma_phi=np.zeros(0), sigma_alpha=np.zeros(0),
        face_uvs=uvs,
        landmarks=landmarks,
        vertex_groups=groups,
    )


# ---------------------------------------------------------------------------
# ground-truth model fabrication

def _monomials(p: np.ndarray) -> np.ndarray:
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z,
                     x * y, y * z, z * x], axis=1)


def _poly_field(rng, points: np.ndarray) -> np.ndarray:
    """Smooth random vector field over normalized coordinates."""
    mono = _monomials(points / 100.0)
    A = rng.normal(size=(mono.shape[1], 3))
    return mono @ A


def _gram_schmidt(columns: list[np.ndarray]) -> np.ndarray:
    out = []
    for c in columns:
        v = c.astype(np.float64).copy()
        for u in out:
            v -= (u @ v) * u
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ValueError("degenerate field set")
        out.append(v / n)
    return np.stack(out, axis=1)


def _rigid_modes(points: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the 6 linearized rigid motions at `points`."""
    n = len(points)
    c = points.mean(axis=0)
    cols = []
    for k in range(3):
        t = np.zeros((n, 3))
        t[:, k] = 1.0
        cols.append(t.ravel())
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        cols.append(np.cross(np.broadcast_to(e, (n, 3)), points - c).ravel())
    return _gram_schmidt(cols)


def _project_out(columns: list[np.ndarray], basis: np.ndarray) -> list[np.ndarray]:
    return [c - basis @ (basis.T @ c) for c in columns]


@dataclass
class SyntheticWorld:
    """Hidden ground-truth model plus reproducible corpus sampling."""

    seed: int = 0
    tier: str = "tiny"
    n_pairs: int = 12
    n_face_only: int = 16
    jitter_mm: float = 0.0
    hole_fraction: float = 0.0
    pose_jitter: float = 1.0     # scales minor pose/expression noise on lucy-like records
    trait_scale: float = 1.0     # scales the post-stage trait draws
    trait_maxilla_leak: float = 0.08
    band_shift: float = 0.0      # shifts the true soft-skinning band (degrees)
    # corpus-shape knobs for ablation studies
    beta_rank_override: int | None = None
    gamma_rank_override: int | None = None
    trait_sigma_override: tuple[float, ...] | None = None
    trait_mean_gamma: tuple[float, ...] | None = None   # systematic deformity direction
    post_trait_retention: float = 0.0                   # deformity left after correction
    record_noise_mm: float = 0.0                        # iid vertex noise on records
    shape_skull_damp: float = 1.0                       # scales shape-field skull rows
    _model: SculptorModel | None = field(default=None, repr=False)

    def template(self) -> SculptorModel:
        return make_template(self.tier)

    def ground_truth_model(self) -> SculptorModel:
        if self._model is None:
            self._model = self._build_model()
        return self._model

    # -- bases --

    def _build_model(self) -> SculptorModel:
        skeleton = make_template(self.tier)
        ranks = dict(TIERS[self.tier]["ranks"])
        if self.beta_rank_override is not None:
            ranks["beta"] = self.beta_rank_override
        if self.gamma_rank_override is not None:
            ranks["gamma"] = self.gamma_rank_override
        rng = np.random.default_rng(self.seed)
        N = skeleton.n_vertices
        V = skeleton.template_vertices
        lo_f, hi_f = skeleton.face_range
        n_face = hi_f - lo_f

        # registered shape spaces carry no rigid content, so keep the true
        # fields orthogonal to the linearized rigid motions at the template
        rigid = _rigid_modes(V)
        shape_cols = _project_out(
            [_poly_field(rng, V).ravel() for _ in range(ranks["beta"])], rigid)
        if self.shape_skull_damp != 1.0:
            # damp after the rigid projection: leaks a little rigid content,
            # which only matters for posed corpora (ablation worlds are unposed)
            damp = np.ones((N, 1))
            damp[: skeleton.skull_range[1]] = self.shape_skull_damp
            shape_cols = [(damp * c.reshape(-1, 3)).ravel() for c in shape_cols]
        shape_basis = _gram_schmidt(shape_cols)

        mask = self._trait_mask(skeleton)
        trait_cols = []
        frontness = np.clip(V[:, 2], 0.0, None) / RADII[2]
        named = [
            np.stack([V[:, 0] / RADII[0], np.zeros(N), np.zeros(N)], axis=1),   # jaw-width
            np.stack([np.zeros(N), -0.3 * frontness, 0.9 * frontness], axis=1),  # jaw-length
            np.tile([0.0, 0.0, 1.0], (N, 1)),                                    # jaw protrusion
        ]
        for k in range(ranks["gamma"]):
            base = named[k] if k < len(named) else _poly_field(rng, V)
            trait_cols.append((mask[:, None] * base).ravel())
        trait_basis = _gram_schmidt(trait_cols)
        trait_names = ["jaw-width", "jaw-length", "jaw-maxilla-offset"][: ranks["gamma"]]
        trait_names += [f"trait-{k}" for k in range(len(trait_names), ranks["gamma"])]

        mouth = self._mouth_mask(skeleton)
        expr_named = [
            np.stack([np.zeros(n_face), -np.ones(n_face), 0.3 * np.ones(n_face)], axis=1),
            np.stack([np.sign(V[lo_f:hi_f, 0]) * 0.8, np.zeros(n_face), np.zeros(n_face)],
                     axis=1),
        ]
        expr_cols = []
        for k in range(ranks["phi"]):
            base = expr_named[k] if k < len(expr_named) else _poly_field(rng, V[lo_f:hi_f])
            expr_cols.append((mouth[:, None] * base).ravel())
        expr_basis = _gram_schmidt(expr_cols)

        pose_basis = np.zeros((3 * N, 12))
        band = skeleton.jaw_weights[lo_f:hi_f] * (1.0 - skeleton.jaw_weights[lo_f:hi_f])
        for j in range(12):
            f = _poly_field(rng, V[lo_f:hi_f]) * band[:, None]
            pose_basis[3 * lo_f:3 * hi_f, j] = 0.05 * f.ravel()

        tex = TIERS[self.tier]["tex"]
        mean_tex, tex_basis = self._textures(rng, tex, ranks["alpha"])

        sigma_beta = np.array([36.0, 33.0, 30.0, 27.0, 25.0, 23.0, 20.0, 18.0,
                               16.0, 14.5, 13.0, 12.0, 10.0, 9.0, 8.0, 7.0])[: ranks["beta"]]
        if self.trait_sigma_override is not None:
            sigma_gamma = np.asarray(self.trait_sigma_override, dtype=np.float64)
        else:
            sigma_gamma = np.array([12.0, 9.0, 7.0, 5.0, 4.0, 3.5, 3.0, 2.5])[: ranks["gamma"]]
        sigma_phi = np.array([6.0, 5.0, 4.0, 3.0])[: ranks["phi"]]
        sigma_alpha = np.array([4.0, 3.0, 2.5, 2.0])[: ranks["alpha"]]

        skinning = skeleton.skinning
        if self.band_shift:
            lat, _ = self._lat_lon(skeleton)
            w = skeleton.jaw_weights.copy()
            t = (lat[lo_f:hi_f] - (BAND_START + self.band_shift)) / (BAND_END - BAND_START)
            w[lo_f:hi_f] = _smoothstep(t)
            skinning = np.stack([1.0 - w, w], axis=1)

        from dataclasses import replace as dc_replace

        return dc_replace(
            skeleton,
            skinning=skinning,
            shape_basis=shape_basis,
            trait_basis=trait_basis,
            expr_basis=expr_basis,
            pose_basis=pose_basis,
            sigma_beta=sigma_beta, sigma_gamma=sigma_gamma,
            sigma_phi=sigma_phi, sigma_alpha=sigma_alpha,
            mean_texture=mean_tex, texture_basis=tex_basis,
            trait_axis_names=trait_names,
        )

    def _grid(self) -> _SphereGrid:
        spec = TIERS[self.tier]
        return _SphereGrid(spec["lat"], spec["lon"])

    def _lat_lon(self, skeleton: SculptorModel):
        spec = TIERS[self.tier]
        grid = self._grid()
        split_ring = round(SPLIT_DEG * spec["lat"] / 180.0)
        mdb_rows = grid.row_indices(split_ring, spec["lat"] - 1, include_bottom=True)
        mxl_rows = grid.row_indices(1, split_ring, include_top=True)
        lat = np.concatenate([grid.lat[mdb_rows], grid.lat[mxl_rows], grid.lat])
        lon = np.concatenate([grid.lon[mdb_rows], grid.lon[mxl_rows], grid.lon])
        return lat, lon

    def _trait_mask(self, skeleton: SculptorModel) -> np.ndarray:
        lat, _ = self._lat_lon(skeleton)
        N = skeleton.n_vertices
        mask = np.zeros(N)
        lo, hi = skeleton.part_ranges["mandible"]
        mask[lo:hi] = 1.0
        lo, hi = skeleton.part_ranges["maxilla"]
        mask[lo:hi] = self.trait_maxilla_leak
        lo, hi = skeleton.face_range
        t = (lat[lo:hi] - 104.0) / (136.0 - 104.0)
        mask[lo:hi] = _smoothstep(t)
        return mask

    def _mouth_mask(self, skeleton: SculptorModel) -> np.ndarray:
        lat, lon = self._lat_lon(skeleton)
        lo, hi = skeleton.face_range
        return _window(lat[lo:hi], 115, 150, 10) * _window(lon[lo:hi], -40, 40, 14)

    def _textures(self, rng, size: int, rank: int):
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        base = np.stack([
            0.72 + 0.12 * yy, 0.55 + 0.10 * yy, 0.45 + 0.08 * yy,
        ], axis=2)
        mean = np.round(np.clip(base, 0, 1) * 255.0) / 255.0
        cols = []
        for k in range(rank):
            fx, fy = rng.integers(1, 4, size=2)
            phase = rng.random() * 2 * np.pi
            img = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
            rgbw = rng.normal(size=3)
            cols.append((img[..., None] * rgbw).ravel())
        basis = _gram_schmidt(cols) if cols else np.zeros((size * size * 3, 0))
        return mean, basis

    # -- corpus sampling --

    def sample_corpus(self) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
        model = self.ground_truth_model()
        rng = np.random.default_rng(self.seed + 1)
        lucy: list[SubjectRecord] = []
        for i in range(self.n_pairs):
            beta = model.sigma_beta * np.clip(rng.standard_normal(model.n_beta), -2.5, 2.5)
            gamma = self.trait_scale * model.sigma_gamma * np.clip(
                rng.standard_normal(model.n_gamma), -2.5, 2.5)
            if self.trait_mean_gamma is not None:
                gamma = gamma + np.asarray(self.trait_mean_gamma, dtype=np.float64)
            # pre-modification scans carry the skeletal deformity; the modified
            # (post) stage is the corrected anatomy the shape space is built on.
            # Both scans of a pair follow one positioning protocol, so they
            # share most of their minor pose.
            shared_pose = self._minor_pose(rng)
            shared_phi = (0.2 * self.pose_jitter * model.sigma_phi
                          * rng.standard_normal(model.n_phi))
            for stage, g in (("pre", gamma),
                             ("post", self.post_trait_retention * gamma)):
                params = ParamVector.zeros(model)
                params.beta = beta.copy()
                params.gamma = g
                params.theta = shared_pose + 0.2 * self._minor_pose(rng)
                params.phi = shared_phi + (0.05 * self.pose_jitter * model.sigma_phi
                                           * rng.standard_normal(model.n_phi))
                lucy.append(self._record(model, f"s{i:03d}", stage, params, rng,
                                         with_skull=True))
        face_only: list[SubjectRecord] = []
        for i in range(self.n_face_only):
            params = ParamVector.zeros(model)
            params.beta = model.sigma_beta * np.clip(
                rng.standard_normal(model.n_beta), -2.5, 2.5)
            params.gamma = model.sigma_gamma * np.clip(
                rng.standard_normal(model.n_gamma), -2.5, 2.5)
            theta = np.zeros(9)
            theta[0:3] = 0.03 * rng.standard_normal(3)
            theta[3] = rng.uniform(0.03, 0.12)      # open the jaw about +x
            theta[6:9] = [0.0, 0.0, -rng.uniform(0.5, 2.5)]
            params.theta = theta
            params.phi = 0.7 * model.sigma_phi * rng.standard_normal(model.n_phi)
            face_only.append(self._record(model, f"f{i:03d}", "face-only", params, rng,
                                          with_skull=False))
        return lucy, face_only

    def _minor_pose(self, rng) -> np.ndarray:
        theta = np.zeros(9)
        theta[0:3] = 0.02 * self.pose_jitter * rng.standard_normal(3)
        theta[3:6] = 0.02 * self.pose_jitter * rng.standard_normal(3)
        theta[6:9] = 0.3 * self.pose_jitter * rng.standard_normal(3)
        return theta

    def _record(self, model, sid, stage, params, rng, with_skull) -> SubjectRecord:
        head = generate(model, params, want_texture=False)
        if self.record_noise_mm > 0:
            head.vertices = head.vertices + self.record_noise_mm * rng.standard_normal(
                head.vertices.shape)
        lo_s, hi_s = model.skull_range
        lo_f, hi_f = model.face_range
        skull = None
        if with_skull:
            skull = TriMesh(
                head.vertices[lo_s:hi_s],
                np.concatenate([model.faces_by_part["mandible"],
                                model.faces_by_part["maxilla"]]) - lo_s,
            )
        face = TriMesh(head.vertices[lo_f:hi_f], model.faces_by_part["face"] - lo_f)
        lmk = None
        if model.landmarks is not None:
            lmk = LandmarkSet(
                list(model.landmarks.names),
                head.vertices[[a for a in model.landmarks.anchors]],
                list(model.landmarks.anchors),
            )
        neutral = personalize(model, params.beta, params.gamma)
        gt = {
            "beta": params.beta.tolist(), "gamma": params.gamma.tolist(),
            "theta": params.theta.tolist(), "phi": params.phi.tolist(),
            "neutral_template": neutral.tolist(),
        }
        return SubjectRecord(id=sid, stage=stage, face=face, skull=skull,
                             landmarks=lmk, ground_truth=gt)

    # -- raw-scan degradation for registration tests --

    def degrade(self, mesh: TriMesh, rng_seed: int,
                jitter_mm: float | None = None,
                hole_fraction: float | None = None) -> TriMesh:
        """Jitter vertices and punch vertex holes, reindexing faces."""
        jitter = self.jitter_mm if jitter_mm is None else jitter_mm
        holes = self.hole_fraction if hole_fraction is None else hole_fraction
        rng = np.random.default_rng(rng_seed)
        v = mesh.vertices + jitter * rng.standard_normal(mesh.vertices.shape)
        keep = np.ones(len(v), dtype=bool)
        if holes > 0:
            drop = rng.choice(len(v), size=int(holes * len(v)), replace=False)
            keep[drop] = False
        remap = -np.ones(len(v), dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        faces = mesh.faces[keep[mesh.faces].all(axis=1)]
        return TriMesh(v[keep], remap[faces])

    # -- lipo family --

    def fat_pad_field(self) -> np.ndarray:
        """Outward cheek displacement pattern, unit peak, on face vertices."""
        model = self.ground_truth_model()
        lat, lon = self._lat_lon(model)
        lo, hi = model.face_range
        grid = self._grid()
        pad = _window(lat[lo:hi], 100, 132, 8) * (
            _window(lon[lo:hi], 45, 110, 10) + _window(lon[lo:hi], -110, -45, 10))
        return np.clip(pad, 0.0, 1.0)[:, None] * grid.normals

    def lipo_family(self, levels=(0.0, 1.0), amplitude: float = 6.0, beta_seed: int = 99):
        """Same-subject heads at several fat levels plus the matching skull."""
        model = self.ground_truth_model()
        rng = np.random.default_rng(beta_seed)
        params = ParamVector.zeros(model)
        params.beta = model.sigma_beta * 0.5 * rng.standard_normal(model.n_beta)
        head = generate(model, params, want_texture=False)
        lo_s, hi_s = model.skull_range
        lo_f, hi_f = model.face_range
        skull = TriMesh(head.vertices[lo_s:hi_s],
                        np.concatenate([model.faces_by_part["mandible"],
                                        model.faces_by_part["maxilla"]]) - lo_s)
        field = self.fat_pad_field()
        faces = model.faces_by_part["face"] - lo_f
        heads = [TriMesh(head.vertices[lo_f:hi_f] + amplitude * lvl * field, faces)
                 for lvl in levels]
        region = np.linalg.norm(field, axis=1) > 0.5
        return {"skull": skull, "heads": heads, "levels": list(levels),
                "neutral": heads[0], "field": amplitude * field, "region": region,
                "params": params}


def export_corpus(world: SyntheticWorld, directory: str | Path) -> Path:
    """Write both corpora plus a top-level manifest; round-trips via loaders."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lucy, face_only = world.sample_corpus()
    save_corpus(lucy, directory / "lucy_like")
    save_corpus(face_only, directory / "face_only")
    manifest = {
        "config": {
            "seed": world.seed, "tier": world.tier, "n_pairs": world.n_pairs,
            "n_face_only": world.n_face_only, "jitter_mm": world.jitter_mm,
            "hole_fraction": world.hole_fraction,
        },
        "corpora": {"lucy_like": "lucy_like/manifest.json",
                    "face_only": "face_only/manifest.json"},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
