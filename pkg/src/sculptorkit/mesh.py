"""Triangle meshes, landmarks, rigid alignment and the basic fitting energies.

All coordinates are in millimeters. Every function here is pure: inputs are
never mutated, so concurrent use over shared meshes is safe.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from .errors import (
    CollinearLandmarks,
    EmptyMesh,
    FewerThanThreeCorrespondences,
    MissingNormals,
    NoMatchedNames,
    TopologyMismatch,
)


@dataclass
class TriMesh:
    """Indexed triangle mesh with optional per-vertex normals and UVs.

    vertices: (N, 3) float64, mm
    faces:    (M, 3) int, indices into vertices
    normals:  optional (N, 3) unit vectors
    uvs:      optional (N, 2) in [0, 1]^2
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    uvs: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.validate()

    def validate(self):
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise TopologyMismatch("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise TopologyMismatch("degenerate face (repeated vertex index)")
        if self.normals is not None:
            if len(self.normals) != len(self.vertices):
                raise TopologyMismatch("normal count != vertex count")
            lens = np.linalg.norm(self.normals, axis=1)
            if self.normals.size and not np.allclose(lens, 1.0, atol=1e-6):
                raise ValueError("normals must have unit length within 1e-6")
        if self.uvs is not None and len(self.uvs) != len(self.vertices):
            raise TopologyMismatch("uv count != vertex count")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.normals is None else self.normals.copy(),
            None if self.uvs is None else self.uvs.copy(),
        )

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology, new vertex positions; normals are dropped (stale)."""
        return TriMesh(vertices, self.faces, None, None if self.uvs is None else self.uvs.copy())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def ensure_normals(self) -> np.ndarray:
        """Return per-vertex normals, computing them if the mesh carries none."""
        if self.normals is None:
            return vertex_normals(self.vertices, self.faces)
        return self.normals


@dataclass
class LandmarkSet:
    """Named 3D points, optionally anchored to mesh vertex indices."""

    names: list[str] = field(default_factory=list)
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    anchors: list[int | None] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not self.anchors:
            self.anchors = [None] * len(self.names)
        if len(set(self.names)) != len(self.names):
            raise ValueError("landmark names must be unique")
        if len(self.names) != len(self.positions) or len(self.names) != len(self.anchors):
            raise ValueError("names/positions/anchors length mismatch")

    def __len__(self) -> int:
        return len(self.names)

    def position_of(self, name: str) -> np.ndarray:
        return self.positions[self.names.index(name)]

    def subset(self, names: list[str]) -> "LandmarkSet":
        idx = [self.names.index(n) for n in names]
        return LandmarkSet([self.names[i] for i in idx], self.positions[idx], [self.anchors[i] for i in idx])

    def rebound(self, mesh: TriMesh) -> "LandmarkSet":
        """Refresh positions from anchor vertices of `mesh` (anchored entries only)."""
        pos = self.positions.copy()
        for i, a in enumerate(self.anchors):
            if a is not None:
                pos[i] = mesh.vertices[a]
        return LandmarkSet(list(self.names), pos, list(self.anchors))


@dataclass
class RigidTransform:
    """Similarity transform x -> scale * R @ x + t with det(R) = +1."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def apply_mesh(self, mesh: TriMesh) -> TriMesh:
        out = mesh.with_vertices(self.apply(mesh.vertices))
        if mesh.normals is not None:
            out.normals = mesh.normals @ self.rotation.T
        return out

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply `other` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )


# ---------------------------------------------------------------------------
# topology helpers

def unique_edges(faces: np.ndarray) -> np.ndarray:
    """(E, 2) sorted unique undirected edges of a triangle list."""
    f = np.asarray(faces, dtype=np.int64)
    if f.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    return np.unique(e, axis=0)


def adjacency_matrix(n_vertices: int, faces: np.ndarray) -> csr_matrix:
    e = unique_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    data = np.ones(len(rows))
    return csr_matrix((data, (rows, cols)), shape=(n_vertices, n_vertices))


def uniform_laplacian(n_vertices: int, faces: np.ndarray) -> csr_matrix:
    """L such that (L @ V)_i = v_i - mean(neighbors of v_i); isolated rows are zero."""
    adj = adjacency_matrix(n_vertices, faces)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    D = csr_matrix((inv, (np.arange(n_vertices), np.arange(n_vertices))), shape=adj.shape)
    eye = csr_matrix((np.sign(deg), (np.arange(n_vertices), np.arange(n_vertices))), shape=adj.shape)
    return (eye - D @ adj).tocsr()


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = np.zeros_like(v)
    if f.size:
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # |fn| = 2*area
        for k in range(3):
            np.add.at(n, f[:, k], fn)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    lens[lens == 0] = 1.0
    return n / lens


# ---------------------------------------------------------------------------
# alignment

def _matched(source: LandmarkSet, target: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    common = [n for n in source.names if n in target.names]
    if not common:
        raise NoMatchedNames("landmark sets share no names")
    s = np.array([source.position_of(n) for n in common])
    t = np.array([target.position_of(n) for n in common])
    return s, t


def procrustes_align(
    source: LandmarkSet, target: LandmarkSet, allow_scale: bool = False
) -> tuple[RigidTransform, float]:
    """Least-squares similarity alignment of matched landmarks (Kabsch/Umeyama).

    Returns (transform, residual) where residual is the summed squared
    distance after alignment, in mm^2.
    """
    s, t = _matched(source, target)
    if len(s) < 3:
        raise FewerThanThreeCorrespondences(f"need >= 3 shared landmarks, got {len(s)}")
    sc, tc = s.mean(axis=0), t.mean(axis=0)
    s0, t0 = s - sc, t - tc
    sing = np.linalg.svd(s0, compute_uv=False)
    if sing[1] <= 1e-9 * max(sing[0], 1e-12):
        raise CollinearLandmarks("source landmarks are collinear")
    H = s0.T @ t0
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    if allow_scale:
        var_s = (s0 ** 2).sum()
        scale = float((S * np.diag(D)).sum() / var_s)
    else:
        scale = 1.0
    trans = tc - scale * R @ sc
    tf = RigidTransform(R, trans, scale)
    residual = float(((tf.apply(s) - t) ** 2).sum())
    return tf, residual


# ---------------------------------------------------------------------------
# distances and energies

def _require_nonempty(*meshes: TriMesh):
    for m in meshes:
        if m.n_vertices == 0:
            raise EmptyMesh("operation requires a non-empty mesh")


def kdtree_for(points: np.ndarray) -> cKDTree:
    """KD-tree over points, disk-cached under $SCULPTORKIT_CACHE when set."""
    import os

    cache_dir = os.environ.get("SCULPTORKIT_CACHE")
    if not cache_dir:
        return cKDTree(points)
    import hashlib
    import pickle
    from pathlib import Path

    key = hashlib.sha256(np.ascontiguousarray(points).tobytes()).hexdigest()
    path = Path(cache_dir) / f"kdtree-{key}.pkl"
    if path.exists():
        try:
            with open(path, "rb") as fh:
                return pickle.load(fh)
        except Exception:
            pass  # stale or corrupt cache entry; rebuild
    tree = cKDTree(points)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(tree, fh)
    tmp.replace(path)
    return tree


def nearest_vertices(query: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices into `reference` of the nearest vertex for each query point, plus distances."""
    tree = kdtree_for(reference)
    d, idx = tree.query(query, k=1)
    return np.asarray(idx, dtype=np.int64), np.asarray(d)


def chamfer(a: TriMesh, b: TriMesh) -> float:
    """Symmetric chamfer distance: average of the two directed mean squared
    nearest-vertex distances, in mm^2."""
    _require_nonempty(a, b)
    _, d_ab = nearest_vertices(a.vertices, b.vertices)
    _, d_ba = nearest_vertices(b.vertices, a.vertices)
    return float(0.5 * ((d_ab ** 2).mean() + (d_ba ** 2).mean()))


def chamfer_normal(a: TriMesh, b: TriMesh) -> float:
    """Mean angle (radians) between normals of nearest-vertex pairs, symmetric.

    Opposite orientations score near pi, which is what penalizes a template
    snapping onto the back side of a thin shell.
    """
    _require_nonempty(a, b)
    if a.normals is None or b.normals is None:
        raise MissingNormals("both meshes must carry normals")

    def directed(src: TriMesh, dst: TriMesh) -> float:
        idx, _ = nearest_vertices(src.vertices, dst.vertices)
        cosang = np.clip((src.normals * dst.normals[idx]).sum(axis=1), -1.0, 1.0)
        return float(np.arccos(cosang).mean())

    return 0.5 * (directed(a, b) + directed(b, a))


def landmark_energy(current: LandmarkSet, target: LandmarkSet) -> float:
    """Sum of squared distances over name-matched landmarks, mm^2."""
    c, t = _matched(current, target)
    return float(((c - t) ** 2).sum())


def _check_same_topology(mesh: TriMesh, reference: TriMesh):
    if mesh.n_vertices != reference.n_vertices or not np.array_equal(mesh.faces, reference.faces):
        raise TopologyMismatch("mesh and reference must share topology")


def laplacian_energy(mesh: TriMesh, reference: TriMesh) -> float:
    """Squared norm of the difference of uniform-weight Laplacian coordinates."""
    _check_same_topology(mesh, reference)
    L = uniform_laplacian(mesh.n_vertices, mesh.faces)
    diff = L @ mesh.vertices - L @ reference.vertices
    return float((diff ** 2).sum())


def edge_energy(mesh: TriMesh, reference: TriMesh) -> float:
    """Sum of squared differences of corresponding edge lengths."""
    _check_same_topology(mesh, reference)
    e = unique_edges(mesh.faces)
    if e.size == 0:
        return 0.0
    lm = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    lr = np.linalg.norm(reference.vertices[e[:, 0]] - reference.vertices[e[:, 1]], axis=1)
    return float(((lm - lr) ** 2).sum())


def msve(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared vertex error between corresponding vertex arrays, mm^2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise TopologyMismatch("vertex arrays must have identical shape")
    return float(((a - b) ** 2).sum(axis=1).mean())


def hausdorff(a: TriMesh, b: TriMesh) -> float:
    """Symmetric vertex-sampled Hausdorff distance in mm."""
    _require_nonempty(a, b)
    _, d_ab = nearest_vertices(a.vertices, b.vertices)
    _, d_ba = nearest_vertices(b.vertices, a.vertices)
    return float(max(d_ab.max(), d_ba.max()))
