import numpy as np
import pytest

from sculptorkit.mesh import LandmarkSet, TriMesh
from sculptorkit.model import SculptorModel, condyle_joint_regressor


def regular_tetrahedron(edge: float = 1.0) -> TriMesh:
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    ) / np.sqrt(8.0) * edge
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, f)


def unit_cube() -> TriMesh:
    v = np.array(
        [
            [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],
            [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4],
            [1, 2, 6], [1, 6, 5],
            [2, 3, 7], [2, 7, 6],
            [3, 0, 4], [3, 4, 7],
        ]
    )
    return TriMesh(v, f)


def random_mesh(rng: np.random.Generator, n: int = 10) -> TriMesh:
    verts = rng.normal(size=(n, 3)) * 10.0
    faces = []
    for i in range(n - 2):
        faces.append([i, i + 1, i + 2])
    return TriMesh(verts, np.array(faces))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def named_landmarks(points: np.ndarray, prefix: str = "lm") -> LandmarkSet:
    points = np.asarray(points, dtype=np.float64)
    return LandmarkSet([f"{prefix}{i}" for i in range(len(points))], points)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def _box(center, size):
    c = np.asarray(center, dtype=np.float64)
    s = size / 2.0
    v = np.array(
        [
            [-s, -s, -s], [s, -s, -s], [s, s, -s], [-s, s, -s],
            [-s, -s, s], [s, -s, s], [s, s, s], [-s, s, s],
        ]
    ) + c
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
            [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7],
        ]
    )
    return v, f


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.normal(size=(rows, max(cols, 1))))
    q = q[:, :cols] * np.sign(np.diag(r))[:cols]
    return q.astype(np.float32).astype(np.float64)


def toy_model(seed: int = 7) -> SculptorModel:
    """Small hand-built model: two skull boxes plus a 16-vertex face shell."""
    r = np.random.default_rng(seed)
    v_mdb, f_mdb = _box([0.0, -50.0, 0.0], 20.0)
    v_mxl, f_mxl = _box([0.0, -20.0, 0.0], 24.0)
    ring = np.array(
        [[np.cos(a), 0.0, np.sin(a)] for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    ) * 45.0
    v_face = np.concatenate([ring + [0, -60.0, 0], ring + [0, 40.0, 0]])
    f_face = []
    for j in range(8):
        a, b = j, (j + 1) % 8
        f_face.append([a, b, 8 + b])
        f_face.append([a, 8 + b, 8 + a])
    f_face = np.array(f_face)

    verts = np.concatenate([v_mdb, v_mxl, v_face]).astype(np.float32).astype(np.float64)
    parts = {"mandible": (0, 8), "maxilla": (8, 16), "face": (16, 32)}
    faces_by_part = {
        "mandible": f_mdb,
        "maxilla": f_mxl + 8,
        "face": f_face + 16,
    }
    N = 32
    skin = np.zeros((N, 2))
    skin[:, 0] = 1.0
    skin[0:8] = [0.0, 1.0]                      # mandible rigid with jaw
    skin[16:24] = [0.5, 0.5]                    # lower face band is soft
    condyle_l = np.array([3, 7])                # top mandible corners, x < 0
    condyle_r = np.array([2, 6])
    jr = condyle_joint_regressor(16, condyle_l, condyle_r)

    n_face = 16
    tex = np.linspace(0.2, 0.8, 8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3)
    tex = np.round(tex * 255) / 255.0
    # pose correctives live on the soft face band only; skull parts stay rigid
    pose_basis = np.zeros((3 * N, 12))
    pose_basis[3 * 16:] = r.normal(size=(3 * n_face, 12)) * 0.02
    pose_basis = pose_basis.astype(np.float32).astype(np.float64)
    model = SculptorModel(
        template_vertices=verts,
        faces_by_part=faces_by_part,
        part_ranges=parts,
        shape_basis=_orthonormal_columns(r, 3 * N, 3),
        trait_basis=_orthonormal_columns(r, 3 * N, 2),
        expr_basis=_orthonormal_columns(r, 3 * n_face, 2),
        pose_basis=pose_basis,
        skinning=skin,
        joint_regressor=jr,
        sigma_beta=np.array([2.0, 1.5, 1.0]),
        sigma_gamma=np.array([1.0, 0.8]),
        sigma_phi=np.array([0.5, 0.4]),
        sigma_alpha=np.array([0.5, 0.4]),
        mean_texture=tex.astype(np.float64),
        texture_basis=_orthonormal_columns(r, 8 * 8 * 3, 2),
        face_uvs=r.random(size=(n_face, 2)).astype(np.float32).astype(np.float64),
        trait_axis_names=["jaw-width", "jaw-length"],
        landmarks=LandmarkSet(
            ["mdb_condyle_l", "mdb_condyle_r", "mdb_chin", "mxl_front", "face_top", "face_bottom"],
            verts[[3, 2, 0, 12, 24, 16]],
            [3, 2, 0, 12, 24, 16],
        ),
        vertex_groups={"condyle_left": condyle_l, "condyle_right": condyle_r},
    )
    return model
