"""The parametric head model: template, blend-shape bases, skinning, joint
regressor, and forward generation.

Geometry is generated by linear blend skinning over two joints: a global
orientation about the fixed template centroid and a 6-DoF jaw transform
(rotation about the regressed condyle-midpoint joint plus translation).
The personalized rest mesh is template + shape/trait/pose/expression blend
shapes; appearance is a linear texture space clamped to [0, 1] on synthesis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from .errors import NonFiniteParams, RankMismatch
from .mesh import LandmarkSet, TriMesh
from .rotations import rotation_matrix

DEFAULT_RANKS = {"beta": 300, "gamma": 50, "phi": 53, "alpha": 25}
POSE_FEATURE_DIM = 12  # vec(R_jaw - I) ++ jaw translation
THETA_DIM = 9          # global rotvec (3) + jaw rotvec (3) + jaw translation mm (3)

PART_NAMES = ("mandible", "maxilla", "face")


@dataclass
class ParamVector:
    """One subject's coefficients (beta, gamma, theta, phi, alpha)."""

    beta: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.gamma = np.asarray(self.gamma, dtype=np.float64).ravel()
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.phi = np.asarray(self.phi, dtype=np.float64).ravel()
        self.alpha = np.asarray(self.alpha, dtype=np.float64).ravel()
        if self.theta.size != THETA_DIM:
            raise RankMismatch(f"theta must have {THETA_DIM} entries, got {self.theta.size}")

    @classmethod
    def zeros(cls, model: "SculptorModel") -> "ParamVector":
        return cls(
            np.zeros(model.n_beta), np.zeros(model.n_gamma), np.zeros(THETA_DIM),
            np.zeros(model.n_phi), np.zeros(model.n_alpha),
        )

    @property
    def theta_global(self) -> np.ndarray:
        return self.theta[:3]

    @property
    def theta_jaw(self) -> np.ndarray:
        return self.theta[3:6]

    @property
    def jaw_translation(self) -> np.ndarray:
        return self.theta[6:9]

    def copy(self) -> "ParamVector":
        return ParamVector(self.beta.copy(), self.gamma.copy(), self.theta.copy(),
                           self.phi.copy(), self.alpha.copy())

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(), "gamma": self.gamma.tolist(),
            "theta": self.theta.tolist(), "phi": self.phi.tolist(),
            "alpha": self.alpha.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, model: "SculptorModel") -> "ParamVector":
        p = cls.zeros(model)
        for name, size in (("beta", model.n_beta), ("gamma", model.n_gamma),
                           ("theta", THETA_DIM), ("phi", model.n_phi),
                           ("alpha", model.n_alpha)):
            if name in data and data[name] is not None:
                arr = np.asarray(data[name], dtype=np.float64).ravel()
                if arr.size > size:
                    raise RankMismatch(f"{name} has {arr.size} entries, model rank is {size}")
                getattr(p, name)[: arr.size] = arr
        return p


@dataclass
class GeneratedHead:
    """Forward-model output: posed skull + face in template topology."""

    vertices: np.ndarray            # all parts, template order
    jaw_joint: np.ndarray
    model: "SculptorModel"
    texture: np.ndarray | None = None

    def part_vertices(self, name: str) -> np.ndarray:
        lo, hi = self.model.part_ranges[name]
        return self.vertices[lo:hi]

    def part_mesh(self, name: str) -> TriMesh:
        lo, hi = self.model.part_ranges[name]
        uvs = None
        if name == "face" and self.model.face_uvs is not None:
            uvs = self.model.face_uvs.copy()
        return TriMesh(self.vertices[lo:hi], self.model.faces_by_part[name] - lo, uvs=uvs)

    def skull_mesh(self) -> TriMesh:
        lo, hi = self.model.skull_range
        faces = np.concatenate(
            [self.model.faces_by_part["mandible"], self.model.faces_by_part["maxilla"]]
        )
        return TriMesh(self.vertices[lo:hi], faces - lo)

    def full_mesh(self) -> TriMesh:
        faces = np.concatenate([self.model.faces_by_part[p] for p in PART_NAMES])
        return TriMesh(self.vertices, faces)


@dataclass
class SculptorModel:
    """Template geometry plus learned linear spaces and skinning.

    Vertices are ordered mandible, maxilla, face; `part_ranges` maps each part
    to its [lo, hi) slice. Basis matrices operate on flattened (3N,) offsets;
    the expression basis covers only the face rows.
    """

    template_vertices: np.ndarray               # (N, 3)
    faces_by_part: dict[str, np.ndarray]        # global vertex indices
    part_ranges: dict[str, tuple[int, int]]
    shape_basis: np.ndarray                     # (3N, n_beta), orthonormal columns
    trait_basis: np.ndarray                     # (3N, n_gamma), orthonormal columns
    expr_basis: np.ndarray                      # (3N_face, n_phi), orthonormal columns
    pose_basis: np.ndarray                      # (3N, 12)
    skinning: np.ndarray                        # (N, 2) [global, jaw]
    joint_regressor: csr_matrix                 # (3, 3 * n_skull)
    sigma_beta: np.ndarray
    sigma_gamma: np.ndarray
    sigma_phi: np.ndarray
    sigma_alpha: np.ndarray
    mean_texture: np.ndarray | None = None      # (H, W, 3) float in [0, 1]
    texture_basis: np.ndarray | None = None     # (H*W*3, n_alpha)
    face_uvs: np.ndarray | None = None          # (N_face, 2)
    trait_axis_names: list[str] = field(default_factory=list)
    landmarks: LandmarkSet | None = None        # anchored template landmarks
    vertex_groups: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64).reshape(-1, 3)
        for k in list(self.faces_by_part):
            self.faces_by_part[k] = np.asarray(self.faces_by_part[k], dtype=np.int64).reshape(-1, 3)
        self.validate()

    # --- sizes ---

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def skull_range(self) -> tuple[int, int]:
        return (self.part_ranges["mandible"][0], self.part_ranges["maxilla"][1])

    @property
    def n_skull(self) -> int:
        lo, hi = self.skull_range
        return hi - lo

    @property
    def face_range(self) -> tuple[int, int]:
        return self.part_ranges["face"]

    @property
    def n_beta(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_gamma(self) -> int:
        return self.trait_basis.shape[1]

    @property
    def n_phi(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def n_alpha(self) -> int:
        return 0 if self.texture_basis is None else self.texture_basis.shape[1]

    @property
    def rotation_center(self) -> np.ndarray:
        """Global orientation pivots about the fixed template centroid."""
        return self.template_vertices.mean(axis=0)

    @property
    def jaw_weights(self) -> np.ndarray:
        return self.skinning[:, 1]

    def validate(self):
        N = self.n_vertices
        if self.skinning.shape != (N, 2):
            raise RankMismatch("skinning must be (n_vertices, 2)")
        rows = self.skinning.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-6) or self.skinning.min() < -1e-9:
            raise ValueError("skinning rows must be non-negative and sum to 1")
        lo, hi = self.part_ranges["mandible"]
        if not np.allclose(self.skinning[lo:hi, 1], 1.0, atol=1e-6):
            raise ValueError("mandible vertices must have jaw weight 1")
        for name, basis in (("shape", self.shape_basis), ("trait", self.trait_basis),
                            ("expr", self.expr_basis)):
            if basis.shape[1]:
                g = basis.T @ basis
                if not np.allclose(g, np.eye(basis.shape[1]), atol=1e-6):
                    raise ValueError(f"{name} basis columns must be orthonormal")
        jr = np.asarray(self.joint_regressor.sum(axis=1)).ravel()
        if not np.allclose(jr, 1.0, atol=1e-6):
            raise ValueError("joint regressor rows must sum to 1")

    def template_mesh(self, part: str | None = None) -> TriMesh:
        if part is None:
            faces = np.concatenate([self.faces_by_part[p] for p in PART_NAMES])
            return TriMesh(self.template_vertices, faces)
        lo, hi = self.part_ranges[part]
        uvs = self.face_uvs if part == "face" else None
        return TriMesh(self.template_vertices[lo:hi], self.faces_by_part[part] - lo, uvs=uvs)

    def meta(self) -> dict:
        """Machine-readable summary used by the service and reports."""
        return {
            "ranks": {"beta": self.n_beta, "gamma": self.n_gamma,
                      "theta": THETA_DIM, "phi": self.n_phi, "alpha": self.n_alpha},
            "sigma": {"beta": self.sigma_beta.tolist(), "gamma": self.sigma_gamma.tolist(),
                      "phi": self.sigma_phi.tolist(), "alpha": self.sigma_alpha.tolist()},
            "trait_axis_names": list(self.trait_axis_names),
            "vertex_count": self.n_vertices,
            "part_ranges": {k: list(v) for k, v in self.part_ranges.items()},
            "texture_shape": None if self.mean_texture is None else list(self.mean_texture.shape),
        }


# ---------------------------------------------------------------------------
# forward model

def pose_feature(theta: np.ndarray) -> np.ndarray:
    """12-vector driving the pose blend shapes: vec(R_jaw - I) ++ jaw translation.

    The global orientation contributes no blend shape.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    R = rotation_matrix(theta[3:6])
    return np.concatenate([(R - np.eye(3)).ravel(), theta[6:9]])


def _check_params(model: SculptorModel, params: ParamVector):
    for name, size in (("beta", model.n_beta), ("gamma", model.n_gamma),
                       ("phi", model.n_phi), ("alpha", model.n_alpha)):
        got = getattr(params, name).size
        if got != size:
            raise RankMismatch(f"{name} has {got} entries, model rank is {size}")
    for name in ("beta", "gamma", "theta", "phi", "alpha"):
        if not np.all(np.isfinite(getattr(params, name))):
            raise NonFiniteParams(f"{name} contains non-finite values")


def personalize(model: SculptorModel, beta, gamma, theta=None, phi=None) -> np.ndarray:
    """Rest-pose personalized vertices: template + all blend-shape offsets."""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    gamma = np.asarray(gamma, dtype=np.float64).ravel()
    if beta.size != model.n_beta or gamma.size != model.n_gamma:
        raise RankMismatch("beta/gamma length does not match model ranks")
    offset = model.shape_basis @ beta + model.trait_basis @ gamma
    if theta is not None:
        offset = offset + model.pose_basis @ pose_feature(theta)
    out = model.template_vertices + offset.reshape(-1, 3)
    if phi is not None:
        phi = np.asarray(phi, dtype=np.float64).ravel()
        if phi.size != model.n_phi:
            raise RankMismatch("phi length does not match model rank")
        lo, hi = model.face_range
        out[lo:hi] += (model.expr_basis @ phi).reshape(-1, 3)
    return out


def regress_joint(model: SculptorModel, skull_vertices: np.ndarray) -> np.ndarray:
    """Jaw joint as an affine combination of skull vertices (condyle midpoint)."""
    skull_vertices = np.asarray(skull_vertices, dtype=np.float64)
    if skull_vertices.shape != (model.n_skull, 3):
        raise RankMismatch(
            f"expected {model.n_skull} skull vertices, got {skull_vertices.shape[0]}"
        )
    return np.asarray(model.joint_regressor @ skull_vertices.ravel()).ravel()


def rest_joint(model: SculptorModel, beta, gamma) -> np.ndarray:
    """Joint location from shape and trait only (pose/expression do not move it)."""
    lo, hi = model.skull_range
    sk = (model.template_vertices.ravel()
          + model.shape_basis @ np.asarray(beta, dtype=np.float64).ravel()
          + model.trait_basis @ np.asarray(gamma, dtype=np.float64).ravel())
    return regress_joint(model, sk.reshape(-1, 3)[lo:hi])


def blend_skinning(model: SculptorModel, rest_vertices: np.ndarray, joint: np.ndarray,
                   theta: np.ndarray) -> np.ndarray:
    """Two-joint LBS: jaw-local rigid transform first, then global orientation."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    R_jaw = rotation_matrix(theta[3:6])
    t_jaw = theta[6:9]
    w = model.jaw_weights[:, None]
    jawed = (rest_vertices - joint) @ R_jaw.T + joint + t_jaw
    blended = (1.0 - w) * rest_vertices + w * jawed
    R_g = rotation_matrix(theta[:3])
    c = model.rotation_center
    return (blended - c) @ R_g.T + c


def synthesize_texture(model: SculptorModel, alpha: np.ndarray) -> np.ndarray | None:
    if model.mean_texture is None:
        return None
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    tex = model.mean_texture.astype(np.float64).ravel()
    if model.texture_basis is not None and alpha.size:
        tex = tex + model.texture_basis @ alpha
    return np.clip(tex, 0.0, 1.0).reshape(model.mean_texture.shape)


def generate(model: SculptorModel, params: ParamVector, want_texture: bool = True) -> GeneratedHead:
    """Forward model: personalize, regress the jaw joint, skin, synthesize texture."""
    _check_params(model, params)
    rest = personalize(model, params.beta, params.gamma, params.theta, params.phi)
    joint = rest_joint(model, params.beta, params.gamma)
    posed = blend_skinning(model, rest, joint, params.theta)
    R_g = rotation_matrix(params.theta_global)
    c = model.rotation_center
    posed_joint = R_g @ (joint + params.jaw_translation - c) + c
    texture = synthesize_texture(model, params.alpha) if want_texture else None
    return GeneratedHead(posed, posed_joint, model, texture)


def sample(model: SculptorModel, rng_seed: int, scale: float = 1.0) -> ParamVector:
    """Random parameters: independent normal draws scaled by the stored sigmas."""
    if scale < 0:
        raise ValueError("scale must be >= 0")
    rng = np.random.default_rng(rng_seed)
    p = ParamVector.zeros(model)
    p.beta = scale * model.sigma_beta * rng.standard_normal(model.n_beta)
    p.gamma = scale * model.sigma_gamma * rng.standard_normal(model.n_gamma)
    p.phi = scale * model.sigma_phi * rng.standard_normal(model.n_phi)
    p.alpha = scale * model.sigma_alpha * rng.standard_normal(model.n_alpha)
    return p


def condyle_joint_regressor(n_skull: int, condyle_left: np.ndarray,
                            condyle_right: np.ndarray) -> csr_matrix:
    """Regressor whose output is the midpoint of the two condyle-group centroids."""
    rows, cols, vals = [], [], []
    for group in (condyle_left, condyle_right):
        group = np.asarray(group, dtype=np.int64)
        w = 0.5 / len(group)
        for axis in range(3):
            for i in group:
                rows.append(axis)
                cols.append(3 * int(i) + axis)
                vals.append(w)
    return csr_matrix((vals, (rows, cols)), shape=(3, 3 * n_skull))
