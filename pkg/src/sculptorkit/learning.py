"""Model training: per-subject neutralization, PCA shape/trait/appearance
spaces, skinning/pose learning, and the compactness/generalization metrics.

Training alternates between two corpora: skull+face subjects (paired
pre/post-modification scans) supply shape and trait spaces; a larger posed
face-only corpus supplies skinning weights and pose blend shapes.

Reductions inside the training energy are per-vertex / per-edge means so the
term weights stay scale-free; the standalone mesh energies in `mesh` keep
their summed forms.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import NoPairs, RankExceedsData
from .fitting import (
    EdgeObjective,
    FitPriors,
    FitProblem,
    ForwardState,
    VertexObjective,
    lbs_backprop,
)
from .mesh import LandmarkSet, TriMesh, nearest_vertices, unique_edges, uniform_laplacian
from .meshio import load_landmarks, load_mesh, save_landmarks, save_mesh
from .model import ParamVector, SculptorModel, personalize, pose_feature
from .rotations import rotation_matrix


@dataclass
class SubjectRecord:
    """One registered subject in template topology."""

    id: str
    stage: str                      # 'pre' | 'post' | 'face-only'
    face: TriMesh
    skull: TriMesh | None = None
    landmarks: LandmarkSet | None = None
    texture: np.ndarray | None = None
    ground_truth: dict | None = None  # synthetic oracle data; never used in training


@dataclass
class TrainConfig:
    lambda_vert: float = 1.0
    lambda_edge_first: float = 1.0   # first outer round updates pose without shape
    lambda_edge_rest: float = 0.0
    lambda_lap: float = 15.0
    lambda_sreg: float = 1.0
    lambda_col: float = 50.0
    lambda_beta: float = 0.1
    lambda_gamma: float = 0.1
    lambda_w_init: float = 0.2
    lambda_pose_frob: float = 2.0
    rank_beta: int = 300
    rank_gamma: int = 50
    rank_alpha: int = 25
    # neutral-stage records are scanned in occlusion, so pose is strongly
    # biased toward zero; this keeps bone protrusion out of the jaw pose
    lambda_pose_neutral: float = 10.0
    neutral_iterations: int = 4
    pose_outer_iterations: int = 2
    subject_fit_iterations: int = 60
    global_fit_iterations: int = 60
    max_rounds: int = 10
    tol: float = 1e-4
    sreg_literal: bool = False
    jobs: int = 1

    def __post_init__(self):
        for name in ("lambda_vert", "lambda_edge_first", "lambda_edge_rest", "lambda_lap",
                     "lambda_sreg", "lambda_col", "lambda_beta", "lambda_gamma",
                     "lambda_w_init", "lambda_pose_frob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# PCA spaces

@dataclass
class PcaSpace:
    """Linear space over flattened vectors: mean + orthonormal components."""

    mean: np.ndarray
    components: np.ndarray   # (D, rank)
    sigma: np.ndarray        # per-axis std

    @property
    def rank(self) -> int:
        return self.components.shape[1]

    def project(self, data: np.ndarray, rank: int | None = None) -> np.ndarray:
        C = self.components if rank is None else self.components[:, :rank]
        return (np.atleast_2d(data) - self.mean) @ C

    def reconstruct(self, coeffs: np.ndarray, rank: int | None = None) -> np.ndarray:
        C = self.components if rank is None else self.components[:, :rank]
        return self.mean + np.atleast_2d(coeffs) @ C.T


def pca_centered(data: np.ndarray, rank: int) -> PcaSpace:
    X = np.asarray(data, dtype=np.float64)
    n = len(X)
    if rank > max(n - 1, 0):
        raise RankExceedsData(f"rank {rank} exceeds data rank bound {n - 1}")
    mean = X.mean(axis=0)
    U, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    return PcaSpace(mean, Vt[:rank].T, s[:rank] / np.sqrt(max(n - 1, 1)))


def pca_uncentered(data: np.ndarray, rank: int) -> PcaSpace:
    """PCA about the origin: coefficients of zero reproduce the zero vector."""
    X = np.asarray(data, dtype=np.float64)
    n = len(X)
    if rank > n:
        raise RankExceedsData(f"rank {rank} exceeds sample count {n}")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return PcaSpace(np.zeros(X.shape[1]), Vt[:rank].T, s[:rank] / np.sqrt(n))


def build_shape_space(neutral_templates: list[np.ndarray], rank: int) -> PcaSpace:
    """Mean head plus orthonormal shape components from neutralized subjects."""
    if len(neutral_templates) < 2:
        raise RankExceedsData("shape space needs at least 2 subjects")
    X = np.stack([np.asarray(t, dtype=np.float64).ravel() for t in neutral_templates])
    return pca_centered(X, rank)


def build_trait_space(pre_templates: list[np.ndarray], post_templates: list[np.ndarray],
                      rank: int) -> PcaSpace:
    """Uncentered PCA of post-minus-pre offsets: gamma = 0 means no modification."""
    if not pre_templates or len(pre_templates) != len(post_templates):
        raise NoPairs("trait space needs matched pre/post pairs")
    D = np.stack([
        (np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)).ravel()
        for a, b in zip(pre_templates, post_templates)
    ])
    if np.abs(D).max() < 1e-12:
        warnings.warn("all pre/post offsets are zero; trait space has zero variance")
    rank = min(rank, D.shape[0])
    return pca_uncentered(D, rank)


def build_appearance_space(textures: list[np.ndarray], rank: int) -> PcaSpace:
    """PCA directly on flattened, equal-size texture images."""
    shapes = {np.asarray(t).shape for t in textures}
    if len(shapes) != 1:
        raise RankExceedsData("textures must share one shape")
    X = np.stack([np.asarray(t, dtype=np.float64).ravel() for t in textures])
    return pca_centered(X, rank)


# ---------------------------------------------------------------------------
# metrics

def compactness(space: PcaSpace, data: np.ndarray) -> np.ndarray:
    """Cumulative explained-variance ratio per component count (1..rank).

    Ratios come from the centered data spectrum, so a space spanning the data
    reaches exactly 1.0 at full rank.
    """
    X = np.atleast_2d(np.asarray(data, dtype=np.float64)) - space.mean
    s = np.linalg.svd(X, compute_uv=False)
    lam = np.zeros(max(space.rank, len(s)))
    lam[: len(s)] = s ** 2
    cum = np.cumsum(lam)
    return cum[: space.rank] / cum[-1]


def generalization(space: PcaSpace, heldout: np.ndarray) -> dict[str, np.ndarray]:
    """Held-out reconstruction error versus component count.

    Returns per-count MSVE in mm^2 and its root in mm; least-squares best-fit
    coefficients reduce to projections because components are orthonormal.
    """
    X = np.atleast_2d(np.asarray(heldout, dtype=np.float64))
    n_vertices = X.shape[1] // 3
    counts = np.arange(1, space.rank + 1)
    msve = np.empty(len(counts))
    coeffs = space.project(X)
    for i, k in enumerate(counts):
        recon = space.reconstruct(coeffs[:, :k], rank=k)
        diff = (X - recon).reshape(len(X), n_vertices, 3)
        msve[i] = float((diff ** 2).sum(axis=2).mean())
    return {"components": counts, "msve_mm2": msve, "rmse_mm": np.sqrt(msve)}


# ---------------------------------------------------------------------------
# shape regularizer

def shape_reg_energy(face_vertices: np.ndarray, initial_basis: np.ndarray,
                     mean_face: np.ndarray | None = None,
                     literal: bool = False) -> float:
    """Penalty tying the face block to the initial shape space.

    Default form penalizes the component orthogonal to the span (the stated
    intent); `literal=True` penalizes the in-span projection coefficients
    instead, matching the printed formula.
    """
    r = np.asarray(face_vertices, dtype=np.float64).ravel()
    if mean_face is not None:
        r = r - np.asarray(mean_face, dtype=np.float64).ravel()
    coeffs = initial_basis.T @ r
    if literal:
        return float(coeffs @ coeffs)
    resid = r - initial_basis @ coeffs
    return float(resid @ resid)


def _sreg_value_grad(face_flat: np.ndarray, basis: np.ndarray, mean_flat: np.ndarray,
                     literal: bool, scale: float) -> tuple[float, np.ndarray]:
    r = face_flat - mean_flat
    coeffs = basis.T @ r
    if literal:
        return scale * float(coeffs @ coeffs), scale * 2.0 * (basis @ coeffs)
    resid = r - basis @ coeffs
    return scale * float(resid @ resid), scale * 2.0 * (resid - basis @ (basis.T @ resid))


# ---------------------------------------------------------------------------
# collision

def collision_energy(face: TriMesh, skull: TriMesh) -> float:
    """Sum of squared penetration depths of face vertices inside the skull.

    A face vertex is inside when it lies behind the tangent plane of its
    nearest skull vertex (negative dot with that vertex normal).
    """
    val, _ = collision_value_grad(face.vertices, skull)
    return val


def collision_value_grad(face_vertices: np.ndarray, skull: TriMesh) -> tuple[float, np.ndarray]:
    normals = skull.ensure_normals()
    idx, _ = nearest_vertices(face_vertices, skull.vertices)
    s = ((face_vertices - skull.vertices[idx]) * normals[idx]).sum(axis=1)
    inside = s < 0.0
    grad = np.zeros_like(face_vertices)
    grad[inside] = 2.0 * s[inside, None] * normals[idx][inside]
    return float((s[inside] ** 2).sum()), grad


# ---------------------------------------------------------------------------
# neutralization

@dataclass
class NeutralizeResult:
    template: np.ndarray        # (N, 3) personal neutral template
    theta: np.ndarray
    phi: np.ndarray
    trace: list[dict]


def _record_targets(model: SculptorModel, record: SubjectRecord):
    rows, targets = [], []
    lo_f, hi_f = model.face_range
    rows.append(np.arange(lo_f, hi_f))
    targets.append(record.face.vertices)
    if record.skull is not None:
        lo_s, hi_s = model.skull_range
        rows.append(np.arange(lo_s, hi_s))
        targets.append(record.skull.vertices)
    return np.concatenate(rows), np.concatenate(targets)


def _target_edges(model: SculptorModel, record: SubjectRecord):
    lo_f, hi_f = model.face_range
    edges = unique_edges(model.faces_by_part["face"])
    verts = np.zeros((model.n_vertices, 3))
    verts[lo_f:hi_f] = record.face.vertices
    if record.skull is not None:
        lo_s, hi_s = model.skull_range
        skull_edges = np.concatenate([
            unique_edges(model.faces_by_part["mandible"]),
            unique_edges(model.faces_by_part["maxilla"]),
        ])
        edges = np.concatenate([edges, skull_edges])
        verts[lo_s:hi_s] = record.skull.vertices
    lengths = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
    return edges, lengths


class _TemplateProblem:
    """Free-vertex solve for the personal template at fixed pose/expression."""

    def __init__(self, model: SculptorModel, record: SubjectRecord, cfg: TrainConfig,
                 lambda_edge: float, theta: np.ndarray, phi: np.ndarray,
                 initial_basis: np.ndarray | None):
        self.model = model
        self.cfg = cfg
        self.lambda_edge = lambda_edge
        self.params = ParamVector.zeros(model)
        self.params.theta = np.asarray(theta, dtype=np.float64)
        self.params.phi = np.asarray(phi, dtype=np.float64)
        self.rows, self.targets = _record_targets(model, record)
        self.edges, self.edge_lengths = _target_edges(model, record)
        N = model.n_vertices
        self.lap = uniform_laplacian(N, model.template_mesh().faces)
        self.lap_ref = self.lap @ model.template_vertices
        self.initial_basis = initial_basis
        lo, hi = model.face_range
        self.face_slice = slice(3 * lo, 3 * hi)
        self.mean_face_flat = model.template_vertices[lo:hi].ravel()
        self.n_face_coords = 3 * (hi - lo)

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        model, cfg = self.model, self.cfg
        T = x.reshape(-1, 3)
        state = ForwardState(model, self.params, base_rest=T)
        v = state.vertices

        diff = v[self.rows] - self.targets
        n_rows = len(self.rows)
        e_vert = float((diff ** 2).sum() / n_rows)
        G = np.zeros_like(v)
        np.add.at(G, self.rows, (2.0 * cfg.lambda_vert / n_rows) * diff)

        e_edge = 0.0
        if self.lambda_edge > 0:
            a, b = self.edges[:, 0], self.edges[:, 1]
            d = v[a] - v[b]
            lengths = np.linalg.norm(d, axis=1)
            r = lengths - self.edge_lengths
            n_e = len(self.edges)
            e_edge = float((r ** 2).mean())
            ge = (2.0 * self.lambda_edge / n_e) * (r / np.maximum(lengths, 1e-12))[:, None] * d
            np.add.at(G, a, ge)
            np.add.at(G, b, -ge)

        rest_grad, joint_grad, _, _, _ = lbs_backprop(state, G)
        grad = rest_grad.copy()
        lo_s, hi_s = model.skull_range
        grad[lo_s:hi_s] += np.asarray(
            model.joint_regressor.T @ joint_grad
        ).reshape(-1, 3)

        # Laplacian tie to the general template (per-vertex mean reduction)
        N = model.n_vertices
        ldiff = self.lap @ T - self.lap_ref
        e_lap = float((ldiff ** 2).sum() / N)
        grad += (2.0 * cfg.lambda_lap / N) * (self.lap.T @ ldiff)

        e_sreg = 0.0
        if self.initial_basis is not None and cfg.lambda_sreg > 0:
            scale = 1.0 / self.n_face_coords
            val, g = _sreg_value_grad(x[self.face_slice], self.initial_basis,
                                      self.mean_face_flat, cfg.sreg_literal, scale)
            e_sreg = val
            grad_flat = grad.ravel()
            grad_flat[self.face_slice] += cfg.lambda_sreg * g
            e_sreg_w = cfg.lambda_sreg * e_sreg
        else:
            e_sreg_w = 0.0

        total = (cfg.lambda_vert * e_vert + self.lambda_edge * e_edge
                 + cfg.lambda_lap * e_lap + e_sreg_w)
        return total, grad.ravel()

    def energy_terms(self, x: np.ndarray) -> dict[str, float]:
        total, _ = self.value_and_grad(x)
        return {"total": total}


def neutralize_subject(record: SubjectRecord, model: SculptorModel, cfg: TrainConfig,
                       lambda_edge: float | None = None,
                       initial_basis: np.ndarray | None = None,
                       pose_prior: float | None = None,
                       fixed_pose: tuple[np.ndarray, np.ndarray] | None = None,
                       ) -> NeutralizeResult:
    """Two-block coordinate descent for (personal template, pose, expression).

    A parametric fit on the current bases seeds the decomposition (a free
    template could otherwise absorb jaw translation, which the data alone
    cannot disambiguate); block A then fits (theta, phi) with the template
    fixed and block B solves the free-vertex template with pose fixed. The
    traced total energy is non-increasing because each block is warm-started
    and monotone. With `fixed_pose` the pose blocks are skipped entirely,
    which pairs a deformity-carrying scan with its partner's pose.
    """
    if lambda_edge is None:
        lambda_edge = cfg.lambda_edge_rest
    if pose_prior is None:
        pose_prior = cfg.lambda_pose_neutral
    rows, targets = _record_targets(model, record)
    edges, edge_lengths = _target_edges(model, record)

    if fixed_pose is not None:
        theta = np.asarray(fixed_pose[0], dtype=np.float64).copy()
        phi = np.asarray(fixed_pose[1], dtype=np.float64).copy()
        T = model.template_vertices.copy()
    else:
        warm_free = ["theta"]
        if model.n_beta:
            warm_free.append("beta")
        if model.n_gamma:
            warm_free.append("gamma")
        if model.n_phi:
            warm_free.append("phi")
        warm_objs = [VertexObjective(rows, targets, weight=cfg.lambda_vert, name="vert")]
        warm_edges = [EdgeObjective(edges, edge_lengths, weight=lambda_edge)] \
            if lambda_edge > 0 else []
        warm = FitProblem(model, warm_objs, tuple(warm_free),
                          FitPriors(1e-6, 1e-6, 1e-6, lambda_theta=pose_prior),
                          edge_objectives=warm_edges)
        seed, _, _ = warm.solve(max_iter=cfg.subject_fit_iterations)
        T = personalize(model, seed.beta, seed.gamma)
        theta = seed.theta
        phi = seed.phi

    trace: list[dict] = []
    for it in range(cfg.neutral_iterations):
        if fixed_pose is None:
            # block A: pose and expression against the current template
            objs = [VertexObjective(rows, targets, weight=cfg.lambda_vert, name="vert")]
            eobjs = [EdgeObjective(edges, edge_lengths, weight=lambda_edge)] \
                if lambda_edge > 0 else []
            prob = FitProblem(model, objs, ("theta", "phi"),
                              FitPriors(lambda_phi=1e-8, lambda_theta=pose_prior),
                              base_rest=T, edge_objectives=eobjs)
            init = ParamVector.zeros(model)
            init.theta, init.phi = theta, phi
            prob.init = init
            fitted, _, _ = prob.solve(max_iter=cfg.subject_fit_iterations)
            theta, phi = fitted.theta, fitted.phi

        # block B: free-vertex template at fixed pose/expression
        tprob = _TemplateProblem(model, record, cfg, lambda_edge, theta, phi, initial_basis)
        res = minimize(tprob.value_and_grad, T.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": cfg.subject_fit_iterations, "ftol": 1e-14})
        T = res.x.reshape(-1, 3)
        trace.append({"iteration": it, "total": float(res.fun)})
        if it > 0 and abs(trace[-2]["total"] - trace[-1]["total"]) <= 1e-10 * max(
                1.0, trace[-2]["total"]):
            break
    return NeutralizeResult(T, theta, phi, trace)


# ---------------------------------------------------------------------------
# pose / skinning learning

@dataclass
class PoseLearnResult:
    skinning: np.ndarray
    pose_basis: np.ndarray
    subject_params: list[ParamVector]
    report: dict


def learn_pose(corpus: list[SubjectRecord], model: SculptorModel, cfg: TrainConfig,
               fit_priors: FitPriors | None = None) -> PoseLearnResult:
    """Alternate per-subject (beta, gamma, theta, phi) fits with a global
    (skinning, pose blend shape) update on the posed face corpus.

    Only the face block of both quantities is learned: skull skinning stays
    hard and pose correctives live on the soft-tissue band. Jaw weights are
    box-projected onto [0, 1] by the bounded quasi-Newton solve, which is the
    two-joint probability simplex.
    """
    lo_f, hi_f = model.face_range
    n_face = hi_f - lo_f
    face_rows = np.arange(lo_f, hi_f)
    w0 = model.skinning[:, 1].copy()
    P0 = model.pose_basis.copy()
    priors = fit_priors or FitPriors(lambda_beta=cfg.lambda_beta,
                                     lambda_gamma=cfg.lambda_gamma,
                                     lambda_phi=1e-6)
    work = replace_model_pose(model, w0, P0)
    subject_params: list[ParamVector] = [ParamVector.zeros(model) for _ in corpus]
    report: dict = {"outer": []}

    for outer in range(cfg.pose_outer_iterations):
        # per-subject parameter fits on the current model
        for k, rec in enumerate(corpus):
            objs = [VertexObjective(face_rows, rec.face.vertices, weight=cfg.lambda_vert,
                                    name="face")]
            prob = FitProblem(work, objs, ("beta", "gamma", "theta", "phi"), priors,
                              init=subject_params[k])
            subject_params[k], _, _ = prob.solve(max_iter=cfg.subject_fit_iterations)

        # global step over (face jaw weights, face pose blend rows)
        states = [ForwardState(work, p) for p in subject_params]
        feats = [pose_feature(p.theta) for p in subject_params]
        skulls = [TriMesh(s.vertices[model.skull_range[0]:model.skull_range[1]],
                          np.concatenate([model.faces_by_part["mandible"],
                                          model.faces_by_part["maxilla"]]))
                  for s in states]

        def unpack(x):
            w_face = x[:n_face]
            P_face = x[n_face:].reshape(3 * n_face, 12)
            return w_face, P_face

        def value_and_grad(x):
            w_face, P_face = unpack(x)
            w_full = w0.copy()
            w_full[lo_f:hi_f] = w_face
            total = 0.0
            gw = np.zeros(n_face)
            gP = np.zeros_like(P_face)
            for rec, p, feat, skull in zip(corpus, subject_params, feats, skulls):
                rest = _rest_with_pose(model, p, P_face, feat, lo_f, hi_f)
                joint = _subject_joint(model, p)
                R_j = rotation_matrix(p.theta_jaw)
                R_g = rotation_matrix(p.theta_global)
                c = model.rotation_center
                jawed = (rest - joint) @ R_j.T + joint + p.jaw_translation
                blended = (1.0 - w_full[:, None]) * rest + w_full[:, None] * jawed
                v = (blended - c) @ R_g.T + c

                diff = v[face_rows] - rec.face.vertices
                e_vert = float((diff ** 2).sum() / n_face)
                G = np.zeros_like(v)
                G[face_rows] = (2.0 * cfg.lambda_vert / n_face) * diff
                total += cfg.lambda_vert * e_vert

                if cfg.lambda_col > 0:
                    e_col, g_col = collision_value_grad(v[face_rows], skull)
                    total += cfg.lambda_col * e_col
                    G[face_rows] += cfg.lambda_col * g_col

                H = G @ R_g
                gw += (H * (jawed - rest)).sum(axis=1)[lo_f:hi_f]
                rest_grad = (1.0 - w_full[:, None]) * H + w_full[:, None] * (H @ R_j)
                gP += np.outer(rest_grad[lo_f:hi_f].ravel(), feat)

            dw = w_face - w0[lo_f:hi_f]
            total += cfg.lambda_w_init * float(dw @ dw)
            gw += 2.0 * cfg.lambda_w_init * dw
            total += cfg.lambda_pose_frob * float((P_face ** 2).sum())
            gP += 2.0 * cfg.lambda_pose_frob * P_face
            return total, np.concatenate([gw, gP.ravel()])

        x0 = np.concatenate([w0[lo_f:hi_f], P0[3 * lo_f:3 * hi_f].reshape(-1, 12).ravel()])
        bounds = [(0.0, 1.0)] * n_face + [(None, None)] * (3 * n_face * 12)
        res = minimize(value_and_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.global_fit_iterations, "ftol": 1e-14})
        w_face, P_face = unpack(res.x)
        w0 = w0.copy()
        w0[lo_f:hi_f] = w_face
        P0 = P0.copy()
        P0[3 * lo_f:3 * hi_f] = P_face
        work = replace_model_pose(model, w0, P0)
        report["outer"].append({"iteration": outer, "energy": float(res.fun)})

    skinning = np.stack([1.0 - w0, w0], axis=1)
    return PoseLearnResult(skinning, P0, subject_params, report)


def _rest_with_pose(model, params, P_face, feat, lo_f, hi_f):
    rest = (model.template_vertices.ravel()
            + model.shape_basis @ params.beta
            + model.trait_basis @ params.gamma).reshape(-1, 3)
    rest[lo_f:hi_f] += (P_face @ feat).reshape(-1, 3)
    rest[lo_f:hi_f] += (model.expr_basis @ params.phi).reshape(-1, 3)
    return rest


def _subject_joint(model, params):
    lo, hi = model.skull_range
    sk = (model.template_vertices.ravel()
          + model.shape_basis @ params.beta
          + model.trait_basis @ params.gamma).reshape(-1, 3)[lo:hi]
    return np.asarray(model.joint_regressor @ sk.ravel()).ravel()


def replace_model_pose(model: SculptorModel, jaw_weights: np.ndarray,
                       pose_basis: np.ndarray) -> SculptorModel:
    from dataclasses import replace as dc_replace

    return dc_replace(model, skinning=np.stack([1.0 - jaw_weights, jaw_weights], axis=1),
                      pose_basis=pose_basis)


# ---------------------------------------------------------------------------
# full training loop

def _parallel_map(fn, items, jobs):
    """Order-preserving map; thread pool when jobs > 1 (results deterministic)."""
    if jobs <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def alternate_train(lucy_corpus: list[SubjectRecord], face_corpus: list[SubjectRecord],
                    cfg: TrainConfig, init_model: SculptorModel,
                    initial_basis: np.ndarray | None = None) -> tuple[SculptorModel, dict]:
    """Alternating optimization over the two corpora until convergence.

    Each round neutralizes the skull+face corpus, rebuilds shape/trait spaces
    (shape from post-stage plus face-only neutrals, trait from paired pre/post
    offsets), then relearns skinning and pose blend shapes on the posed
    face-only corpus.
    """
    model = init_model
    metrics: dict = {"rounds": []}
    prev_total = np.inf
    for rnd in range(cfg.max_rounds):
        lambda_edge = cfg.lambda_edge_first if rnd == 0 else cfg.lambda_edge_rest
        neutrals: dict[str, NeutralizeResult] = {}
        total = 0.0
        bootstrap = model.n_beta == 0
        if bootstrap:
            # No spaces yet. Registered records are template-aligned with only
            # minor pose (they come out of the Procrustes-seeded registration),
            # so they seed the spaces directly; pose-fitting here would leak
            # skeletal deformity into the pose and poison the pre/post diffs.
            for rec in lucy_corpus:
                T = model.template_vertices.copy()
                lo_f, hi_f = model.face_range
                T[lo_f:hi_f] = rec.face.vertices
                if rec.skull is not None:
                    lo_s, hi_s = model.skull_range
                    T[lo_s:hi_s] = rec.skull.vertices
                neutrals[f"{rec.id}:{rec.stage}"] = NeutralizeResult(
                    T, np.zeros(9), np.zeros(model.n_phi),
                    [{"iteration": 0, "total": 0.0, "bootstrap": True}])
        else:
            # pose is estimated on the corrected (post) scans only, where it is
            # identifiable, and reused for the paired deformity (pre) scans,
            # which share the scanning protocol
            def _neutralize_post(rec):
                return rec, neutralize_subject(rec, model, cfg, lambda_edge=lambda_edge,
                                               initial_basis=initial_basis)

            post_recs = [r for r in lucy_corpus if r.stage == "post"]
            post_poses: dict[str, tuple[np.ndarray, np.ndarray]] = {}
            for rec, out in _parallel_map(_neutralize_post, post_recs, cfg.jobs):
                post_poses[rec.id] = (out.theta, out.phi)
                neutrals[f"{rec.id}:{rec.stage}"] = out
                total += out.trace[-1]["total"]

            def _neutralize_pre(rec):
                return rec, neutralize_subject(rec, model, cfg, lambda_edge=lambda_edge,
                                               initial_basis=initial_basis,
                                               fixed_pose=post_poses.get(rec.id))

            pre_recs = [r for r in lucy_corpus if r.stage != "post"]
            for rec, out in _parallel_map(_neutralize_pre, pre_recs, cfg.jobs):
                neutrals[f"{rec.id}:{rec.stage}"] = out
                total += out.trace[-1]["total"]

        # spaces come from corpus A; corpus B only contributes pose/skinning
        shape_inputs = [neutrals[f"{r.id}:{r.stage}"].template
                        for r in lucy_corpus if r.stage == "post"]
        if len(shape_inputs) < 2:
            warnings.warn("degenerate corpus: fewer than 2 subjects; "
                          "returning zero-variance spaces")
            shape = PcaSpace(np.asarray(shape_inputs[0]).ravel() if shape_inputs
                             else model.template_vertices.ravel(),
                             np.zeros((3 * model.n_vertices, 0)), np.zeros(0))
        else:
            rank = min(cfg.rank_beta, len(shape_inputs) - 1)
            shape = build_shape_space(shape_inputs, rank)

        pre_ids = {r.id for r in lucy_corpus if r.stage == "pre"}
        post_ids = {r.id for r in lucy_corpus if r.stage == "post"}
        paired = sorted(pre_ids & post_ids)
        if paired:
            pre_t = [neutrals[f"{i}:pre"].template for i in paired]
            post_t = [neutrals[f"{i}:post"].template for i in paired]
            trait = build_trait_space(pre_t, post_t, min(cfg.rank_gamma, len(paired)))
        else:
            trait = PcaSpace(np.zeros(3 * model.n_vertices),
                             np.zeros((3 * model.n_vertices, 0)), np.zeros(0))

        from dataclasses import replace as dc_replace

        model = dc_replace(
            model,
            template_vertices=shape.mean.reshape(-1, 3),
            shape_basis=shape.components,
            trait_basis=trait.components,
            sigma_beta=shape.sigma,
            sigma_gamma=trait.sigma,
            trait_axis_names=[f"trait-{i}" for i in range(trait.rank)],
        )

        pose = learn_pose(face_corpus, model, cfg)
        model = dc_replace(model, skinning=pose.skinning, pose_basis=pose.pose_basis)
        pose_energy = pose.report["outer"][-1]["energy"] if pose.report["outer"] else 0.0
        total += pose_energy

        rel = abs(prev_total - total) / max(abs(total), 1e-12)
        metrics["rounds"].append({
            "round": rnd, "neutralize_plus_pose_energy": total,
            "relative_change": None if not np.isfinite(rel) else rel,
            "shape_rank": shape.rank, "trait_rank": trait.rank,
        })
        if rel <= cfg.tol:
            break
        prev_total = total
    return model, metrics


# ---------------------------------------------------------------------------
# corpus manifest I/O

def save_corpus(records: list[SubjectRecord], directory: str | Path) -> Path:
    """Write records and a manifest the loaders round-trip."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    subjects = []
    for rec in records:
        base = f"{rec.id}_{rec.stage.replace('-', '')}"
        entry: dict = {"id": rec.id, "stage": rec.stage}
        face_path = f"{base}_face.ply"
        save_mesh(rec.face, directory / face_path)
        entry["face"] = face_path
        if rec.skull is not None:
            skull_path = f"{base}_skull.ply"
            save_mesh(rec.skull, directory / skull_path)
            entry["skull"] = skull_path
        if rec.landmarks is not None:
            lmk_path = f"{base}_landmarks.json"
            save_landmarks(rec.landmarks, directory / lmk_path)
            entry["landmarks"] = lmk_path
        if rec.texture is not None:
            from PIL import Image

            tex_path = f"{base}_texture.png"
            img = Image.fromarray(np.clip(np.round(rec.texture * 255), 0, 255).astype(np.uint8))
            img.save(directory / tex_path)
            entry["texture"] = tex_path
        if rec.ground_truth is not None:
            gt_path = f"{base}_ground_truth.json"
            payload = {"note": "synthetic oracle data; not for training", **rec.ground_truth}
            (directory / gt_path).write_text(json.dumps(payload, indent=2, sort_keys=True))
            entry["ground_truth"] = gt_path
        subjects.append(entry)
    import hashlib

    checksums = {}
    for entry in subjects:
        for key in ("face", "skull", "landmarks", "texture", "ground_truth"):
            if key in entry:
                checksums[entry[key]] = hashlib.sha256(
                    (directory / entry[key]).read_bytes()
                ).hexdigest()
    manifest = {"subjects": subjects, "checksums": checksums}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory / "manifest.json"


def load_corpus(directory: str | Path) -> list[SubjectRecord]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    records = []
    for entry in manifest["subjects"]:
        texture = None
        if "texture" in entry:
            from PIL import Image

            texture = np.asarray(
                Image.open(directory / entry["texture"]).convert("RGB"), dtype=np.float64
            ) / 255.0
        ground_truth = None
        if "ground_truth" in entry:
            ground_truth = json.loads((directory / entry["ground_truth"]).read_text())
        records.append(SubjectRecord(
            id=entry["id"],
            stage=entry["stage"],
            face=load_mesh(directory / entry["face"]),
            skull=load_mesh(directory / entry["skull"]) if "skull" in entry else None,
            landmarks=load_landmarks(directory / entry["landmarks"])
            if "landmarks" in entry else None,
            texture=texture,
            ground_truth=ground_truth,
        ))
    return records
