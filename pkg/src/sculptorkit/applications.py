"""Downstream optimizations over a fitted model: completing partial skulls,
fusing skull parts of two characters, person-specific lipo-level editing, and
trait edits that preserve the subject's skin detail.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask, FewerThanTwoFits, SameDonor
from .fitting import FitPriors, FitProblem, VertexObjective, fit_to_scan
from .learning import collision_energy, pca_uncentered
from .mesh import TriMesh, hausdorff, msve, nearest_vertices
from .model import GeneratedHead, ParamVector, SculptorModel, generate, personalize


@dataclass
class LipoMap:
    """Per-face-vertex weights marking soft-tissue-variable regions, plus the
    person-specific displacement space refined on them."""

    weights: np.ndarray                      # (N_face,), in [0, 1], max 1
    basis: np.ndarray                        # (3 N_face, rank)
    delta_range: np.ndarray                  # (rank, 2) observed coefficient span
    deltas: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


@dataclass
class FusionSpec:
    donor_maxilla: str
    donor_mandible: str
    lambda_beta: float = 1e-6
    lambda_gamma: float = 1e-6
    lambda_theta: float = 1e-3   # targets are rest-pose parts; pose is a tiebreak
    lambda_sim: float = 0.5

    def __post_init__(self):
        if self.donor_maxilla == self.donor_mandible:
            raise SameDonor("character fusion needs two distinct donors")


# ---------------------------------------------------------------------------
# skull completion

def complete_skull(model: SculptorModel, partial_vertices: np.ndarray,
                   observed: np.ndarray, trait_seed: np.ndarray | None = None,
                   lambda_beta: float = 1e-6, lambda_gamma_seed: float = 10.0,
                   ground_truth: dict[str, TriMesh] | None = None,
                   max_iter: int = 300) -> tuple[GeneratedHead, ParamVector, dict]:
    """Infer the full head from a partially observed skull.

    `partial_vertices` holds skull-part vertices in template topology and
    `observed` marks which of them were actually seen. Shape coefficients are
    fitted against the observed vertices only; trait coefficients stay at the
    supplied seed (anchored), which is what makes repeated runs with different
    seeds produce distinct plausible mandibles over an identical maxilla fit.
    """
    observed = np.asarray(observed)
    if observed.dtype != bool:
        mask = np.zeros(model.n_skull, dtype=bool)
        mask[np.asarray(observed, dtype=np.int64)] = True
        observed = mask
    if not observed.any():
        raise EmptyMask("observation mask is empty")

    free = ["beta"]
    priors = FitPriors(lambda_beta=lambda_beta, lambda_gamma=lambda_gamma_seed)
    init = ParamVector.zeros(model)
    if trait_seed is not None:
        free.append("gamma")
        priors.gamma_anchor = np.asarray(trait_seed, dtype=np.float64).copy()
        init.gamma = priors.gamma_anchor.copy()

    result = fit_to_scan(
        model,
        target_skull=np.asarray(partial_vertices, dtype=np.float64),
        skull_observed=observed,
        free=tuple(free),
        priors=priors,
        init=init,
        max_iter=max_iter,
    )
    head = generate(model, result.params)
    report = {"observed_msve": result.msve.get("skull")}
    if ground_truth:
        for part, mesh in ground_truth.items():
            report[f"hausdorff_{part}"] = hausdorff(head.part_mesh(part), mesh)
    return head, result.params, report


# ---------------------------------------------------------------------------
# character fusion

def fuse_characters(model: SculptorModel, spec: FusionSpec,
                    params_a: ParamVector, params_b: ParamVector,
                    max_iter: int = 300) -> tuple[GeneratedHead, ParamVector, dict]:
    """Blend donor a's maxilla with donor b's mandible into one head.

    The fused skull target takes each part from its donor's neutral geometry;
    the face is kept close to donor a above the jawline and donor b below it
    (the upper/lower template masks), then (theta, beta, gamma) are optimized.
    """
    rest_a = personalize(model, params_a.beta, params_a.gamma)
    rest_b = personalize(model, params_b.beta, params_b.gamma)

    lo_mdb, hi_mdb = model.part_ranges["mandible"]
    lo_mxl, hi_mxl = model.part_ranges["maxilla"]
    lo_f, hi_f = model.face_range

    objectives = [
        VertexObjective(np.arange(lo_mxl, hi_mxl), rest_a[lo_mxl:hi_mxl],
                        weight=1.0, name="maxilla"),
        VertexObjective(np.arange(lo_mdb, hi_mdb), rest_b[lo_mdb:hi_mdb],
                        weight=1.0, name="mandible"),
    ]
    upper = model.vertex_groups.get("upper_face")
    lower = model.vertex_groups.get("lower_face")
    if upper is not None and lower is not None:
        objectives.append(VertexObjective(upper, rest_a[upper],
                                          weight=spec.lambda_sim, name="sim_upper"))
        objectives.append(VertexObjective(lower, rest_b[lower],
                                          weight=spec.lambda_sim, name="sim_lower"))

    priors = FitPriors(lambda_beta=spec.lambda_beta, lambda_gamma=spec.lambda_gamma,
                       lambda_theta=spec.lambda_theta)
    problem = FitProblem(model, objectives, ("beta", "gamma", "theta"), priors)
    params, energy, _ = problem.solve(max_iter=max_iter)
    head = generate(model, params)
    report = {
        "energy": energy,
        "maxilla_msve_to_a": msve(head.part_vertices("maxilla"), rest_a[lo_mxl:hi_mxl]),
        "mandible_msve_to_b": msve(head.part_vertices("mandible"), rest_b[lo_mdb:hi_mdb]),
    }
    return head, params, report


# ---------------------------------------------------------------------------
# lipo pipeline

def build_lipo_map(model: SculptorModel, head_fits: list[TriMesh | np.ndarray],
                   skull: TriMesh) -> LipoMap:
    """Mean squared face-to-skull distance per vertex, max-normalized.

    Vertices that sit far from the bone across the subject's head fits are the
    ones that move with soft-tissue volume; they get weights near 1.
    """
    if len(head_fits) < 2:
        raise FewerThanTwoFits("need at least two head fits of the subject")
    lo_f, hi_f = model.face_range
    n_face = hi_f - lo_f
    acc = np.zeros(n_face)
    for fit in head_fits:
        verts = fit.vertices if isinstance(fit, TriMesh) else np.asarray(fit)
        if len(verts) != n_face:
            raise EmptyMask("head fit is not in face template topology")
        _, d = nearest_vertices(verts, skull.vertices)
        acc += d ** 2
    acc /= len(head_fits)
    peak = acc.max()
    if peak <= 0.0:
        warnings.warn("all head fits coincide with the skull; lipo map is zero")
        weights = np.zeros(n_face)
    else:
        weights = acc / peak
    return LipoMap(weights, np.zeros((3 * n_face, 0)), np.zeros((0, 2)))


def lipo_energy(head_vertices: np.ndarray, fit_vertices: np.ndarray,
                neutral_vertices: np.ndarray, weights: np.ndarray,
                ) -> tuple[float, np.ndarray]:
    """Per-vertex weighted pull between a subject fit and the neutral head.

    E = sum_i [w_i |g_i - t_i|^2 + (1 - w_i) |g_i - n_i|^2]; returns the value
    and its gradient with respect to the head vertices.
    """
    g = np.asarray(head_vertices, dtype=np.float64)
    t = np.asarray(fit_vertices, dtype=np.float64)
    n = np.asarray(neutral_vertices, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    dt = g - t
    dn = g - n
    val = float((w * (dt ** 2) + (1.0 - w) * (dn ** 2)).sum())
    grad = 2.0 * (w * dt + (1.0 - w) * dn)
    return val, grad


def optimize_lipo_components(lipo_map: LipoMap, head_fits: list[TriMesh | np.ndarray],
                             neutral: TriMesh | np.ndarray,
                             rank: int | None = None) -> LipoMap:
    """Refine the person-specific displacement space under the lipo map.

    For each fit the pointwise optimum of the map-weighted energy is the blend
    w * fit + (1 - w) * neutral, so the rank-constrained minimizer is the
    uncentered PCA of the blended offsets; a final PCA re-fit on the recovered
    offsets yields orthonormal components with delta = 0 at the neutral head.
    """
    neutral_v = neutral.vertices if isinstance(neutral, TriMesh) else np.asarray(neutral)
    w = lipo_map.weights[:, None]
    targets = []
    for fit in head_fits:
        verts = fit.vertices if isinstance(fit, TriMesh) else np.asarray(fit)
        targets.append((w * (verts - neutral_v)).ravel())
    Y = np.stack(targets)
    rank = min(rank or len(head_fits), len(head_fits))
    space = pca_uncentered(Y, rank)
    coeffs = Y @ space.components
    recovered = coeffs @ space.components.T           # optimal offsets, rank-limited
    refined = pca_uncentered(recovered, rank)
    deltas = recovered @ refined.components
    rng = np.stack([deltas.min(axis=0), deltas.max(axis=0)], axis=1)
    return LipoMap(lipo_map.weights, refined.components, rng, deltas)


def lipo_head(lipo_map: LipoMap, neutral: TriMesh, delta: np.ndarray) -> TriMesh:
    """Reconstruct the head at a lipo coefficient; delta = 0 is the neutral."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    offset = (lipo_map.basis @ delta).reshape(-1, 3)
    return neutral.with_vertices(neutral.vertices + offset)


def lipo_collision_profile(lipo_map: LipoMap, neutral: TriMesh, skull: TriMesh,
                           samples: int = 11) -> list[float]:
    """Collision energy at evenly spaced deltas across the observed range."""
    out = []
    lo = lipo_map.delta_range[:, 0]
    hi = lipo_map.delta_range[:, 1]
    for t in np.linspace(0.0, 1.0, samples):
        delta = lo + t * (hi - lo)
        head = lipo_head(lipo_map, neutral, delta)
        out.append(collision_energy(head, skull))
    return out


# ---------------------------------------------------------------------------
# skin-offset-preserving trait editing

def edit_with_skin_offset(model: SculptorModel, scan: TriMesh,
                          gamma_edit: np.ndarray,
                          priors: FitPriors | None = None,
                          max_iter: int = 300) -> tuple[TriMesh, dict]:
    """Apply a trait edit to a scanned face while keeping its skin detail.

    Fit the model, remember the per-vertex residual (the subject's personal
    skin offset), regenerate with the edited trait coefficients, and add the
    residual back. A zero edit reproduces the scan up to the fit's own
    tolerance because the residual is carried over verbatim.
    """
    priors = priors or FitPriors(lambda_beta=1e-6, lambda_gamma=1e-6, lambda_phi=1e-6)
    fit = fit_to_scan(model, target_face=scan, priors=priors, max_iter=max_iter)
    edited = fit.params.copy()
    edited.gamma = edited.gamma + np.asarray(gamma_edit, dtype=np.float64).ravel()
    head = generate(model, edited, want_texture=False)
    lo_f, hi_f = model.face_range
    out_vertices = head.vertices[lo_f:hi_f] + fit.skin_offset
    report = {"fit_msve": fit.msve.get("face"), "params": edited}
    return scan.with_vertices(out_vertices), report
