"""Non-rigid registration by embedded deformation over a coarse node graph.

A graph of control nodes is sampled on the template at interval sigma; each
template vertex blends the affine transforms of nearby nodes through
compactly supported radial weights. Registration alternates nearest-neighbor
correspondence search with quasi-Newton minimization of a data + landmark +
regularization energy, coarse to fine over a descending sigma schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import (
    DimensionMismatch,
    DivergedOptimization,
    NoMatchedNames,
    NonFiniteEnergy,
    SigmaTooLargeForMesh,
)
from .mesh import (
    LandmarkSet,
    TriMesh,
    chamfer,
    procrustes_align,
    uniform_laplacian,
    vertex_normals,
)


@dataclass
class DeformationGraph:
    """Control nodes with per-node affine transforms and vertex binding weights.

    node_transforms[k] is a 3x4 block [A | t]; a node acts on a vertex v as
    A (v - x_k) + x_k + t, so A = I, t = 0 is the identity.
    bind_weights is (n_vertices, n_nodes), rows non-negative and summing to 1.
    """

    node_positions: np.ndarray
    node_transforms: np.ndarray
    edges: np.ndarray
    bind_weights: csr_matrix
    node_interval: float

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    def identity_params(self) -> np.ndarray:
        return np.zeros(12 * self.n_nodes)

    def params(self) -> np.ndarray:
        """Current transforms as the flat (A - I, t) parameter vector."""
        p = np.zeros((self.n_nodes, 12))
        p[:, :9] = (self.node_transforms[:, :, :3] - np.eye(3)).reshape(self.n_nodes, 9)
        p[:, 9:] = self.node_transforms[:, :, 3]
        return p.ravel()

    def set_params(self, p: np.ndarray) -> None:
        p = np.asarray(p, dtype=np.float64).reshape(self.n_nodes, 12)
        self.node_transforms = np.concatenate(
            [p[:, :9].reshape(self.n_nodes, 3, 3) + np.eye(3), p[:, 9:].reshape(self.n_nodes, 3, 1)],
            axis=2,
        )


@dataclass
class RegionWeights:
    """Per-vertex multipliers (>= 1) boosting the regularizer in fragile regions."""

    multipliers: np.ndarray

    def __post_init__(self):
        self.multipliers = np.asarray(self.multipliers, dtype=np.float64).ravel()
        if self.multipliers.size and self.multipliers.min() < 1.0:
            raise ValueError("region multipliers must be >= 1")

    @classmethod
    def uniform(cls, n_vertices: int) -> "RegionWeights":
        return cls(np.ones(n_vertices))

    @classmethod
    def from_groups(cls, n_vertices: int, groups: dict[str, np.ndarray],
                    boosted: tuple[str, ...] = ("orbit", "nasal"), factor: float = 50.0) -> "RegionWeights":
        m = np.ones(n_vertices)
        for name in boosted:
            if name in groups:
                m[np.asarray(groups[name], dtype=np.int64)] = factor
        return cls(m)


@dataclass
class RegistrationConfig:
    """Weights and schedule for skull/face registration."""

    sigma_schedule: tuple[float, ...] = (50.0, 20.0, 8.0, 2.0)
    lambda_data: float = 1.0          # chamfer-vs-normal balance inside the data term
    lambda_lmk: float = 0.01
    lambda_reg: float = 0.001
    lambda_lap: float = 0.0
    icp_iterations: int = 5
    inner_iterations: int = 40
    patience: int = 3
    radius_scale: float = 2.0         # RBF support radius = radius_scale * sigma
    graph_neighbors: int = 4
    normal_rejection: bool = False    # drop correspondences with opposing normals
    symmetric_data: bool = True

    @classmethod
    def maxilla_defaults(cls) -> "RegistrationConfig":
        return cls(lambda_data=0.5, lambda_lmk=0.005, lambda_reg=0.0005, normal_rejection=True)

    @classmethod
    def mandible_defaults(cls) -> "RegistrationConfig":
        return cls(lambda_data=1.0, lambda_lmk=0.01, lambda_reg=0.001)

    @classmethod
    def face_defaults(cls) -> "RegistrationConfig":
        return cls(lambda_data=0.5, lambda_lmk=0.03, lambda_reg=0.0, lambda_lap=10.0)


# ---------------------------------------------------------------------------
# graph construction and application

def _rbf_weight(dist: np.ndarray, radius: float) -> np.ndarray:
    w = 1.0 - (dist / radius) ** 2
    np.clip(w, 0.0, None, out=w)
    return w * w


def build_graph(mesh: TriMesh, sigma: float, radius_scale: float = 2.0,
                k_neighbors: int = 4) -> DeformationGraph:
    """Sample control nodes at interval sigma and bind vertices with RBF weights."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if mesh.n_vertices == 0:
        raise SigmaTooLargeForMesh("cannot build a graph on an empty mesh")
    V = mesh.vertices

    # greedy poisson-disk style sampling in vertex order: deterministic
    node_idx: list[int] = []
    node_pos: list[np.ndarray] = []
    for i in range(len(V)):
        if not node_pos or np.min(np.linalg.norm(np.asarray(node_pos) - V[i], axis=1)) >= sigma:
            node_idx.append(i)
            node_pos.append(V[i])
    nodes = np.asarray(node_pos)
    if len(nodes) < 4:
        raise SigmaTooLargeForMesh(
            f"sigma={sigma} yields only {len(nodes)} nodes (need >= 4); reduce sigma"
        )

    # k-nearest connectivity, then bridge components to guarantee connectedness
    tree = cKDTree(nodes)
    k = min(k_neighbors + 1, len(nodes))
    _, nn = tree.query(nodes, k=k)
    pairs = set()
    for i in range(len(nodes)):
        for j in np.atleast_1d(nn[i])[1:]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    edges = np.array(sorted(pairs), dtype=np.int64)
    adj = csr_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(len(nodes), len(nodes))
    )
    n_comp, labels = connected_components(adj, directed=False)
    while n_comp > 1:
        a = np.where(labels == 0)[0]
        b = np.where(labels != 0)[0]
        d = ((nodes[a][:, None, :] - nodes[b][None, :, :]) ** 2).sum(axis=2)
        ia, ib = np.unravel_index(np.argmin(d), d.shape)
        pairs.add((min(a[ia], b[ib]), max(a[ia], b[ib])))
        edges = np.array(sorted(pairs), dtype=np.int64)
        adj = csr_matrix(
            (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(len(nodes), len(nodes))
        )
        n_comp, labels = connected_components(adj, directed=False)

    # vertex-node binding within the kernel support radius
    radius = radius_scale * sigma
    rows, cols, vals = [], [], []
    neighbor_lists = tree.query_ball_point(V, r=radius)
    for i, cand in enumerate(neighbor_lists):
        if cand:
            cand = np.asarray(cand, dtype=np.int64)
            w = _rbf_weight(np.linalg.norm(nodes[cand] - V[i], axis=1), radius)
            good = w > 0
            cand, w = cand[good], w[good]
        if len(cand) == 0:
            _, j = tree.query(V[i], k=1)
            cand, w = np.array([j]), np.array([1.0])
        rows.extend([i] * len(cand))
        cols.extend(cand.tolist())
        vals.extend((w / w.sum()).tolist())
    bind = csr_matrix((vals, (rows, cols)), shape=(len(V), len(nodes)))

    transforms = np.tile(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1), (len(nodes), 1, 1))
    return DeformationGraph(nodes, transforms, edges, bind, sigma)


def apply_graph(graph: DeformationGraph, mesh: TriMesh) -> TriMesh:
    """Blend per-node affine transforms onto the vertices."""
    if graph.bind_weights.shape[0] != mesh.n_vertices:
        raise DimensionMismatch(
            f"graph binds {graph.bind_weights.shape[0]} vertices, mesh has {mesh.n_vertices}"
        )
    phi = _assemble_phi(graph, mesh.vertices)
    out = mesh.vertices + (phi @ graph.params()).reshape(-1, 3)
    return mesh.with_vertices(out)


def _assemble_phi(graph: DeformationGraph, rest_vertices: np.ndarray) -> csr_matrix:
    """Sparse jacobian of deformed vertices w.r.t. the (A - I, t) node parameters.

    v'_i = v_i + sum_j w_ij [ (A_j - I)(v_i - x_j) + t_j ], linear in the params.
    """
    bw = graph.bind_weights.tocoo()
    i, j, w = bw.row, bw.col, bw.data
    d = rest_vertices[i] - graph.node_positions[j]  # (nnz, 3)
    rows, cols, vals = [], [], []
    for axis in range(3):  # output coordinate
        for l in range(3):  # column of A
            rows.append(3 * i + axis)
            cols.append(12 * j + 3 * axis + l)
            vals.append(w * d[:, l])
        rows.append(3 * i + axis)
        cols.append(12 * j + 9 + axis)
        vals.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = len(rest_vertices)
    return csr_matrix((vals, (rows, cols)), shape=(3 * n, 12 * graph.n_nodes))


# ---------------------------------------------------------------------------
# energy terms (all return value and gradient)

def arap_term(params: np.ndarray, graph: DeformationGraph,
              edge_multipliers: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """As-rigid-as-possible regularizer over directed graph edges.

    E = sum_{(i,j)} m_ij || (A_i - I) (x_j - x_i) + t_i - t_j ||^2, which is
    zero exactly when every node carries one common rigid motion.
    """
    K = graph.n_nodes
    p = np.asarray(params, dtype=np.float64).reshape(K, 12)
    A = p[:, :9].reshape(K, 3, 3)  # A - I
    t = p[:, 9:]
    e = np.concatenate([graph.edges, graph.edges[:, ::-1]], axis=0)
    if edge_multipliers is None:
        m = np.ones(len(e))
    else:
        m = np.concatenate([edge_multipliers, edge_multipliers])
    i, j = e[:, 0], e[:, 1]
    d = graph.node_positions[j] - graph.node_positions[i]
    r = np.einsum("nab,nb->na", A[i], d) + t[i] - t[j]
    val = float((m * (r ** 2).sum(axis=1)).sum())
    grad = np.zeros((K, 12))
    gA = 2.0 * m[:, None, None] * r[:, :, None] * d[:, None, :]  # dE/d(A_i)
    gt = 2.0 * m[:, None] * r
    np.add.at(grad[:, :9], i, gA.reshape(-1, 9))
    np.add.at(grad[:, 9:], i, gt)
    np.add.at(grad[:, 9:], j, -gt)
    return val, grad.ravel()


class LevelEnergy:
    """Registration energy at one sigma level with frozen correspondences.

    Quadratic in the node parameters; value_and_grad feeds L-BFGS directly.
    """

    def __init__(self, graph: DeformationGraph, rest: TriMesh, cfg: RegistrationConfig,
                 lmk_anchors: np.ndarray, lmk_targets: np.ndarray,
                 region: RegionWeights | None = None,
                 lap_reference: TriMesh | None = None):
        self.graph = graph
        self.rest = rest
        self.cfg = cfg
        self.phi = _assemble_phi(graph, rest.vertices)
        self.lmk_anchors = lmk_anchors
        self.lmk_targets = lmk_targets
        self.edge_mult = self._edge_multipliers(region)
        if cfg.lambda_lap > 0:
            self.lap = uniform_laplacian(rest.n_vertices, rest.faces)
            ref = lap_reference if lap_reference is not None else rest
            self.lap_ref = self.lap @ ref.vertices
        else:
            self.lap = None
        self.fwd_points = None
        self.fwd_mask = None
        self.rev_idx = None
        self.rev_points = None

    def _edge_multipliers(self, region: RegionWeights | None) -> np.ndarray | None:
        if region is None:
            return None
        # a node inherits the strongest multiplier among the vertices it influences
        bw = self.graph.bind_weights.tocoo()
        node_m = np.ones(self.graph.n_nodes)
        np.maximum.at(node_m, bw.col, region.multipliers[bw.row])
        e = self.graph.edges
        return np.maximum(node_m[e[:, 0]], node_m[e[:, 1]])

    def deform(self, params: np.ndarray) -> np.ndarray:
        return self.rest.vertices + (self.phi @ params).reshape(-1, 3)

    def set_correspondences(self, fwd_points: np.ndarray, fwd_mask: np.ndarray,
                            rev_idx: np.ndarray | None, rev_points: np.ndarray | None):
        self.fwd_points = fwd_points
        self.fwd_mask = fwd_mask.astype(np.float64)
        self.rev_idx = rev_idx
        self.rev_points = rev_points

    def terms(self, params: np.ndarray) -> dict[str, float]:
        val_d, _ = self.data_value_grad(self.deform(params))
        val_l, _ = self.landmark_value_grad(self.deform(params))
        val_r, _ = arap_term(params, self.graph, self.edge_mult)
        out = {"data": val_d, "landmark": val_l, "arap": val_r}
        if self.lap is not None:
            out["laplacian"] = self.laplacian_value_grad(self.deform(params))[0]
        return out

    def data_value_grad(self, deformed: np.ndarray) -> tuple[float, np.ndarray]:
        n_src = len(deformed)
        grad = np.zeros_like(deformed)
        diff = deformed - self.fwd_points
        w = self.fwd_mask
        val = float((w * (diff ** 2).sum(axis=1)).mean())
        grad += (2.0 / n_src) * w[:, None] * diff
        if self.rev_idx is not None:
            n_tgt = len(self.rev_points)
            rdiff = deformed[self.rev_idx] - self.rev_points
            val = 0.5 * (val + float((rdiff ** 2).sum(axis=1).mean()))
            grad *= 0.5
            np.add.at(grad, self.rev_idx, (1.0 / n_tgt) * rdiff)
        return val, grad

    def landmark_value_grad(self, deformed: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros_like(deformed)
        if len(self.lmk_anchors) == 0:
            return 0.0, grad
        diff = deformed[self.lmk_anchors] - self.lmk_targets
        np.add.at(grad, self.lmk_anchors, 2.0 * diff)
        return float((diff ** 2).sum()), grad

    def laplacian_value_grad(self, deformed: np.ndarray) -> tuple[float, np.ndarray]:
        d = self.lap @ deformed - self.lap_ref
        return float((d ** 2).sum()), 2.0 * (self.lap.T @ d)

    def value_and_grad(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        cfg = self.cfg
        deformed = self.deform(params)
        val_d, g_d = self.data_value_grad(deformed)
        val_l, g_l = self.landmark_value_grad(deformed)
        val_r, grad_p = arap_term(params, self.graph, self.edge_mult)
        total = cfg.lambda_data * val_d + cfg.lambda_lmk * val_l + cfg.lambda_reg * val_r
        g_vert = cfg.lambda_data * g_d + cfg.lambda_lmk * g_l
        grad = cfg.lambda_reg * grad_p + self.phi.T @ g_vert.ravel()
        if self.lap is not None:
            val_lap, g_lap = self.laplacian_value_grad(deformed)
            total += cfg.lambda_lap * val_lap
            grad += cfg.lambda_lap * (self.phi.T @ g_lap.ravel())
        if not np.isfinite(total):
            raise NonFiniteEnergy(f"registration energy is not finite ({total})")
        return total, grad


# ---------------------------------------------------------------------------
# registration drivers

def _match_landmarks(template_lmk: LandmarkSet, target_lmk: LandmarkSet,
                     index_range: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    anchors, targets = [], []
    for name, anchor in zip(template_lmk.names, template_lmk.anchors):
        if anchor is None or name not in target_lmk.names:
            continue
        if index_range is not None and not (index_range[0] <= anchor < index_range[1]):
            continue
        anchors.append(anchor)
        targets.append(target_lmk.position_of(name))
    return np.asarray(anchors, dtype=np.int64), np.asarray(targets, dtype=np.float64).reshape(-1, 3)


def register_part(template: TriMesh, target: TriMesh, lmk_template: LandmarkSet,
                  lmk_target: LandmarkSet, cfg: RegistrationConfig,
                  region: RegionWeights | None = None,
                  index_range: tuple[int, int] | None = None,
                  skip_procrustes: bool = False) -> tuple[TriMesh, dict]:
    """Register one template part onto a target scan, coarse to fine."""
    shared = [n for n in lmk_template.names if n in lmk_target.names]
    if len(shared) < 3 and not skip_procrustes:
        raise NoMatchedNames(
            f"landmark schema mismatch: only {len(shared)} shared names, need >= 3"
        )
    anchors, lmk_targets = _match_landmarks(lmk_template, lmk_target, index_range)

    current = template.copy()
    if not skip_procrustes:
        tf, _ = procrustes_align(lmk_template.rebound(template), lmk_target)
        current = tf.apply_mesh(current)
    post_procrustes = chamfer(current, target)

    target_tree = cKDTree(target.vertices)
    target_normals = target.ensure_normals()
    report = {"post_procrustes_chamfer": post_procrustes, "levels": []}

    for sigma in cfg.sigma_schedule:
        try:
            graph = build_graph(current, sigma, cfg.radius_scale, cfg.graph_neighbors)
        except SigmaTooLargeForMesh:
            report["levels"].append({"sigma": sigma, "skipped": "too few nodes"})
            continue
        lmk_now = lmk_targets
        problem = LevelEnergy(graph, current, cfg, anchors, lmk_now, region,
                              lap_reference=current if cfg.lambda_lap > 0 else None)
        params = graph.identity_params()
        level_trace = []
        bad_steps = 0
        prev_total = np.inf
        for it in range(cfg.icp_iterations):
            deformed = problem.deform(params)
            _, nn = target_tree.query(deformed, k=1)
            fwd_points = target.vertices[nn]
            mask = np.ones(len(deformed), dtype=bool)
            if cfg.normal_rejection:
                src_n = vertex_normals(deformed, current.faces)
                mask = (src_n * target_normals[nn]).sum(axis=1) > 0.0
                if not mask.any():
                    mask[:] = True  # degenerate orientation; fall back to full set
            rev_idx = rev_points = None
            if cfg.symmetric_data:
                src_tree = cKDTree(deformed)
                _, rev_idx = src_tree.query(target.vertices, k=1)
                rev_points = target.vertices
            problem.set_correspondences(fwd_points, mask, rev_idx, rev_points)

            res = minimize(problem.value_and_grad, params, jac=True, method="L-BFGS-B",
                           options={"maxiter": cfg.inner_iterations})
            params = res.x
            total = float(res.fun)
            entry = {"iteration": it, "total": total}
            entry.update(problem.terms(params))
            level_trace.append(entry)
            if total > prev_total + 1e-12:
                bad_steps += 1
                if bad_steps >= cfg.patience:
                    raise DivergedOptimization(
                        f"energy increased for {bad_steps} consecutive iterations at sigma={sigma}"
                    )
            else:
                bad_steps = 0
            if np.isfinite(prev_total) and abs(prev_total - total) <= 1e-10 * max(1.0, abs(prev_total)):
                prev_total = total
                break
            prev_total = total
        graph.set_params(params)
        current = apply_graph(graph, current)
        report["levels"].append({"sigma": sigma, "nodes": graph.n_nodes, "trace": level_trace})

    report["final_chamfer"] = chamfer(current, target)
    return current, report


def register_skull(template_pair: tuple[TriMesh, TriMesh], target: TriMesh,
                   lmk_template: LandmarkSet, lmk_target: LandmarkSet,
                   weights: RegionWeights | None = None,
                   cfg_mandible: RegistrationConfig | None = None,
                   cfg_maxilla: RegistrationConfig | None = None,
                   ) -> tuple[tuple[TriMesh, TriMesh], dict]:
    """Register (mandible, maxilla) templates onto one skull scan.

    Landmark anchors index the concatenated skull (mandible first). After a
    joint Procrustes alignment, target vertices are partitioned by the nearer
    template part and each part is registered against its own partition with
    part-specific weights; the maxilla applies normal-compatibility rejection
    so the template cannot latch onto the inner side of the shell.
    """
    mandible, maxilla = template_pair
    n_mdb = mandible.n_vertices
    cfg_mdb = cfg_mandible or RegistrationConfig.mandible_defaults()
    cfg_mxl = cfg_maxilla or RegistrationConfig.maxilla_defaults()

    shared = [n for n in lmk_template.names if n in lmk_target.names]
    if len(shared) < 3:
        raise NoMatchedNames(
            f"landmark schema mismatch: only {len(shared)} shared names, need >= 3"
        )
    tf, _ = procrustes_align(
        lmk_template.rebound(_concat_parts(mandible, maxilla)), lmk_target
    )
    mdb0 = tf.apply_mesh(mandible)
    mxl0 = tf.apply_mesh(maxilla)

    # assign each target vertex to the nearer part
    _, d_mdb = nearest_to(target.vertices, mdb0.vertices)
    _, d_mxl = nearest_to(target.vertices, mxl0.vertices)
    to_mdb = d_mdb <= d_mxl
    tgt_mdb = _submesh(target, to_mdb)
    tgt_mxl = _submesh(target, ~to_mdb)

    def part_landmarks(lo, hi, offset):
        names, pos, anch = [], [], []
        for name, p, a in zip(lmk_template.names, lmk_template.positions, lmk_template.anchors):
            if a is not None and lo <= a < hi:
                names.append(name)
                pos.append(p)
                anch.append(a - offset)
        return LandmarkSet(names, np.asarray(pos).reshape(-1, 3), anch)

    lmk_mdb = part_landmarks(0, n_mdb, 0)
    lmk_mxl = part_landmarks(n_mdb, n_mdb + maxilla.n_vertices, n_mdb)
    region_mdb = region_mxl = None
    if weights is not None:
        region_mdb = RegionWeights(weights.multipliers[:n_mdb])
        region_mxl = RegionWeights(weights.multipliers[n_mdb:n_mdb + maxilla.n_vertices])

    out_mdb, rep_mdb = register_part(mdb0, tgt_mdb, lmk_mdb, lmk_target, cfg_mdb,
                                     region_mdb, skip_procrustes=True)
    out_mxl, rep_mxl = register_part(mxl0, tgt_mxl, lmk_mxl, lmk_target, cfg_mxl,
                                     region_mxl, skip_procrustes=True)
    return (out_mdb, out_mxl), {"mandible": rep_mdb, "maxilla": rep_mxl}


def _concat_parts(a: TriMesh, b: TriMesh) -> TriMesh:
    return TriMesh(
        np.concatenate([a.vertices, b.vertices]),
        np.concatenate([a.faces, b.faces + a.n_vertices]) if a.faces.size or b.faces.size
        else np.zeros((0, 3)),
    )


def _submesh(mesh: TriMesh, keep: np.ndarray) -> TriMesh:
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    faces = mesh.faces[keep[mesh.faces].all(axis=1)] if mesh.faces.size else mesh.faces
    return TriMesh(mesh.vertices[keep], remap[faces] if faces.size else np.zeros((0, 3)))


def nearest_to(query: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tree = cKDTree(reference)
    d, idx = tree.query(query, k=1)
    return np.asarray(idx, dtype=np.int64), np.asarray(d)


def register_face(template: TriMesh, target: TriMesh, lmk_template: LandmarkSet,
                  lmk_target: LandmarkSet, cfg: RegistrationConfig | None = None,
                  ) -> tuple[TriMesh, dict]:
    """Register the face template onto a face scan (Laplacian-regularized)."""
    cfg = cfg or RegistrationConfig.face_defaults()
    return register_part(template, target, lmk_template, lmk_target, cfg)
