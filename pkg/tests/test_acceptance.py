"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`.
"""
import time

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from sculptorkit.applications import (
    build_lipo_map,
    complete_skull,
    lipo_collision_profile,
    lipo_energy,
    lipo_head,
    optimize_lipo_components,
)
from sculptorkit.fitting import FitPriors, FitProblem, VertexObjective
from sculptorkit.learning import (
    PcaSpace,
    TrainConfig,
    alternate_train,
    build_shape_space,
    collision_value_grad,
    compactness,
    generalization,
    pca_centered,
    pca_uncentered,
)
from sculptorkit.mesh import LandmarkSet, TriMesh, chamfer, msve
from sculptorkit.model import ParamVector, generate, personalize, rest_joint
from sculptorkit.registration import LevelEnergy, RegistrationConfig, build_graph, register_part
from sculptorkit.rotations import rotation_matrix
from sculptorkit.synthetic import SyntheticWorld, _poly_field


def _report(name: str, ok: bool, detail: str = ""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name}: {detail}"


def _fd(fun, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fun(xp) - fun(xm)) / (2 * eps)
    return g


def _rel(grad, fd):
    return float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))


def _head_vec(rec, model):
    T = model.template_vertices.copy()
    lo_f, hi_f = model.face_range
    T[lo_f:hi_f] = rec.face.vertices
    if rec.skull is not None:
        lo_s, hi_s = model.skull_range
        T[lo_s:hi_s] = rec.skull.vertices
    return T.ravel()


@pytest.fixture(scope="module")
def small_world():
    return SyntheticWorld(seed=101, tier="small")


@pytest.fixture(scope="module")
def small_model(small_world):
    return small_world.ground_truth_model()


# --------------------------------------------------------------------------

def test_lbs_identity(small_model):
    """generate with zero pose equals the personalize output."""
    model = small_model
    rng = np.random.default_rng(1)
    started = time.monotonic()
    worst = 0.0
    for _ in range(5):
        p = ParamVector.zeros(model)
        p.beta = model.sigma_beta * rng.standard_normal(model.n_beta)
        p.gamma = model.sigma_gamma * rng.standard_normal(model.n_gamma)
        p.phi = model.sigma_phi * rng.standard_normal(model.n_phi)
        head = generate(model, p, want_texture=False)
        rest = personalize(model, p.beta, p.gamma, p.theta, p.phi)
        worst = max(worst, float(np.abs(head.vertices - rest).max()))
    elapsed = time.monotonic() - started
    _report("lbs-identity", worst < 1e-9 and elapsed < 1.0,
            f"max deviation {worst:.2e} mm in {elapsed:.2f}s")


def test_rigid_jaw_consistency(small_model):
    """mandible vertices follow the hand-computed rigid jaw transform."""
    model = small_model
    rng = np.random.default_rng(2)
    lo, hi = model.part_ranges["mandible"]
    worst = 0.0
    for _ in range(100):
        p = ParamVector.zeros(model)
        p.beta = 0.5 * model.sigma_beta * rng.standard_normal(model.n_beta)
        p.theta[3:6] = rng.normal(scale=0.2, size=3)
        p.theta[6:9] = rng.normal(scale=2.0, size=3)
        head = generate(model, p, want_texture=False)
        rest = personalize(model, p.beta, p.gamma, p.theta, p.phi)
        joint = rest_joint(model, p.beta, p.gamma)
        R = rotation_matrix(p.theta[3:6])
        want = (rest[lo:hi] - joint) @ R.T + joint + p.theta[6:9]
        worst = max(worst, float(np.abs(head.vertices[lo:hi] - want).max()))
    _report("rigid-jaw-consistency", worst < 1e-6, f"max deviation {worst:.2e} mm over 100 poses")


def test_gradient_suite(small_model):
    """analytic vs central finite differences for every optimization energy."""
    started = time.monotonic()
    rng = np.random.default_rng(3)
    results = {}

    # registration energies on a <=100-vertex instance
    from .test_registration import sphere_landmarks, uv_sphere

    mesh = uv_sphere(radius=60.0, n_lat=7, n_lon=9)  # 65 vertices
    cfg = RegistrationConfig(lambda_data=0.8, lambda_lmk=0.05, lambda_reg=0.01,
                             lambda_lap=2.0)
    graph = build_graph(mesh, sigma=35.0)
    lmk = sphere_landmarks(mesh)
    problem = LevelEnergy(graph, mesh, cfg, np.asarray(lmk.anchors, dtype=np.int64),
                          lmk.positions + rng.normal(size=lmk.positions.shape),
                          lap_reference=mesh)
    n = mesh.n_vertices
    problem.set_correspondences(mesh.vertices + rng.normal(size=(n, 3)),
                                rng.random(n) > 0.1,
                                rng.integers(0, n, size=20), rng.normal(size=(20, 3)) + 60)
    p = rng.normal(size=12 * graph.n_nodes) * 0.05

    def iso(term):
        def fun(q):
            deformed = problem.deform(q)
            if term == "E_d":
                return problem.data_value_grad(deformed)[0]
            if term == "E_lmk":
                return problem.landmark_value_grad(deformed)[0]
            if term == "E_lap":
                return problem.laplacian_value_grad(deformed)[0]
            raise KeyError(term)
        return fun

    for term in ("E_d", "E_lmk", "E_lap"):
        fun = iso(term)
        if term == "E_d":
            _, gv = problem.data_value_grad(problem.deform(p))
        elif term == "E_lmk":
            _, gv = problem.landmark_value_grad(problem.deform(p))
        else:
            _, gv = problem.laplacian_value_grad(problem.deform(p))
        grad = problem.phi.T @ gv.ravel()
        results[term] = _rel(grad, _fd(fun, p))

    from sculptorkit.registration import arap_term

    _, grad = arap_term(p, graph)
    results["E_reg"] = _rel(grad, _fd(lambda q: arap_term(q, graph)[0], p))

    # E_vert through the full parametric chain on the tiny toy model
    from .conftest import toy_model

    toy = toy_model()
    objs = [VertexObjective(np.arange(16, 32),
                            toy.template_vertices[16:32] + rng.normal(size=(16, 3)),
                            name="face")]
    fit = FitProblem(toy, objs, ("beta", "gamma", "theta", "phi"),
                     FitPriors(0.0, 0.0, 0.0))
    x = rng.normal(size=3 + 2 + 9 + 2) * 0.3
    _, grad = fit.value_and_grad(x)
    results["E_vert"] = _rel(grad, _fd(lambda q: fit.value_and_grad(q)[0], x))

    # E_col with frozen nearest pairing
    skull = toy.template_mesh("maxilla")
    pts = skull.vertices[:8] + rng.normal(size=(8, 3)) * 3.0
    normals = skull.ensure_normals()
    from sculptorkit.mesh import nearest_vertices

    idx, _ = nearest_vertices(pts, skull.vertices)

    def col_fun(x):
        q = x.reshape(-1, 3)
        s = ((q - skull.vertices[idx]) * normals[idx]).sum(axis=1)
        return float((s[s < 0] ** 2).sum())

    _, gcol = collision_value_grad(pts, skull)
    results["E_col"] = _rel(gcol.ravel(), _fd(col_fun, pts.ravel().copy(), eps=1e-7))

    # E_lipo
    g0 = rng.normal(size=(30, 3))
    t0 = rng.normal(size=(30, 3))
    n0 = rng.normal(size=(30, 3))
    w0 = rng.random(30)
    _, glip = lipo_energy(g0, t0, n0, w0)
    results["E_lipo"] = _rel(
        glip.ravel(),
        _fd(lambda q: lipo_energy(q.reshape(-1, 3), t0, n0, w0)[0], g0.ravel().copy()))

    elapsed = time.monotonic() - started
    worst = max(results.values())
    detail = " ".join(f"{k}={v:.1e}" for k, v in results.items()) + f" in {elapsed:.1f}s"
    _report("gradient-suite", worst < 1e-4 and elapsed < 60.0, detail)


def test_registration_oracle():
    """known smooth warps with 20% holes recovered to <=20% of the rigid-fit error."""
    started = time.monotonic()
    world = SyntheticWorld(seed=7, tier="tiny")
    model = world.ground_truth_model()
    template = model.template_mesh("face")
    lo_f, _ = model.face_range
    names, pos, anch = [], [], []
    for nm, p, a in zip(model.landmarks.names, model.landmarks.positions,
                        model.landmarks.anchors):
        if a is not None and a >= lo_f:
            names.append(nm)
            pos.append(p)
            anch.append(a - lo_f)
    lmk_template = LandmarkSet(names, np.asarray(pos), anch)

    passed = 0
    ratios = []
    for case in range(10):
        rng = np.random.default_rng(1000 + case)
        warp = 4.0 * _poly_field(rng, template.vertices)
        warp -= warp.mean(axis=0)
        warped = template.vertices + warp + rng.normal(size=3) * 5.0
        target_full = TriMesh(warped, template.faces)
        target = world.degrade(target_full, rng_seed=case, jitter_mm=0.0, hole_fraction=0.2)
        lmk_target = LandmarkSet(list(names),
                                 warped[[a for a in anch]])
        cfg = RegistrationConfig(sigma_schedule=(50.0, 20.0, 8.0), icp_iterations=4,
                                 lambda_data=1.0, lambda_lmk=0.01, lambda_reg=0.001)
        _, report = register_part(template, target, lmk_template, lmk_target, cfg)
        ratio = report["final_chamfer"] / max(report["post_procrustes_chamfer"], 1e-12)
        ratios.append(ratio)
        if ratio <= 0.2:
            passed += 1
    elapsed = time.monotonic() - started
    _report("registration-oracle", passed == 10 and elapsed < 300.0,
            f"{passed}/10 cases, worst ratio {max(ratios):.3f}, {elapsed:.0f}s")


def test_learning_recovery():
    """alternating training recovers the generating subspaces on 50 subjects."""
    started = time.monotonic()
    world = SyntheticWorld(seed=1, tier="small", n_pairs=25, n_face_only=10,
                           pose_jitter=0.03)
    truth = world.ground_truth_model()
    lucy, face_only = world.sample_corpus()
    from dataclasses import replace

    init = replace(world.template(), expr_basis=truth.expr_basis, sigma_phi=truth.sigma_phi,
                   mean_texture=truth.mean_texture, texture_basis=truth.texture_basis,
                   sigma_alpha=truth.sigma_alpha)
    cfg = TrainConfig(lambda_lap=0.05, lambda_sreg=0.0, lambda_w_init=0.2,
                      lambda_pose_frob=0.05, lambda_beta=1e-6, lambda_gamma=1e-6,
                      rank_beta=6, rank_gamma=4, neutral_iterations=2,
                      pose_outer_iterations=1, subject_fit_iterations=100,
                      global_fit_iterations=40, max_rounds=2, tol=1e-9)
    model, metrics = alternate_train(lucy, face_only, cfg, init)
    shape_deg = float(np.rad2deg(subspace_angles(model.shape_basis, truth.shape_basis)).max())
    trait_deg = float(np.rad2deg(subspace_angles(model.trait_basis, truth.trait_basis)).max())

    shape_space = PcaSpace(model.template_vertices.ravel(), model.shape_basis,
                           model.sigma_beta)
    rng = np.random.default_rng(2001)
    held = np.stack([
        personalize(truth, truth.sigma_beta * rng.standard_normal(truth.n_beta),
                    np.zeros(truth.n_gamma)).ravel()
        for _ in range(10)
    ])
    curve = generalization(shape_space, held)
    monotone = bool(np.all(np.diff(curve["msve_mm2"]) <= 1e-9))
    final = float(curve["msve_mm2"][-1])
    elapsed = time.monotonic() - started
    ok = shape_deg < 5.0 and trait_deg < 5.0 and monotone and final < 0.5 and elapsed < 900
    _report("learning-recovery", ok,
            f"angles shape {shape_deg:.2f} deg / trait {trait_deg:.2f} deg, "
            f"held-out msve {final:.4f} mm^2 (monotone={monotone}), {elapsed:.0f}s")


def test_ablation_shape_plus_trait_beats_pooled():
    """k shape + k trait strictly beats 2k pooled shape on skull fitting, 3 seeds."""
    k = 4
    margins = []
    for seed in (0, 1, 2):
        world = SyntheticWorld(
            seed=seed, tier="small", n_pairs=36, n_face_only=0, pose_jitter=0.0,
            beta_rank_override=2 * k, gamma_rank_override=k,
            trait_sigma_override=(8.0,) * k,
            trait_mean_gamma=(12.0,) + (0.0,) * (k - 1),
            post_trait_retention=0.55, record_noise_mm=0.05, shape_skull_damp=0.05)
        model = world.ground_truth_model()
        lucy, _ = world.sample_corpus()
        by_id = {}
        for r in lucy:
            by_id.setdefault(r.id, {})[r.stage] = r
        ids = sorted(by_id)
        train, test = ids[:24], ids[24:]
        X_post = np.stack([_head_vec(by_id[i]["post"], model) for i in train])
        X_pre = np.stack([_head_vec(by_id[i]["pre"], model) for i in train])
        shape_a = pca_centered(X_post, k)
        trait_a = pca_uncentered(X_post - X_pre, k)
        shape_b = pca_centered(np.concatenate([X_pre, X_post]), 2 * k)
        MA = np.concatenate([shape_a.components, trait_a.components], axis=1)
        lo_s, hi_s = model.skull_range
        srows = np.arange(3 * lo_s, 3 * hi_s)

        def skull_msve(y, mean, M):
            r = (y - mean)[srows]
            coef, *_ = np.linalg.lstsq(M[srows], r, rcond=None)
            return float(((r - M[srows] @ coef).reshape(-1, 3) ** 2).sum(axis=1).mean())

        for stage in ("pre", "post"):
            a = np.mean([skull_msve(_head_vec(by_id[i][stage], model), shape_a.mean, MA)
                         for i in test])
            b = np.mean([skull_msve(_head_vec(by_id[i][stage], model), shape_b.mean,
                                    shape_b.components) for i in test])
            margins.append((seed, stage, float(1.0 - a / b)))
    ok = all(m[2] >= 0.10 for m in margins)
    detail = " ".join(f"s{m[0]}/{m[1]}:{100*m[2]:+.0f}%" for m in margins)
    _report("ablation-shape-plus-trait", ok, detail)


def test_skull_completion():
    """missing mandibles recovered under 1 mm; trait seeds vary only the mandible."""
    model = SyntheticWorld(seed=101, tier="small", trait_maxilla_leak=0.04).ground_truth_model()
    rng = np.random.default_rng(5)
    lo_mxl, hi_mxl = model.part_ranges["maxilla"]
    observed = np.zeros(model.n_skull, dtype=bool)
    observed[lo_mxl:hi_mxl] = True
    worst_h = 0.0
    for _ in range(12):
        p = ParamVector.zeros(model)
        p.beta = model.sigma_beta * rng.standard_normal(model.n_beta)
        full = generate(model, p, want_texture=False)
        partial = full.vertices[: model.n_skull]
        _, _, report = complete_skull(model, partial, observed,
                                      ground_truth={"mandible": full.part_mesh("mandible")})
        worst_h = max(worst_h, report["hausdorff_mandible"])

    p = ParamVector.zeros(model)
    p.beta = 0.5 * model.sigma_beta * rng.standard_normal(model.n_beta)
    full = generate(model, p, want_texture=False)
    seeds = [2.0 * model.sigma_gamma * np.random.default_rng(s).standard_normal(model.n_gamma)
             for s in (31, 32)]
    heads = [complete_skull(model, full.vertices[: model.n_skull], observed, trait_seed=g)[0]
             for g in seeds]
    d_mxl = float(np.sqrt(chamfer(heads[0].part_mesh("maxilla"), heads[1].part_mesh("maxilla"))))
    d_mdb = float(np.sqrt(chamfer(heads[0].part_mesh("mandible"), heads[1].part_mesh("mandible"))))
    ok = worst_h < 1.0 and d_mxl < 0.1 and d_mdb > 1.0
    _report("skull-completion", ok,
            f"worst Hausdorff {worst_h:.3f} mm; seed variation maxilla {d_mxl:.3f} mm, "
            f"mandible {d_mdb:.2f} mm")


def test_lipo_pipeline(small_world, small_model):
    """two-level lipo family interpolates the held-out middle, collision-free."""
    world, model = small_world, small_model
    fam = world.lipo_family(levels=(0.0, 1.0), amplitude=9.0)
    mid_truth = world.lipo_family(levels=(0.5,), amplitude=9.0)["heads"][0]
    lm = build_lipo_map(model, fam["heads"], fam["skull"])
    refined = optimize_lipo_components(lm, fam["heads"], fam["neutral"])
    mid_delta = 0.5 * (refined.deltas[0] + refined.deltas[1])
    mid = lipo_head(refined, fam["neutral"], mid_delta)
    err = msve(mid.vertices, mid_truth.vertices)
    profile = lipo_collision_profile(refined, fam["neutral"], fam["skull"], samples=11)
    ok = err < 0.5 and len(profile) == 11 and all(v == 0.0 for v in profile)
    _report("lipo-pipeline", ok,
            f"mid-level msve {err:.4f} mm^2, collision profile max {max(profile):.2e}")


def test_metrics_criteria(rng):
    """full-rank compactness is exactly 1; generalization matches brute force."""
    data = rng.normal(size=(10, 18))
    space = build_shape_space([d.reshape(6, 3) for d in data], rank=9)
    curve = compactness(space, data)
    exact_one = curve[-1] == 1.0
    nondecreasing = bool(np.all(np.diff(curve) >= -1e-15))

    held = rng.normal(size=(4, 18))
    gen = generalization(space, held)
    monotone = bool(np.all(np.diff(gen["msve_mm2"]) <= 1e-12))
    brute_ok = True
    for i, kk in enumerate(gen["components"]):
        errs = []
        for h in held:
            C = space.components[:, :kk]
            coef, *_ = np.linalg.lstsq(C, h - space.mean, rcond=None)
            recon = space.mean + C @ coef
            errs.append(((h - recon).reshape(-1, 3) ** 2).sum(axis=1).mean())
        if abs(gen["msve_mm2"][i] - np.mean(errs)) > 1e-9 * max(np.mean(errs), 1.0):
            brute_ok = False
    ok = exact_one and nondecreasing and monotone and brute_ok
    _report("compactness-generalization", ok,
            f"full-rank=={curve[-1]!r}, monotone={monotone}, brute-force match={brute_ok}")


def test_cross_channel_determinism(tmp_path):
    """CLI generate and service POST /generate emit byte-identical geometry."""
    import json as _json

    from fastapi.testclient import TestClient

    from sculptorkit.cli import main
    from sculptorkit.modelio import save_model
    from sculptorkit.service import create_app

    world = SyntheticWorld(seed=11, tier="tiny")
    model = world.ground_truth_model()
    model_path = tmp_path / "m.sculptor"
    save_model(model, model_path)

    params = {"beta": [5.0, -3.0], "gamma": [2.0],
              "theta": [0.05, 0.0, -0.02, 0.1, 0.0, 0.0, 0.0, 0.0, -2.0]}
    params_path = tmp_path / "p.json"
    params_path.write_text(_json.dumps(params))
    out = tmp_path / "head.obj"
    code = main(["generate", "--model", str(model_path), "--params", str(params_path),
                 "--out", str(out)])
    assert code == 0
    cli_bytes = out.read_bytes()

    # the service must load the same container the CLI used
    from sculptorkit.modelio import load_model

    client = TestClient(create_app(load_model(model_path)))
    r = client.post("/generate", json={"params": params, "format": "obj"})
    ok = r.status_code == 200 and r.content == cli_bytes
    _report("cross-channel-determinism", ok,
            f"{len(cli_bytes)} bytes, identical={r.content == cli_bytes}")
