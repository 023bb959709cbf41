"""Command-line entry point exposing every pipeline stage.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every run writes a
`report.json` next to its outputs capturing the command, configuration,
metrics, timings and tool version, which is enough to replay the run.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SculptorError


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _write_report(out_dir: Path, command: str, args: argparse.Namespace,
                  metrics: dict, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in sorted(vars(args).items()) if k != "func"},
        "metrics": metrics,
        "duration_s": round(time.time() - started, 3),
        "version": __version__,
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True,
                                                    default=str) + "\n")


def _load_params(path: str | None, model):
    from .model import ParamVector

    if path is None:
        return ParamVector.zeros(model)
    data = json.loads(Path(path).read_text())
    return ParamVector.from_dict(data, model)


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # input order preserved: deterministic


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(args) -> dict:
    from .modelio import save_model
    from .synthetic import SyntheticWorld, export_corpus

    world = SyntheticWorld(seed=args.seed, tier=args.tier, n_pairs=args.pairs,
                           n_face_only=args.face_only, jitter_mm=args.jitter,
                           hole_fraction=args.holes, pose_jitter=args.pose_jitter)
    manifest = export_corpus(world, args.out)
    metrics = {"manifest": str(manifest)}
    if args.export_model:
        save_model(world.ground_truth_model(), args.export_model)
        metrics["model"] = args.export_model
    return metrics


def cmd_register_skull(args) -> dict:
    from .meshio import load_landmarks, load_mesh, load_vertex_groups, save_mesh
    from .modelio import load_model
    from .registration import RegionWeights, RegistrationConfig, register_skull

    model = load_model(args.model)
    target = load_mesh(args.target)
    lmk_target = load_landmarks(args.landmarks)
    mandible = model.template_mesh("mandible")
    maxilla = model.template_mesh("maxilla")
    weights = None
    if args.region_groups:
        groups = load_vertex_groups(args.region_groups)
        weights = RegionWeights.from_groups(model.n_skull, groups, factor=args.region_factor)
    elif model.vertex_groups:
        weights = RegionWeights.from_groups(model.n_skull, model.vertex_groups,
                                            factor=args.region_factor)
    cfg_kw = {"sigma_schedule": args.sigma_schedule, "icp_iterations": args.icp_iterations}
    cfg_mdb = RegistrationConfig.mandible_defaults()
    cfg_mxl = RegistrationConfig.maxilla_defaults()
    for k, v in cfg_kw.items():
        setattr(cfg_mdb, k, v)
        setattr(cfg_mxl, k, v)
    (out_mdb, out_mxl), report = register_skull(
        (mandible, maxilla), target, model.landmarks, lmk_target, weights,
        cfg_mdb, cfg_mxl)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(out_mdb, out / "mandible_registered.ply")
    save_mesh(out_mxl, out / "maxilla_registered.ply")
    (out / "energy_trace.json").write_text(json.dumps(report, indent=2, default=float))
    return {"mandible_final_chamfer": report["mandible"]["final_chamfer"],
            "maxilla_final_chamfer": report["maxilla"]["final_chamfer"]}


def cmd_register_face(args) -> dict:
    from .meshio import load_landmarks, load_mesh, save_mesh
    from .modelio import load_model
    from .registration import RegistrationConfig, register_face

    model = load_model(args.model)
    target = load_mesh(args.target)
    lmk_target = load_landmarks(args.landmarks)
    template = model.template_mesh("face")
    lo_f, _ = model.face_range
    from .mesh import LandmarkSet

    names, pos, anch = [], [], []
    for name, p, a in zip(model.landmarks.names, model.landmarks.positions,
                          model.landmarks.anchors):
        if a is not None and a >= lo_f:
            names.append(name)
            pos.append(p)
            anch.append(a - lo_f)
    lmk_template = LandmarkSet(names, np.asarray(pos), anch)
    cfg = RegistrationConfig.face_defaults()
    cfg.sigma_schedule = args.sigma_schedule
    cfg.icp_iterations = args.icp_iterations
    registered, report = register_face(template, target, lmk_template, lmk_target, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(registered, out / "face_registered.ply")
    (out / "energy_trace.json").write_text(json.dumps(report, indent=2, default=float))
    return {"final_chamfer": report["final_chamfer"]}


def cmd_train(args) -> dict:
    from .learning import TrainConfig, alternate_train, load_corpus
    from .modelio import load_model, save_model

    lucy = load_corpus(args.lucy)
    face_only = load_corpus(args.face_only) if args.face_only else []
    init = load_model(args.init_model)
    cfg = TrainConfig(rank_beta=args.rank_beta, rank_gamma=args.rank_gamma,
                      max_rounds=args.rounds, tol=args.tol,
                      lambda_lap=args.lambda_lap, lambda_sreg=args.lambda_sreg,
                      jobs=args.jobs)
    model, metrics = alternate_train(lucy, face_only, cfg, init)
    save_model(model, args.out)
    return metrics


def cmd_generate(args) -> dict:
    from .model import generate
    from .modelio import load_model
    from .service import head_obj_bytes

    model = load_model(args.model)
    params = _load_params(args.params, model)
    head = generate(model, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(head_obj_bytes(head))
    metrics = {"vertices": head.model.n_vertices, "obj": str(out)}
    if head.texture is not None:
        from PIL import Image

        png = out.with_suffix(".png")
        Image.fromarray(np.clip(np.round(head.texture * 255), 0, 255).astype(np.uint8)
                        ).save(png)
        metrics["texture"] = str(png)
    return metrics


def cmd_fit(args) -> dict:
    from .fitting import FitPriors, fit_to_scan
    from .meshio import load_mesh
    from .modelio import load_model

    model = load_model(args.model)
    result = fit_to_scan(
        model,
        target_face=load_mesh(args.face) if args.face else None,
        target_skull=load_mesh(args.skull) if args.skull else None,
        free=tuple(args.free.split(",")),
        priors=FitPriors(lambda_beta=args.lambda_beta, lambda_gamma=args.lambda_gamma),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result.params.to_dict(), indent=2) + "\n")
    return {"msve": result.msve, "energy": result.energy, "params": str(out)}


def cmd_complete(args) -> dict:
    from .applications import complete_skull
    from .meshio import load_mesh, save_mesh
    from .modelio import load_model
    from .service import head_obj_bytes

    model = load_model(args.model)
    partial = load_mesh(args.partial)
    if args.observed_part:
        lo, hi = model.part_ranges[args.observed_part]
        observed = np.zeros(model.n_skull, dtype=bool)
        observed[lo:hi] = True
    else:
        observed = np.asarray(json.loads(Path(args.observed).read_text()), dtype=np.int64)
    trait_seed = None
    if args.trait_seed:
        trait_seed = np.asarray(json.loads(Path(args.trait_seed).read_text()), dtype=np.float64)
    head, params, report = complete_skull(model, partial.vertices, observed, trait_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "head.obj").write_bytes(head_obj_bytes(head))
    save_mesh(head.part_mesh("mandible"), out / "mandible.ply")
    save_mesh(head.part_mesh("maxilla"), out / "maxilla.ply")
    (out / "params.json").write_text(json.dumps(params.to_dict(), indent=2) + "\n")
    return report


def cmd_fuse(args) -> dict:
    from .applications import FusionSpec, fuse_characters
    from .modelio import load_model
    from .service import head_obj_bytes

    model = load_model(args.model)
    pa = _load_params(args.params_a, model)
    pb = _load_params(args.params_b, model)
    spec = FusionSpec("a", "b", lambda_sim=args.lambda_sim)
    head, params, report = fuse_characters(model, spec, pa, pb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fused.obj").write_bytes(head_obj_bytes(head))
    (out / "params.json").write_text(json.dumps(params.to_dict(), indent=2) + "\n")
    return report


def cmd_lipo(args) -> dict:
    from .applications import (build_lipo_map, lipo_collision_profile, lipo_head,
                               optimize_lipo_components)
    from .meshio import load_mesh, save_mesh
    from .modelio import load_model

    model = load_model(args.model)
    fits = [load_mesh(p) for p in args.fits]
    skull = load_mesh(args.skull)
    neutral = load_mesh(args.neutral) if args.neutral else fits[0]
    lipo_map = build_lipo_map(model, fits, skull)
    refined = optimize_lipo_components(lipo_map, fits, neutral)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "lipo_weights.npy", refined.weights)
    np.save(out / "lipo_basis.npy", refined.basis)
    profile = lipo_collision_profile(refined, neutral, skull, samples=args.samples)
    for i, t in enumerate(np.linspace(0.0, 1.0, args.samples)):
        delta = refined.delta_range[:, 0] + t * (
            refined.delta_range[:, 1] - refined.delta_range[:, 0])
        save_mesh(lipo_head(refined, neutral, delta), out / f"level_{i:02d}.ply")
    return {"rank": refined.rank, "collision_profile": profile,
            "max_weight": float(refined.weights.max(initial=0.0))}


def cmd_eval(args) -> dict:
    from .learning import PcaSpace, compactness, generalization, load_corpus
    from .modelio import load_model

    model = load_model(args.model)
    if args.space == "shape":
        space = PcaSpace(model.template_vertices.ravel(), model.shape_basis,
                         model.sigma_beta)
    elif args.space == "trait":
        space = PcaSpace(np.zeros(3 * model.n_vertices), model.trait_basis,
                         model.sigma_gamma)
    else:
        raise SculptorError(f"unknown space {args.space!r}")

    def stack(records):
        rows = []
        for rec in records:
            T = model.template_vertices.copy()
            lo_f, hi_f = model.face_range
            T[lo_f:hi_f] = rec.face.vertices
            if rec.skull is not None:
                lo_s, hi_s = model.skull_range
                T[lo_s:hi_s] = rec.skull.vertices
            rows.append(T.ravel())
        return np.stack(rows)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    if args.data:
        data = stack(load_corpus(args.data))
        curve = compactness(space, data)
        with open(out / "compactness.csv", "w") as fh:
            fh.write("component_count,value\n")
            for k, v in enumerate(curve, start=1):
                fh.write(f"{k},{float(v)!r}\n")
        metrics["compactness_full_rank"] = float(curve[-1])
    if args.heldout:
        held = stack(load_corpus(args.heldout))
        gen = generalization(space, held)
        with open(out / "generalization.csv", "w") as fh:
            fh.write("component_count,msve_mm2,rmse_mm\n")
            for k, m, r in zip(gen["components"], gen["msve_mm2"], gen["rmse_mm"]):
                fh.write(f"{k},{float(m)!r},{float(r)!r}\n")
        metrics["generalization_final_msve_mm2"] = float(gen["msve_mm2"][-1])
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def cmd_serve(args) -> dict:
    from .service import serve

    serve(args.model, host=args.host, port=args.port)
    return {}


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sculptorkit",
                                     description="skeleton-consistent head model toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--tier", default="tiny", choices=["tiny", "small", "medium"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=12)
    p.add_argument("--face-only", type=int, default=16)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--holes", type=float, default=0.0)
    p.add_argument("--pose-jitter", type=float, default=1.0)
    p.add_argument("--export-model", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("register-skull", help="register skull templates to a scan")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--region-groups", default=None)
    p.add_argument("--region-factor", type=float, default=50.0)
    p.add_argument("--sigma-schedule", type=_float_list, default=(50.0, 20.0, 8.0, 2.0))
    p.add_argument("--icp-iterations", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register_skull)

    p = sub.add_parser("register-face", help="register the face template to a scan")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--sigma-schedule", type=_float_list, default=(50.0, 20.0, 8.0, 2.0))
    p.add_argument("--icp-iterations", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register_face)

    p = sub.add_parser("train", help="alternate training over two corpora")
    p.add_argument("--lucy", required=True)
    p.add_argument("--face-only", default=None)
    p.add_argument("--init-model", required=True)
    p.add_argument("--rank-beta", type=int, default=300)
    p.add_argument("--rank-gamma", type=int, default=50)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--lambda-lap", type=float, default=15.0)
    p.add_argument("--lambda-sreg", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a head from parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit parameters to scans")
    p.add_argument("--model", required=True)
    p.add_argument("--face", default=None)
    p.add_argument("--skull", default=None)
    p.add_argument("--free", default="beta,gamma,theta,phi")
    p.add_argument("--lambda-beta", type=float, default=1e-6)
    p.add_argument("--lambda-gamma", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("complete", help="complete a partial skull")
    p.add_argument("--model", required=True)
    p.add_argument("--partial", required=True)
    p.add_argument("--observed", default=None, help="JSON file of observed indices")
    p.add_argument("--observed-part", default=None, choices=["mandible", "maxilla"])
    p.add_argument("--trait-seed", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("fuse", help="fuse two fitted characters")
    p.add_argument("--model", required=True)
    p.add_argument("--params-a", required=True)
    p.add_argument("--params-b", required=True)
    p.add_argument("--lambda-sim", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("lipo", help="build and refine a lipo displacement space")
    p.add_argument("--model", required=True)
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--skull", required=True)
    p.add_argument("--neutral", default=None)
    p.add_argument("--samples", type=int, default=11)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lipo)

    p = sub.add_parser("eval", help="compactness / generalization curves")
    p.add_argument("--model", required=True)
    p.add_argument("--space", required=True, choices=["shape", "trait"])
    p.add_argument("--data", default=None)
    p.add_argument("--heldout", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the local generation service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7461)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        metrics = args.func(args)
    except SculptorError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[FileNotFound]: {exc}", file=sys.stderr)
        return 1
    out = getattr(args, "out", None)
    if out is not None:
        out_path = Path(out)
        report_dir = out_path if out_path.suffix == "" else out_path.parent
        _write_report(report_dir, args.command, args, metrics, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
