"""Command-line front end.

Exit codes: 0 success, 64 usage error, 2 runtime failure (the failing stage
is named on stderr). Every successful run writes ``<output>.manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import HartGeomError
from .pipeline import StageError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def _digest_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        files = [os.path.join(p, n) for n in sorted(os.listdir(p))] if os.path.isdir(p) else [p]
        for f in files:
            with open(f, "rb") as fh:
                out[f] = fnv1a64(fh.read())
    return out


def _write_manifest(args, inputs, started):
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "inputs")}
    manifest = {
        "subcommand": args.command,
        "flags": flags,
        "inputs": _digest_inputs(inputs),
        "version": __version__,
        "duration_s": time.perf_counter() - started,
    }
    with open(args.output + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("HARTGEOM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def _append_csv(path, row: dict):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)


def _load_views(directory, dtype=np.float64):
    from .io import read_tensor_dir
    return [np.asarray(t, dtype=dtype) for t in read_tensor_dir(directory)]


# -- subcommands -------------------------------------------------------------

def cmd_recon(args):
    from .geometry import PredictionSet
    from .io import read_camera_json, read_tensor, write_mesh
    from .pipeline import reconstruct, stage

    with stage("load"):
        points = _load_views(args.points)
        preds = PredictionSet(
            points, _load_views(args.masks, bool),
            normal_maps_base=_load_views(args.normals_base),
            normal_residuals=_load_views(args.normals_res) if args.normals_res else None,
            point_confidences=_load_views(args.point_conf) if args.point_conf else None,
        )
        poses = read_camera_json(args.cameras) if args.cameras else None
        residual = None
        if args.residual:
            residual = np.asarray(read_tensor(args.residual), dtype=np.float64)
    result = reconstruct(preds, poses, residual, args.res, args.sigma, args.conf_threshold, args.margin,
                         args.fallback_radius, args.fallback_iters,
                         camera_kwargs=dict(stride=args.stride, threshold_px=args.ransac_threshold,
                                            max_iters=args.max_iters, seed=args.seed),
                         workers=args.threads)
    with stage("write"):
        write_mesh(args.output, result.mesh)
    print(f"wrote {args.output}: {len(result.mesh.vertices)} vertices, {len(result.mesh.faces)} faces "
          f"from {result.n_points} points")
    return [args.points, args.normals_base, args.normals_res, args.masks, args.point_conf,
            args.cameras, args.residual]


def cmd_cameras(args):
    from .geometry import PredictionSet
    from .io import write_camera_json
    from .pipeline import recover_cameras, stage

    with stage("load"):
        preds = PredictionSet(_load_views(args.points), _load_views(args.masks, bool))
    with stage("cameras"):
        results = recover_cameras(preds, args.stride, args.threshold, args.max_iters, args.confidence, args.seed)
    extra = [{"n_inliers": r.n_inliers, "mean_reproj_error": r.mean_reproj_error} for r in results]
    write_camera_json(args.output, [r.pose for r in results], extra)
    return [args.points, args.masks]


def cmd_fit_body(args):
    from .body import FitConfig, lbs_forward, read_body_model
    from .geometry import PredictionSet, TriangleMesh
    from .io import write_mesh
    from .pipeline import fit_body_from_predictions, stage

    with stage("load"):
        model = read_body_model(args.model)
        preds = PredictionSet(
            _load_views(args.points), _load_views(args.masks, bool),
            tightness_dirs=_load_views(args.tight_dir), tightness_mags=_load_views(args.tight_mag),
            label_probs=_load_views(args.label_probs), label_confs=_load_views(args.label_confs),
        )
    cfg = FitConfig(lambda_reg=args.lambda_reg, max_iters=args.max_iters)
    markers, res = fit_body_from_predictions(preds, model, args.alpha, cfg)
    vertices, joints = lbs_forward(model, res.params)
    out = {
        "params": res.params.to_dict(),
        "final_cost": res.final_cost,
        "stage_costs": res.stage_costs,
        "cost_trace": res.trace,
        "n_valid_markers": markers.n_valid,
        "markers": np.where(markers.valid[:, None], markers.positions, 0.0).tolist(),
        "marker_valid": markers.valid.tolist(),
        "joints": joints.tolist(),
    }
    _write_json(args.output, out)
    if args.mesh_out:
        write_mesh(args.mesh_out, TriangleMesh(vertices, model.faces if model.faces is not None else np.zeros((0, 3))))
    return [args.model, args.points, args.tight_dir, args.tight_mag, args.label_probs, args.label_confs, args.masks]


def cmd_align(args):
    from .camera import umeyama
    from .io import read_points
    from .pipeline import stage

    with stage("load"):
        src, dst = read_points(args.source), read_points(args.target)
    with stage("align"):
        if len(src) != len(dst):
            raise ValueError(f"source has {len(src)} points, target {len(dst)}; alignment needs correspondences")
        tf = umeyama(src, dst, with_scale=not args.no_scale)
    rmse = float(np.sqrt(np.mean(np.sum((tf.apply(src) - dst) ** 2, axis=1))))
    _write_json(args.output, {**tf.to_dict(), "matrix": tf.matrix.tolist(), "rmse": rmse})
    return [args.source, args.target]


def cmd_eval_mesh(args):
    from .io import read_mesh
    from .metrics import evaluate_mesh
    from .pipeline import stage

    with stage("load"):
        pred, gt = read_mesh(args.pred), read_mesh(args.gt)
    with stage("eval-mesh"):
        report = evaluate_mesh(pred, gt, args.samples, args.seed, args.tau, args.tau_rel, args.threads)
    _write_json(args.output, report.to_dict())
    if args.csv:
        _append_csv(args.csv, {"pred": args.pred, "gt": args.gt, **report.to_dict()})
    return [args.pred, args.gt]


def cmd_eval_body(args):
    from .io import read_points
    from .metrics import BodyEvalReport, pa_mpjpe, pa_v2v
    from .pipeline import stage

    if (args.pred_joints is None) != (args.gt_joints is None):
        raise UsageError("--pred-joints and --gt-joints must be given together")
    with stage("load"):
        pv, gv = read_points(args.pred_vertices), read_points(args.gt_vertices)
        pj = read_points(args.pred_joints) if args.pred_joints else None
        gj = read_points(args.gt_joints) if args.gt_joints else None
    with stage("eval-body"):
        report = BodyEvalReport(pa_v2v(pv, gv), pa_mpjpe(pj, gj) if pj is not None else float("nan"))
    _write_json(args.output, report.to_dict())
    if args.csv:
        _append_csv(args.csv, {"pred": args.pred_vertices, "gt": args.gt_vertices, **report.to_dict()})
    return [args.pred_vertices, args.gt_vertices, args.pred_joints, args.gt_joints]


def cmd_init_splats(args):
    from .io import read_mesh
    from .pipeline import stage
    from .splats import init_surfels, write_surfels_ply

    with stage("load"):
        mesh = read_mesh(args.mesh)
    with stage("init-splats"):
        surfels = init_surfels(mesh.drop_degenerate_faces(), args.opacity, tuple(args.color))
        write_surfels_ply(surfels, args.output)
    return [args.mesh]


def cmd_synth(args):
    """Write synthetic fixtures (toy body model, sphere views) for demos and tests."""
    from .body import write_body_model
    from .io import write_camera_json, write_tensor_dir
    from .synthetic import body_prediction_views, make_toy_body_model, random_body_params, sphere_views

    if args.kind == "body-model":
        write_body_model(args.output, make_toy_body_model())
        return []
    if args.kind == "body-views":
        model = make_toy_body_model()
        params = random_body_params(model, np.random.default_rng(args.seed))
        preds = body_prediction_views(model, params, args.views, seed=args.seed)
        os.makedirs(args.output, exist_ok=True)
        write_body_model(os.path.join(args.output, "model.hbm"), model)
        for name, maps in [("points", preds.point_maps), ("tight_dir", preds.tightness_dirs),
                           ("tight_mag", preds.tightness_mags), ("label_probs", preds.label_probs),
                           ("label_confs", preds.label_confs)]:
            write_tensor_dir(os.path.join(args.output, name), [m.astype(np.float32) for m in maps])
        write_tensor_dir(os.path.join(args.output, "masks"), [m.astype(np.uint8) for m in preds.masks])
        with open(os.path.join(args.output, "params.json"), "w") as fh:
            json.dump(params.to_dict(), fh, indent=2)
        return []
    poses, pmaps, nmaps, masks = sphere_views(args.views, args.size)
    os.makedirs(args.output, exist_ok=True)
    write_tensor_dir(os.path.join(args.output, "points"), [p.astype(np.float32) for p in pmaps])
    write_tensor_dir(os.path.join(args.output, "normals"), [n.astype(np.float32) for n in nmaps])
    write_tensor_dir(os.path.join(args.output, "masks"), [m.astype(np.uint8) for m in masks])
    write_camera_json(os.path.join(args.output, "cameras.json"), poses)
    return []


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hartgeom", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("-o", "--output", required=True)
        sp.add_argument("--threads", type=int, default=None, help="worker cap (default: $HARTGEOM_THREADS or all cores)")
        return sp

    def ransac_flags(sp):
        sp.add_argument("--stride", type=int, default=4)
        sp.add_argument("--max-iters", type=int, default=512)
        sp.add_argument("--seed", type=int, default=0)

    sp = add("recon", cmd_recon, "prediction maps -> watertight clothed mesh (PLY)")
    sp.add_argument("--points", required=True)
    sp.add_argument("--normals-base", required=True)
    sp.add_argument("--normals-res")
    sp.add_argument("--masks", required=True)
    sp.add_argument("--point-conf")
    sp.add_argument("--cameras")
    sp.add_argument("--residual", help="HTF r×r×r residual indicator grid")
    sp.add_argument("--res", type=int, default=256)
    sp.add_argument("--sigma", type=float, default=2.0)
    sp.add_argument("--conf-threshold", type=float, default=1.0)
    sp.add_argument("--margin", type=float, default=0.05)
    sp.add_argument("--fallback-radius", type=float, default=3.0)
    sp.add_argument("--fallback-iters", type=int, default=16)
    sp.add_argument("--ransac-threshold", type=float, default=1.0)
    ransac_flags(sp)

    sp = add("cameras", cmd_cameras, "recover per-view cameras from point maps (JSON)")
    sp.add_argument("--points", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--threshold", type=float, default=1.0)
    sp.add_argument("--confidence", type=float, default=0.999)
    ransac_flags(sp)

    sp = add("fit-body", cmd_fit_body, "aggregate markers and fit the body model (JSON)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--points", required=True)
    sp.add_argument("--tight-dir", required=True)
    sp.add_argument("--tight-mag", required=True)
    sp.add_argument("--label-probs", required=True)
    sp.add_argument("--label-confs", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--lambda-reg", type=float, default=1e-2)
    sp.add_argument("--max-iters", type=int, default=100)
    sp.add_argument("--mesh-out")

    sp = add("align", cmd_align, "similarity alignment of corresponding point sets (JSON)")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--no-scale", action="store_true")

    sp = add("eval-mesh", cmd_eval_mesh, "Chamfer / F-score / normal consistency report (JSON)")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tau", type=float, default=None, help="absolute F-score threshold")
    sp.add_argument("--tau-rel", type=float, default=0.005, help="threshold relative to the GT bbox diagonal")
    sp.add_argument("--csv")

    sp = add("eval-body", cmd_eval_body, "PA-V2V / PA-MPJPE report in millimetres (JSON)")
    sp.add_argument("--pred-vertices", required=True)
    sp.add_argument("--gt-vertices", required=True)
    sp.add_argument("--pred-joints")
    sp.add_argument("--gt-joints")
    sp.add_argument("--csv")

    sp = add("init-splats", cmd_init_splats, "one Gaussian surfel per mesh face (PLY)")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--opacity", type=float, default=0.8)
    sp.add_argument("--color", type=float, nargs=3, default=(0.5, 0.5, 0.5))

    sp = add("synth", cmd_synth, "write synthetic fixtures")
    sp.add_argument("kind", choices=["body-model", "body-views", "sphere-views"])
    sp.add_argument("--views", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=128)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    started = time.perf_counter()
    args.threads = _threads(args)
    try:
        inputs = args.func(args)
    except UsageError as exc:
        print(f"hartgeom {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"hartgeom {args.command}: stage {exc.stage} failed: {type(exc.error).__name__}: {exc.error}",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (HartGeomError, ValueError, OSError) as exc:
        print(f"hartgeom {args.command}: stage {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_manifest(args, inputs, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
