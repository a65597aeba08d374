"""Command-line entry point.

Subcommands: gen (synthetic scenes), fit (optimize a Gaussian set),
eval (metrics for a fitted set), render (feature/alpha/depth images),
query (open-vocabulary heatmaps), ablate (mode x schedule sweeps).

Exit codes: 0 success, 1 domain error, 2 usage error. Machine-readable
output goes to stdout or files; progress and config echo go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io as gio
from . import kernels
from .errors import GsoccError
from .trainer import FitConfig, FitReport, TemperatureSchedule, fit
from .losses import LossWeights
from .occupancy import AggregationMode, voxelize
from .render import RenderSettings, frustum_mask, render_features
from .scenes import PRESETS, gen_scene, spec_from_dict
from .semantic import assign_labels, compute_metrics, query_scores, voxel_embeddings
from .viz import save_gray_png, save_heatmap_png, save_rgb_png

SCHEDULE_NAMES = {"exp": "exponential", "linear": "linear", "const": "constant"}


def _default_threads() -> int:
    env = os.environ.get("GSOCC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _echo_config(args) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps(cfg, default=str), file=sys.stderr)
    print(f"kernel backend: {kernels.BACKEND}", file=sys.stderr)


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=[m.value for m in AggregationMode],
                   default="poisson")
    p.add_argument("--schedule", choices=list(SCHEDULE_NAMES), default="exp")
    p.add_argument("--tmin", type=float, default=1e-3)
    p.add_argument("--tmax", type=float, default=1.0)
    p.add_argument("--tau-test", type=float, default=None,
                   help="evaluation temperature (default: tmin)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--n-gaussians", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--step-logit", type=float, default=5e-2)
    p.add_argument("--lambda-focal", type=float, default=1.0)
    p.add_argument("--lambda-lov", type=float, default=1.0)
    p.add_argument("--lambda-scal", type=float, default=1.0)
    p.add_argument("--lambda-feat", type=float, default=0.05)
    p.add_argument("--lambda-depth", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--alpha-balance", type=float, default=0.25)
    p.add_argument("--delta", type=float, default=1.0, help="huber threshold")
    p.add_argument("--freeze-opacity", action="store_true")
    p.add_argument("--threads", type=int, default=_default_threads())


def _fit_config(args, mode=None, schedule=None) -> FitConfig:
    sched = schedule or TemperatureSchedule(
        t_min=args.tmin, t_max=args.tmax,
        mode=SCHEDULE_NAMES[args.schedule], tau_test=args.tau_test)
    return FitConfig(
        num_gaussians=args.n_gaussians, iterations=args.iters,
        step_size=args.step_size, step_logit=args.step_logit,
        weights=LossWeights(args.lambda_focal, args.lambda_lov,
                            args.lambda_scal, args.lambda_feat,
                            args.lambda_depth),
        mode=mode or args.mode, schedule=sched, seed=args.seed,
        gamma=args.gamma, alpha_balance=args.alpha_balance,
        huber_delta=args.delta, freeze_opacity=args.freeze_opacity,
        threads=args.threads,
        render=RenderSettings(threads=args.threads))


def _progress_printer(total: int):
    def cb(rec):
        if rec.iteration % 50 == 0 or rec.iteration == total - 1:
            print(f"iter {rec.iteration}/{total} tau={rec.tau:.4g} "
                  f"loss={rec.loss_total:.4f} iou={rec.iou:.3f}",
                  file=sys.stderr)
    return cb


def cmd_gen(args) -> int:
    if args.spec:
        doc = yaml.safe_load(Path(args.spec).read_text())
        spec = spec_from_dict(doc)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        builder = PRESETS[args.preset]
        spec = builder(seed=args.seed if args.seed is not None else 0)
    bundle = gen_scene(spec)
    gio.save_scene(args.out, bundle)
    print(f"wrote scene to {args.out} "
          f"({int(bundle.occupancy.values.sum())} occupied voxels, "
          f"{len(bundle.cameras)} cameras)", file=sys.stderr)
    return 0


def cmd_fit(args) -> int:
    bundle = gio.load_scene(args.scene)
    config = _fit_config(args)
    report = fit(bundle, config, progress=_progress_printer(args.iters))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    gio.save_gaussians(out / "gaussians.lgoc", report.gaussians)
    print(f"final IoU at tau_test={report.tau_test:g}: {report.final_iou:.4f}",
          file=sys.stderr)
    return 0


def _evaluate(gaussians, bundle, tau, threshold, threads, mask=None):
    pred_occ = voxelize(gaussians, bundle.spec, "poisson", tau, threads=threads)
    ve = voxel_embeddings(gaussians, bundle.spec, tau, threads=threads)
    pred_sem = assign_labels(ve, pred_occ, bundle.table, threshold)
    return compute_metrics(pred_sem, pred_occ, bundle.semantics,
                           num_classes=len(bundle.table), threshold=threshold,
                           mask=mask)


def cmd_eval(args) -> int:
    bundle = gio.load_scene(args.scene)
    gaussians = gio.load_gaussians(args.gaussians)
    if gaussians.d != bundle.table.d:
        raise GsoccError(
            f"gaussian embedding dim {gaussians.d} does not match "
            f"table dim {bundle.table.d}")
    mask = None
    if args.frustum_cam is not None:
        mask = frustum_mask(bundle.spec, bundle.cameras[args.frustum_cam])
    m = _evaluate(gaussians, bundle, args.tau, args.threshold, args.threads,
                  mask)
    per_class = {name: (None if np.isnan(v) else round(v, 6))
                 for name, v in zip(bundle.table.names, m.per_class_iou)}
    print(json.dumps({"iou": round(m.occupancy_iou, 6),
                      "per_class_iou": per_class,
                      "miou": None if np.isnan(m.miou) else round(m.miou, 6)}))
    return 0


def cmd_render(args) -> int:
    gaussians = gio.load_gaussians(args.gaussians)
    cam = gio.load_camera(args.camera)
    img = render_features(gaussians, cam, args.tau,
                          RenderSettings(threads=args.threads))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gio.save_feature_image(out / "features.fimg", img)
    save_gray_png(out / "alpha.png", img.alpha)
    dmax = float(img.depth.max()) or 1.0
    save_gray_png(out / "depth.png", img.depth, 0.0, dmax)
    if img.d >= 3:
        save_rgb_png(out / "feature_rgb.png",
                     0.5 * (img.feature[:, :, :3] + 1.0))
    print(f"wrote render to {out}", file=sys.stderr)
    return 0


def cmd_query(args) -> int:
    bundle = gio.load_scene(args.scene)
    gaussians = gio.load_gaussians(args.gaussians)
    table = gio.load_table(args.table) if args.table else bundle.table
    prompt = table.vector_of(args.name)
    ve = voxel_embeddings(gaussians, bundle.spec, args.tau,
                          threads=args.threads)
    scores = query_scores(ve, prompt)
    finite_min = float(scores[np.isfinite(scores)].min()) \
        if np.isfinite(scores).any() else -1.0
    gio.save_scalar_grid(args.out, bundle.spec,
                         np.where(np.isfinite(scores), scores, finite_min))
    if args.png_dir:
        png_dir = Path(args.png_dir)
        png_dir.mkdir(parents=True, exist_ok=True)
        for z in range(bundle.spec.dims[2]):
            save_heatmap_png(png_dir / f"slice_z{z:02d}.png", scores[:, :, z])
    print(f"query {args.name!r}: max score "
          f"{float(scores[np.isfinite(scores)].max()) if np.isfinite(scores).any() else float('nan'):.4f}",
          file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    matrix = yaml.safe_load(Path(args.matrix).read_text())
    if not matrix or not matrix.get("modes") or not matrix.get("schedules"):
        raise UsageError("ablation matrix needs non-empty modes and schedules")
    bundle = gio.load_scene(args.scene)
    rows = []
    for mode in matrix["modes"]:
        for sched in matrix["schedules"]:
            schedule = TemperatureSchedule(
                t_min=float(sched.get("tmin", 1e-3)),
                t_max=float(sched.get("tmax", 1.0)),
                mode=SCHEDULE_NAMES.get(sched.get("mode", "exp"),
                                        sched.get("mode", "exponential")),
                tau_test=sched.get("tau_test"))
            config = _fit_config(args, mode=mode, schedule=schedule)
            # The kernel-only operator gets no opacity gradient from the
            # geometry path; its ablation arm keeps opacity frozen.
            config.freeze_opacity = (AggregationMode(mode) is
                                     AggregationMode.GF2)
            report = fit(bundle, config)
            m = _evaluate(report.gaussians, bundle, report.tau_test, 0.5,
                          args.threads)
            name = sched.get("name", schedule.mode)
            rows.append({"mode": mode, "schedule": name,
                         "tmin": schedule.t_min, "tmax": schedule.t_max,
                         "tau_test": schedule.tau_test,
                         "iou": round(m.occupancy_iou, 6),
                         "miou": None if np.isnan(m.miou) else round(m.miou, 6)})
            print(f"{mode:10s} {name:12s} iou={m.occupancy_iou:.4f} "
                  f"miou={m.miou:.4f}", file=sys.stderr)
    import csv as csvmod
    with open(args.out, "w", newline="") as f:
        writer = csvmod.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}", file=sys.stderr)
    return 0


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsocc",
        description="Gaussian-primitive occupancy, feature splatting, and "
                    "open-vocabulary voxel queries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene bundle")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--spec", help="scene spec YAML file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="fit a gaussian set to a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    _add_fit_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="metrics for a fitted gaussian set")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--frustum-cam", type=int, default=None,
                   help="restrict metrics to this camera's frustum")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render feature/alpha/depth images")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("query", help="open-vocabulary heatmap for a category")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--table", default=None,
                   help="embedding table (default: the scene's)")
    p.add_argument("--name", required=True)
    p.add_argument("--out", required=True, help="output heatmap grid file")
    p.add_argument("--png-dir", default=None)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("ablate", help="mode x schedule sweep into a CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--matrix", required=True, help="YAML with modes/schedules")
    p.add_argument("--out", required=True)
    _add_fit_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (GsoccError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
