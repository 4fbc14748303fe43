"""Command-line interface.

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 invalid config
or scene spec, 4 file I/O error (unreadable input or unwritable output),
5 dataset not found, 6 image/intrinsics dimension mismatch, 7 search
diverged, 8 corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchmarkConfig, desk_search_config, run_benchmark, run_loss_ablation, trial_setup
from .camera import Intrinsics, orbit_poses
from .demo2d import PARAMETERIZATIONS, Demo2dConfig, ascii_plot, path_deviation, run_demo, svg_plot
from .fields import AnalyticScene, CheckpointError, load_checkpoint, reference_scene, save_checkpoint, \
    single_sphere_scene
from .imageio import ImageFormatError, overlay, read_ppm, write_ppm
from .lie import Pose, read_poses, rng_stream, rotation_error, translation_error, write_poses
from .losses import ALL_LOSSES, CorruptionSpec, Loss
from .render import image_loss, render_image
from .search import SearchConfig, SearchDiverged, run_search
from .training import PosedDataset, TrainConfig, dataset_psnr, render_dataset, split_tags, train_field

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NO_DATASET, EXIT_DIMENSION, EXIT_DIVERGED, \
    EXIT_CHECKPOINT = range(9)

BUILTIN_SCENES = {"reference": reference_scene, "single-sphere": single_sphere_scene}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------


def _load_json(path, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror or exc}", EXIT_IO) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    if not isinstance(doc, dict):
        raise CliError(f"{what} {path} must hold a JSON object", EXIT_CONFIG)
    return doc


def _section(args, name: str) -> dict:
    sec = args.config_doc.get(name, {})
    if not isinstance(sec, dict):
        raise CliError(f"config section {name!r} must be an object", EXIT_CONFIG)
    return dict(sec)


def _build(factory, params: dict, what: str):
    try:
        return factory(**params)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {what}: {exc}", EXIT_CONFIG) from exc


def _overrides(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {out} is not writable: {exc.strerror or exc}", EXIT_IO) from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from exc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _scene_from_arg(spec: str) -> AnalyticScene:
    if spec in BUILTIN_SCENES:
        return BUILTIN_SCENES[spec]()
    doc = _load_json(spec, "scene spec")
    try:
        scene = AnalyticScene.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid scene spec {spec}: {exc}", EXIT_CONFIG) from exc
    if not scene.primitives:
        raise CliError(f"scene spec {spec} has no primitives", EXIT_CONFIG)
    return scene


def _field_from_args(args):
    if getattr(args, "checkpoint", None):
        try:
            return load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise CliError(f"checkpoint {args.checkpoint} not found", EXIT_IO) from exc
        except CheckpointError as exc:
            raise CliError(str(exc), EXIT_CHECKPOINT) from exc
    return _scene_from_arg(args.scene or "reference")


def _read_image(path) -> np.ndarray:
    try:
        return read_ppm(path)
    except FileNotFoundError as exc:
        raise CliError(f"image {path} not found", EXIT_IO) from exc
    except ImageFormatError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _parse_pose(text: str | None, what: str) -> Pose | None:
    if text is None:
        return None
    path = Path(text)
    try:
        if path.exists():
            poses = read_poses(path)
            if len(poses) != 1:
                raise CliError(f"{what} file {path} must hold exactly one pose", EXIT_CONFIG)
            return poses[0]
        return Pose.from_row([float(x) for x in text.replace(",", " ").split()])
    except ValueError as exc:
        raise CliError(f"invalid {what}: {exc}", EXIT_CONFIG) from exc


def _load_dataset(path) -> PosedDataset:
    d = Path(path)
    if not (d / "transforms.json").is_file():
        raise CliError(f"dataset not found: {d / 'transforms.json'}", EXIT_NO_DATASET)
    try:
        return PosedDataset.load(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid dataset {d}: {exc}", EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(f"cannot read dataset {d}: {exc}", EXIT_IO) from exc


def _search_config(args, single: bool = False) -> SearchConfig:
    params = _section(args, "search")
    params.update(_overrides(pool_size=getattr(args, "pool_size", None),
                             rays_per_step=getattr(args, "rays_per_step", None),
                             explore_steps=getattr(args, "explore_steps", None),
                             refine_steps=getattr(args, "refine_steps", None),
                             rounds=getattr(args, "rounds", None)))
    params["workers"] = args.threads
    cfg = _build(desk_search_config, params, "search config")
    return cfg.single() if single else cfg


def _corruption(args, default: CorruptionSpec) -> CorruptionSpec:
    params = default.to_dict()
    params.update(_section(args, "corruption"))
    params.update(_overrides(gaussian_sigma=args.gaussian_sigma, poisson_scale=args.poisson_scale,
                             brightness_delta=args.brightness_delta, missing_fraction=args.missing_fraction))
    return _build(CorruptionSpec, params, "corruption spec")


# -- commands ---------------------------------------------------------------


def cmd_make_scene(args) -> int:
    scene = _scene_from_arg(args.scene or "reference")
    params = _section(args, "dataset")
    params.update(_overrides(frames=args.frames, split_test=args.split_test, width=args.width, height=args.height,
                             fov_deg=args.fov, radius=args.radius, render_samples=args.samples))
    frames = int(params.get("frames", 24))
    split_test = float(params.get("split_test", 0.2))
    if frames < 2 or not 0.0 <= split_test < 1.0:
        raise CliError("need frames >= 2 and split_test in [0, 1)", EXIT_CONFIG)
    intr = _build(Intrinsics.from_fov, dict(width=int(params.get("width", 64)), height=int(params.get("height", 64)),
                                            fov_deg=float(params.get("fov_deg", 60.0))), "intrinsics")
    radius = float(params.get("radius", 1.52))
    azimuth0 = float(rng_stream(args.seed, 0).uniform(0.0, 360.0))
    poses = orbit_poses(frames, radius, azimuth0_deg=azimuth0)
    out = _out_dir(args)
    dataset = render_dataset(scene, intr, poses, split_tags(frames, split_test), int(params.get("render_samples", 64)))
    lo, hi = scene.bounds
    _write_text(out / "scene.json", _dump(scene.to_dict()))
    try:
        dataset.save(out, {"scene": "scene.json", "bounds": [list(map(float, lo)), list(map(float, hi))]})
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO) from exc
    n_test = len(dataset.test)
    print(f"wrote {frames} frames ({frames - n_test} train / {n_test} test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = _load_dataset(args.dataset)
    params = _section(args, "train")
    params.update(_overrides(iterations=args.iterations, rays_per_iter=args.rays, learning_rate=args.lr,
                             tv_weight=args.tv_weight))
    params.setdefault("seed", args.seed)
    cfg = _build(TrainConfig, params, "train config")
    doc = json.loads((Path(args.dataset) / "transforms.json").read_text())
    bounds = doc.get("bounds", [[-0.5] * 3, [0.5] * 3])
    res = args.resolution or int(_section(args, "train_grid").get("resolution", 64))
    out = _out_dir(args)
    try:
        result = train_field(dataset, (res,) * 3, cfg, bounds, log=print)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    ckpt = out / "field.nrfgrid"
    try:
        save_checkpoint(result.field, ckpt)
    except OSError as exc:
        raise CliError(f"cannot write checkpoint: {exc}", EXIT_IO) from exc
    field_ = load_checkpoint(ckpt)
    log = {
        "config": cfg.to_dict(),
        "resolution": [res] * 3,
        "train_psnr": dataset_psnr(field_, dataset, dataset.train),
        "test_psnr": dataset_psnr(field_, dataset, dataset.test) if dataset.test else None,
        "per_frame_psnr": {f.name: dataset_psnr(field_, dataset, [f]) for f in dataset.frames},
        "final_loss": result.losses[-1] if result.losses else None,
    }
    _write_text(out / "train_log.json", _dump(log))
    print(f"train PSNR {log['train_psnr']:.2f} dB" +
          (f", test PSNR {log['test_psnr']:.2f} dB" if log["test_psnr"] is not None else ""))
    return EXIT_OK


def _intrinsics_from_args(args, image=None) -> Intrinsics:
    if getattr(args, "dataset", None):
        return _load_dataset(args.dataset).intrinsics
    if image is not None:
        h, w = image.shape[:2]
        return Intrinsics.from_fov(w, h, args.fov or 60.0)
    return Intrinsics.from_fov(args.width or 64, args.height or 64, args.fov or 60.0)


def cmd_render(args) -> int:
    field_ = _field_from_args(args)
    pose = _parse_pose(args.pose, "pose")
    if pose is None:
        raise CliError("--pose is required", EXIT_CONFIG)
    target = _read_image(args.image) if args.image else None
    intr = _intrinsics_from_args(args, target)
    out = _out_dir(args)
    img = render_image(field_, intr, pose, args.samples or 64)
    write_ppm(out / "render.ppm", img)
    report = {"pose": pose.to_row().tolist()}
    if target is not None:
        if target.shape != img.shape:
            raise CliError("image size does not match the intrinsics", EXIT_DIMENSION)
        from .training import psnr

        report["psnr"] = psnr(img, target)
        print(f"PSNR {report['psnr']:.4f} dB")
    _write_text(out / "render.json", _dump(report))
    return EXIT_OK


def cmd_invert(args) -> int:
    field_ = _field_from_args(args)
    observed = _read_image(args.image)
    intr = _intrinsics_from_args(args, observed)
    if observed.shape[:2] != (intr.height, intr.width):
        raise CliError(f"image is {observed.shape[1]}x{observed.shape[0]}, intrinsics expect "
                       f"{intr.width}x{intr.height}", EXIT_DIMENSION)
    start = _parse_pose(args.start_pose, "start pose")
    gt = _parse_pose(args.gt_pose, "ground-truth pose")
    if start is None:
        if gt is None:
            raise CliError("give --start-pose, or --gt-pose to perturb", EXIT_CONFIG)
        from .lie import perturb_pose

        start = perturb_pose(gt, args.rot_range, args.trans_range, rng_stream(args.seed, 10))
    loss = Loss(args.loss)
    cfg = _search_config(args, single=args.mode == "single")
    out = _out_dir(args)
    try:
        best, trace = run_search(field_, intr, observed, start, loss, cfg, seed=args.seed)
    except SearchDiverged as exc:
        raise CliError(f"search diverged: {exc}", EXIT_DIVERGED) from exc
    write_poses(out / "pose.txt", [best])
    trace.write_csv(out / "trace.csv")
    trace.write_summary(out / "trace_summary.json")
    rendered = render_image(field_, intr, best)
    write_ppm(out / "overlay.ppm", overlay(rendered, observed))
    report = {"mode": args.mode, "loss": loss.kind.value, "start_pose": start.to_row().tolist(),
              "final_pose": best.to_row().tolist(), "final_loss": image_loss(field_, intr, best, observed, loss),
              "search": {k: v for k, v in cfg.to_dict().items() if k != "workers"}}
    if gt is not None:
        report.update(rot_error_deg=rotation_error(best, gt), trans_error=translation_error(best, gt),
                      success=bool(rotation_error(best, gt) < 5.0 and translation_error(best, gt) < 0.05))
    _write_text(out / "invert.json", _dump(report))
    print(" ".join(repr(float(x)) for x in best.to_row()))
    return EXIT_OK


def _benchmark_config(args, losses=None, modes=None, corruption_default=None) -> BenchmarkConfig:
    params = _section(args, "benchmark")
    params.update(_overrides(trials=args.trials, rot_range_deg=args.rot_range, trans_range=args.trans_range,
                             rot_threshold_deg=args.rot_threshold, trans_threshold=args.trans_threshold))
    if args.losses:
        params["losses"] = tuple(args.losses.split(","))
    elif losses is not None and "losses" not in params:
        params["losses"] = losses
    if args.modes:
        params["modes"] = tuple(args.modes.split(","))
    elif modes is not None and "modes" not in params:
        params["modes"] = modes
    params["seed"] = args.seed
    params["search"] = _search_config(args)
    params["corruption"] = _corruption(args, corruption_default or CorruptionSpec())
    return _build(lambda **p: BenchmarkConfig.from_dict(p), params, "benchmark config")


def _write_report(args, out: Path, field_, cfg: BenchmarkConfig, run) -> int:
    def keep(trial, loss, mode, trace):
        if not args.no_traces:
            trace.write_csv(out / f"trace_{trial:03d}_{loss}_{mode}.csv")

    try:
        report = run(field_, cfg, workers=args.threads, on_trace=keep, log=print)
    except OSError as exc:
        raise CliError(f"cannot write traces: {exc}", EXIT_IO) from exc
    _write_text(out / "report.json", report.to_json())
    _write_text(out / "report.csv", report.to_csv())
    _write_text(out / "table.txt", report.table() + "\n")
    _write_text(out / "timing.json", _dump({k: round(v, 3) for k, v in report.wall_times.items()}))
    if not args.no_overlays:
        intr = cfg.intrinsics
        cache: dict = {}
        for r in report.results:
            if r.final_pose is None:
                continue
            _, _, observed, _ = trial_setup(field_, cfg, r.trial, cache)
            rendered = render_image(field_, intr, Pose.from_row(r.final_pose), cfg.render_samples)
            write_ppm(out / f"overlay_{r.trial:03d}_{r.loss}_{r.mode}.ppm", overlay(rendered, observed))
    print(report.table())
    return EXIT_OK


def cmd_benchmark(args) -> int:
    field_ = _field_from_args(args)
    cfg = _benchmark_config(args)
    return _write_report(args, _out_dir(args), field_, cfg, run_benchmark)


def cmd_ablate_losses(args) -> int:
    field_ = _field_from_args(args)
    cfg = _benchmark_config(args, losses=tuple(k.value for k in ALL_LOSSES), modes=("multiple",),
                            corruption_default=CorruptionSpec.benchmark_default())
    return _write_report(args, _out_dir(args), field_, cfg,
                         lambda f, c, **kw: run_loss_ablation(f, c, c.losses, **kw))


def cmd_demo2d(args) -> int:
    params = _section(args, "demo2d")
    params.update(_overrides(lr=args.lr, tolerance=args.tolerance, max_steps=args.max_steps,
                             second_moment=args.second_moment))
    if args.target:
        params["target"] = tuple(float(x) for x in args.target.split(","))
    cfg = _build(Demo2dConfig, params, "demo2d config")
    out = _out_dir(args)
    results = [run_demo(cfg, p) for p in PARAMETERIZATIONS]
    summary = {"config": cfg.to_dict()}
    for r in results:
        _write_text(out / f"trajectory_{r.parameterization}.csv", r.to_csv())
        summary[r.parameterization] = {
            "steps_to_converge": r.steps_to_converge,
            "final_mse": r.mse[-1],
            "path_deviation": path_deviation(r.positions, cfg.start[:2], cfg.target[:2]),
        }
    _write_text(out / "demo2d.svg", svg_plot(results, cfg))
    _write_text(out / "demo2d.json", _dump(summary))
    print(ascii_plot(results, cfg), end="")
    for r in results:
        print(f"{r.parameterization}: " + (f"converged in {r.steps_to_converge} steps" if r.converged
                                           else f"not converged after {cfg.max_steps} steps"))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="master random seed (default 0)")
    p.add_argument("--config", default=d(None), help="JSON config file (see docs/config.schema.json)")
    p.add_argument("--out", default=d("out"), help="output directory (default ./out)")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads for hypothesis chunks")


def _field_flags(p):
    p.add_argument("--scene", help="builtin scene (reference, single-sphere) or scene JSON file")
    p.add_argument("--checkpoint", help="voxel grid checkpoint instead of an analytic scene")


def _search_flags(p):
    p.add_argument("--pool-size", type=int)
    p.add_argument("--rays-per-step", type=int)
    p.add_argument("--explore-steps", type=int)
    p.add_argument("--refine-steps", type=int)
    p.add_argument("--rounds", type=int)


def _bench_flags(p):
    _field_flags(p)
    _search_flags(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--losses", help="comma-separated loss names")
    p.add_argument("--modes", help="comma-separated subset of single,multiple")
    p.add_argument("--rot-range", type=float, help="start rotation perturbation per axis, degrees")
    p.add_argument("--trans-range", type=float, help="start translation perturbation per axis")
    p.add_argument("--rot-threshold", type=float)
    p.add_argument("--trans-threshold", type=float)
    p.add_argument("--gaussian-sigma", type=float)
    p.add_argument("--poisson-scale", type=float)
    p.add_argument("--brightness-delta", type=float)
    p.add_argument("--missing-fraction", type=float)
    p.add_argument("--no-traces", action="store_true", help="skip per-trial trace CSVs")
    p.add_argument("--no-overlays", action="store_true", help="skip per-trial overlay images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nerfpose", description="Camera pose estimation by inverting radiance fields.",
                                     epilog="exit codes: 0 ok, 1 unexpected error, 2 usage, 3 config/spec, 4 file I/O, "
                                            "5 dataset not found, 6 dimension mismatch, 7 search diverged, "
                                            "8 corrupt checkpoint")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", parents=[common], help="write a scene spec and a rendered posed dataset")
    p.add_argument("--scene", help="builtin scene name or scene JSON file (default reference)")
    p.add_argument("--frames", type=int)
    p.add_argument("--split-test", type=float, help="fraction of frames held out (train count rounds up)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--fov", type=float, help="horizontal field of view, degrees")
    p.add_argument("--radius", type=float, help="camera distance from the scene center")
    p.add_argument("--samples", type=int, help="samples per ray for rendering")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", parents=[common], help="fit a voxel grid to a posed dataset")
    p.add_argument("--dataset", required=True, help="directory with transforms.json")
    p.add_argument("--resolution", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--rays", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tv-weight", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a field from a pose")
    _field_flags(p)
    p.add_argument("--pose", help="12 numbers or a pose file")
    p.add_argument("--image", help="PPM to compare against (reports PSNR)")
    p.add_argument("--dataset", help="take intrinsics from this dataset")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--fov", type=float)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("invert", parents=[common], help="estimate the pose of one image")
    _field_flags(p)
    _search_flags(p)
    p.add_argument("--image", required=True, help="observed PPM image")
    p.add_argument("--dataset", help="take intrinsics from this dataset")
    p.add_argument("--fov", type=float, help="horizontal field of view when no dataset is given")
    p.add_argument("--start-pose", help="12 numbers or a pose file")
    p.add_argument("--gt-pose", help="ground truth: reported errors, and the start is perturbed from it "
                                     "when --start-pose is absent")
    p.add_argument("--rot-range", type=float, default=15.0)
    p.add_argument("--trans-range", type=float, default=0.25)
    p.add_argument("--loss", default="l2", choices=[k.value for k in ALL_LOSSES])
    p.add_argument("--mode", default="multiple", choices=["single", "multiple"])
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("benchmark", parents=[common], help="seeded pose recovery benchmark")
    _bench_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ablate-losses", parents=[common], help="benchmark every loss on corrupted observations")
    _bench_flags(p)
    p.set_defaults(func=cmd_ablate_losses)

    p = sub.add_parser("demo2d", parents=[common], help="planar SE(2) vs SO(2)xT(2) comparison")
    p.add_argument("--lr", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--second-moment", choices=["coordinate", "subspace"])
    p.add_argument("--target", help="x,y,theta of the target pose (theta in radians)")
    p.set_defaults(func=cmd_demo2d)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        args.config_doc = _load_json(args.config, "config") if args.config else {}
        if args.threads < 1:
            raise CliError("--threads must be >= 1", EXIT_USAGE)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SearchDiverged as exc:
        print(f"error: search diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
