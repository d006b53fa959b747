"""Command-line interface: ``fisheye-depth <command> [options]``.

Exit status is 0 on success, 2 on usage errors and 1 on domain errors; the
latter print a single ``error: <Kind>: <message>`` line on standard error.

Settings resolve in this order, later winning: built-in defaults, the file
given by ``--config`` (sections ``[estimator]``, ``[eval]``, ``[run]``), then
explicit command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as fio
from .camera import OK, MeiIntrinsics, format_calibration, parse_calibration, project_points, raise_for_status, unproject_pixels
from .errors import FisheyeDepthError, IoFailure, MissingPoseForFrame
from .estimator import EstimatorConfig, SourceView, estimate
from .fileutil import atomic_write_text
from .head import OutputScale, depth_scale_from_intrinsics, fuse_multi_scale, load_weights, random_weights, run_head
from .metrics import DEFAULT_CLAMP, METRIC_NAMES, MetricReport, compute_metrics
from .pose import read_poses, relative_pose
from .ray_cache import RayTable, build_ray_table, cache_path, cached_ray_table, persist
from .synth import read_scene, render
from .view_synthesis import erode_mask, photometric_loss, pixel_map, warp

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if not 0 < lo < hi:
        raise argparse.ArgumentTypeError(f"need 0 < lo < hi, got {text!r}")
    return lo, hi


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_calib(path: str) -> tuple[MeiIntrinsics, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read calibration {path}: {exc}") from exc
    return parse_calibration(text, path), text


def _rays(cam: MeiIntrinsics, calib_text: str, cache_dir: str | None) -> RayTable:
    if cache_dir:
        return cached_ray_table(cam, cache_dir, calib_text)
    return build_ray_table(cam)


def _frame_id(path: str) -> int:
    stem = Path(path).stem
    if not stem.isdigit():
        raise MissingPoseForFrame(f"cannot infer a frame id from {path!r}; pass --frames")
    return int(stem)


def _settings(args) -> tuple:
    parser = fio.read_config(args.config)
    cache_dir = args.ray_cache_dir or fio.config_value(parser, "run", "ray_cache_dir")
    jobs = args.jobs or fio.config_value(parser, "run", "jobs", 1)
    return parser, cache_dir, jobs


def _vehicle_mask(args, cam: MeiIntrinsics) -> np.ndarray | None:
    return None if args.vehicle_mask is None else fio.read_mask(args.vehicle_mask, cam.shape)


def _read_points(path: str, width: int) -> np.ndarray:
    try:
        values = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if values.shape[1] != width:
        raise IoFailure(f"{path}: expected {width} columns, got {values.shape[1]}")
    return values


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_project(args) -> int:
    cam, _ = _read_calib(args.calib)
    points = _read_points(args.points, 3) if args.points else np.array([args.xyz], dtype=np.float64)
    uv, status = project_points(points, cam)
    if not args.points:
        raise_for_status(int(status[0]))
    for (u, v), s in zip(uv, status):
        print(f"{_fmt(u)} {_fmt(v)}" if s == OK else "nan nan")
    return 0


def cmd_unproject(args) -> int:
    cam, _ = _read_calib(args.calib)
    uv = _read_points(args.pixels, 2) if args.pixels else np.array([args.uv], dtype=np.float64)
    rays, status = unproject_pixels(uv, cam)
    if not args.pixels:
        raise_for_status(int(status[0]))
    for ray, s in zip(rays, status):
        print(" ".join(_fmt(c) for c in ray) if s == OK else "nan nan nan")
    return 0


def cmd_build_cache(args) -> int:
    _, cache_dir, _ = _settings(args)
    cam, text = _read_calib(args.calib)
    if args.out:
        path = persist(build_ray_table(cam), args.out)
    elif cache_dir:
        cached_ray_table(cam, cache_dir, text)
        path = cache_path(cam, cache_dir, text)
    else:
        raise IoFailure("build-cache needs --out or --ray-cache-dir")
    print(path)
    return 0


def cmd_convert_calib(args) -> int:
    try:
        text = Path(args.kitti360).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {args.kitti360}: {exc}") from exc
    cam = fio.parse_kitti360_fisheye(text, allow_lossy=args.allow_lossy, source=args.kitti360)
    atomic_write_text(args.out, format_calibration(cam))
    print(args.out)
    return 0


def cmd_synth(args) -> int:
    _, cache_dir, _ = _settings(args)
    cam, text = _read_calib(args.calib)
    scene = read_scene(args.scene)
    trajectory = read_poses(args.poses)
    rays = _rays(cam, text, cache_dir)
    images, distances = {}, {}
    for frame_id, pose in trajectory:
        frame = render(scene, cam, pose, rays, args.samples)
        images[frame_id] = frame.image
        distances[frame_id] = frame.distance
    mask = _vehicle_mask(args, cam)
    directory = fio.write_camera(args.out_dir, args.camera_id, cam, trajectory, images, distances, mask)
    print(directory)
    return 0


def cmd_warp(args) -> int:
    _, cache_dir, _ = _settings(args)
    cam_t, text = _read_calib(args.calib)
    cam_s = _read_calib(args.source_calib)[0] if args.source_calib else cam_t
    target_id, source_id = args.frames
    pose = relative_pose(read_poses(args.poses), target_id, source_id)
    distance = fio.read_distance_map(args.distance)
    mapping = pixel_map(distance, pose, cam_t, cam_s, _rays(cam_t, text, cache_dir))
    warped, mask = warp(fio.read_image(args.source), mapping)
    vehicle = _vehicle_mask(args, cam_t)
    if vehicle is not None:
        mask &= vehicle
    fio.write_image(args.out, warped)
    if args.mask_out:
        fio.write_mask(args.mask_out, mask)
    if args.target:
        # windows touching invalid pixels are excluded from the loss
        loss, _ = photometric_loss(fio.read_image(args.target), warped, erode_mask(mask))
        print(f"photometric_loss {_fmt(loss)}")
    print(f"valid_pixels {int(mask.sum())}")
    return 0


def _estimator_config(args, parser) -> EstimatorConfig:
    lo, hi = args.range if args.range else (None, None)
    return fio.estimator_config(
        parser, {"n_hyps": args.hyps, "l_min": lo, "l_max": hi, "levels": args.levels}
    )


def _estimate_job(job) -> np.ndarray:
    target, sources, cam, config, rays, mask = job
    return estimate(target, sources, cam, config, rays, mask).distance


def cmd_estimate(args) -> int:
    parser, cache_dir, jobs = _settings(args)
    config = _estimator_config(args, parser)
    if args.dataset:
        return _estimate_dataset(args, parser, config, cache_dir, jobs)
    cam, text = _read_calib(args.calib)
    source_paths = [p for p in args.sources.split(",") if p]
    frames = args.frames or [_frame_id(args.target)] + [_frame_id(p) for p in source_paths]
    if len(frames) != 1 + len(source_paths):
        raise IoFailure(f"--frames lists {len(frames)} ids for {1 + len(source_paths)} images")
    trajectory = read_poses(args.poses)
    mask = _vehicle_mask(args, cam)
    sources = [
        SourceView(fio.read_image(path), relative_pose(trajectory, frames[0], fid), mask=mask)
        for path, fid in zip(source_paths, frames[1:])
    ]
    distance = _estimate_job((fio.read_image(args.target), sources, cam, config, _rays(cam, text, cache_dir), mask))
    fio.write_distance_map(args.out, distance)
    print(args.out)
    return 0


def _neighbor_offsets(args, parser) -> list[int]:
    if args.neighbors is not None:
        offsets = args.neighbors
    else:
        text = fio.config_value(parser, "run", "neighbors")
        offsets = _int_list(text) if text else [-1, 1]
    if not offsets or 0 in offsets:
        raise IoFailure(f"neighbor offsets must be nonzero and non-empty, got {offsets}")
    return offsets


def _estimate_dataset(args, parser, config: EstimatorConfig, cache_dir: str | None, jobs: int) -> int:
    offsets = _neighbor_offsets(args, parser)
    index = fio.load_dataset(args.dataset)
    camera_ids = [args.camera] if args.camera else index.camera_ids
    out_dir = Path(args.out_dir)
    work, names = [], []
    for camera_id in camera_ids:
        camera = index[camera_id]
        rays = _rays(camera.cam, camera.calibration_text, cache_dir)
        vehicle = camera.mask() if args.vehicle_mask is None else _vehicle_mask(args, camera.cam)
        frames = args.frames or list(camera.frames)
        available = set(camera.frames)
        for t in frames:
            neighbors = [t + k for k in offsets if t + k in available]
            if not neighbors:
                log.warning("%s frame %d has no source frame at offsets %s; skipped", camera_id, t, offsets)
                continue
            sources = [
                SourceView(camera.image(s), relative_pose(camera.trajectory, t, s), mask=vehicle) for s in neighbors
            ]
            work.append((camera.image(t), sources, camera.cam, config, rays, vehicle))
            names.append(out_dir / camera_id / fio.frame_name(t, ".pfm"))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_estimate_job, work))
    else:
        results = [_estimate_job(job) for job in work]
    for path, distance in zip(names, results):
        fio.write_distance_map(path, distance)
        print(path)
    return 0


def _pairs(pred: Path, gt: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise IoFailure("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.stem, pred, gt)]
    gt_files = {p.stem: p for p in gt.iterdir() if p.suffix.lower() in (".pfm", ".png")}
    pairs = [
        (p.stem, p, gt_files[p.stem])
        for p in sorted(pred.iterdir())
        if p.suffix.lower() in (".pfm", ".png") and p.stem in gt_files
    ]
    if not pairs:
        raise IoFailure(f"no prediction in {pred} has a ground-truth file of the same name in {gt}")
    return pairs


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Unweighted mean of per-image reports; ``n_pixels`` is the total."""
    means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
    return MetricReport(**means, n_pixels=sum(r.n_pixels for r in reports))


def cmd_eval(args) -> int:
    parser, _, _ = _settings(args)
    clamp = None if args.no_clamp else args.clamp
    if clamp is None and not args.no_clamp:
        text = fio.config_value(parser, "eval", "clamp")
        clamp = _range(text) if text else DEFAULT_CLAMP
    median_scale = args.median_scale or fio.config_value(parser, "eval", "median_scale", False)
    mask = None if args.mask is None else fio.read_mask(args.mask)
    per_image = {}
    for name, pred_path, gt_path in _pairs(Path(args.pred), Path(args.gt)):
        per_image[name] = compute_metrics(
            fio.read_distance_map(pred_path), fio.read_distance_map(gt_path), mask, clamp, median_scale
        )
    reports = [per_image[k] for k in sorted(per_image)]
    summary = reports[0] if len(reports) == 1 else mean_report(reports)
    print(summary.table())
    report = {
        "clamp": list(clamp) if clamp else None,
        "median_scale": bool(median_scale),
        "mean": json.loads(summary.to_json()),
        "images": {k: json.loads(per_image[k].to_json()) for k in sorted(per_image)},
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        atomic_write_text(args.report, text)
    else:
        print(text, end="")
    return 0


def _read_features(path: str) -> list[np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as data:
            stages = sorted((int(k.split(".")[1]), np.array(data[k], dtype=np.float64)) for k in data.files
                            if k.startswith("stage."))
    except (OSError, ValueError, IndexError) as exc:
        raise IoFailure(f"cannot read features {path}: {exc}") from exc
    if [i for i, _ in stages] != list(range(len(stages))) or not stages:
        raise IoFailure(f"{path}: expected entries stage.0, stage.1, ... with consecutive indices")
    return [f for _, f in stages]


def cmd_fuse_head(args) -> int:
    features = _read_features(args.features)
    if args.weights:
        weights = load_weights(args.weights)
    else:
        weights = random_weights(args.seed, [f.shape[0] for f in features])
    depth_scale = args.depth_scale
    if args.calib:
        depth_scale = depth_scale_from_intrinsics(_read_calib(args.calib)[0], args.reference_focal)
    scale = OutputScale(depth_scale=depth_scale, d_min=args.d_min, d_max=args.d_max)
    outputs = run_head(features, weights, scale)
    fused = fuse_multi_scale(outputs, mode="inference")
    fio.write_distance_map(args.out, fused)
    if args.all_scales:
        for index, distance in fuse_multi_scale(outputs, mode="training"):
            fio.write_distance_map(Path(args.all_scales) / f"scale{index}.pfm", distance)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned settings file; explicit flags override it")
    common.add_argument("--ray-cache-dir", help="directory for cached per-camera ray tables")
    common.add_argument("--jobs", type=_positive_int, help="worker processes for per-frame work (default 1)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="fisheye-depth", description="Fisheye distance estimation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("project", parents=[common], help="3-D camera-frame points to pixels")
    p.add_argument("--calib", required=True)
    p.add_argument("xyz", nargs="*", type=float, metavar="X Y Z")
    p.add_argument("--points", help="text file with one 'x y z' per line")
    p.set_defaults(func=cmd_project, arity=("xyz", 3, "points"))

    p = sub.add_parser("unproject", parents=[common], help="pixels to unit viewing rays")
    p.add_argument("--calib", required=True)
    p.add_argument("uv", nargs="*", type=float, metavar="U V")
    p.add_argument("--pixels", help="text file with one 'u v' per line")
    p.set_defaults(func=cmd_unproject, arity=("uv", 2, "pixels"))

    p = sub.add_parser("build-cache", parents=[common], help="precompute and store a ray table")
    p.add_argument("--calib", required=True)
    p.add_argument("--out", help="explicit output file instead of the cache directory")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("convert-calib", parents=[common], help="KITTI-360 fisheye YAML to a calibration file")
    p.add_argument("--kitti360", required=True, help="KITTI-360 image_0x.yaml fisheye calibration")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-lossy", action="store_true", help="drop tangential terms instead of refusing")
    p.set_defaults(func=cmd_convert_calib)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--poses", required=True, help="world-from-camera poses, one frame per line")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--camera-id", default="cam0")
    p.add_argument("--samples", type=_positive_int, default=1, help="sub-pixel samples per axis")
    p.add_argument("--vehicle-mask", help="mask image copied into the dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("warp", parents=[common], help="warp a source frame into the target view")
    p.add_argument("--source", required=True)
    p.add_argument("--distance", required=True, help="target distance map (.pfm or .png)")
    p.add_argument("--calib", required=True, help="target calibration")
    p.add_argument("--source-calib", help="source calibration (default: target's)")
    p.add_argument("--poses", required=True)
    p.add_argument("--frames", type=_int_list, required=True, help="target,source frame ids")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out")
    p.add_argument("--target", help="target image; prints the photometric loss")
    p.add_argument("--vehicle-mask")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("estimate", parents=[common], help="estimate a metric distance map")
    p.add_argument("--target")
    p.add_argument("--sources", help="comma-separated source images")
    p.add_argument("--poses")
    p.add_argument("--calib")
    p.add_argument("--out", help="output distance map (.pfm or .png)")
    p.add_argument("--frames", type=_int_list, help="frame ids (target first); default from file names")
    p.add_argument("--hyps", type=int, help="number of distance hypotheses")
    p.add_argument("--range", type=_range, help="hypothesis range lo:hi in meters")
    p.add_argument("--levels", type=_positive_int, help="pyramid levels")
    p.add_argument("--vehicle-mask")
    p.add_argument("--dataset", help="dataset root; estimates every frame from its neighbors")
    p.add_argument("--camera", help="restrict --dataset to one camera")
    p.add_argument("--out-dir", help="output root for --dataset")
    p.add_argument(
        "--neighbors", type=_int_list, help="source frame offsets for --dataset, e.g. --neighbors=-2,2 (default -1,1)"
    )
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", parents=[common], help="depth metrics against ground truth")
    p.add_argument("--pred", required=True, help="distance map or directory of them")
    p.add_argument("--gt", required=True, help="ground truth file or directory (matched by name)")
    p.add_argument("--mask", help="evaluation mask image (nonzero = evaluate)")
    p.add_argument("--clamp", type=_range, help=f"prediction clamp lo:hi (default {DEFAULT_CLAMP[0]}:{DEFAULT_CLAMP[1]:g})")
    p.add_argument("--no-clamp", action="store_true", help="disable clamping and the ground-truth range filter")
    p.add_argument("--median-scale", action="store_true", help="rescale predictions by the median ratio")
    p.add_argument("--report", help="write the JSON report here instead of standard output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse-head", parents=[common], help="run the multi-channel output head")
    p.add_argument("--features", required=True, help=".npz with stage.0, stage.1, ... arrays (C, H, W)")
    p.add_argument("--weights", help=".npz head weights (default: seeded random)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--all-scales", help="directory for every per-scale distance map")
    p.add_argument("--depth-scale", type=float, default=1.0)
    p.add_argument("--calib", help="derive the depth scale from these intrinsics")
    p.add_argument("--reference-focal", type=float, default=300.0)
    p.add_argument("--d-min", type=float, default=OutputScale.d_min)
    p.add_argument("--d-max", type=float, default=OutputScale.d_max)
    p.set_defaults(func=cmd_fuse_head)
    return parser


def _check_usage(parser: argparse.ArgumentParser, args) -> None:
    if args.command == "estimate":
        needed = ("out_dir",) if args.dataset else ("target", "sources", "poses", "calib", "out")
        missing = ["--" + name.replace("_", "-") for name in needed if not getattr(args, name)]
        if missing:
            mode = "with --dataset" if args.dataset else "without --dataset"
            parser.error(f"estimate {mode} requires {', '.join(missing)}")
    arity = getattr(args, "arity", None)
    if arity is None:
        return
    name, n, file_flag = arity
    values = getattr(args, name)
    if getattr(args, file_flag):
        if values:
            parser.error(f"give either coordinates or --{file_flag}, not both")
    elif len(values) != n:
        parser.error(f"expected {n} coordinates, got {len(values)}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_usage(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FisheyeDepthError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: IoFailure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
