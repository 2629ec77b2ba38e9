"""Command-line entry point wiring database construction, inference, motion
segmentation, stereo synthesis and evaluation.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
Progress goes to stderr; machine-readable output only to files.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import cv2
import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration keys accepted in config files and as flag overrides
CONFIG_SCHEMA = {
    "k": int, "alpha": float, "beta": float, "gamma": float,
    "nu": float, "eta": float, "epsilon": float, "max_outer": int,
    "window": int, "window_overlap": int,
    "tau": float,
    "max_disparity": float, "convergence_percentile": float,
    "align_radius": int, "align_levels": int, "align_sweeps": int,
    "workers": int, "resolution": str,
}

CONFIG_RANGES = {
    "k": (1, 64), "alpha": (0, 1e6), "beta": (0, 1e6), "gamma": (0, 1e6),
    "nu": (0, 1e9), "eta": (0, 1e6), "epsilon": (1e-12, 1.0),
    "max_outer": (1, 10000), "window": (2, 10000), "window_overlap": (0, 100),
    "tau": (0, 1e3), "max_disparity": (0, 1e4),
    "convergence_percentile": (0, 100), "align_radius": (1, 64),
    "align_levels": (1, 12), "align_sweeps": (0, 1000), "workers": (1, 256),
}


def _parse_value(key, raw):
    caster = CONFIG_SCHEMA[key]
    raw = raw.strip().strip('"').strip("'")
    try:
        value = caster(raw) if caster is not str else raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}")
    if key in CONFIG_RANGES:
        lo, hi = CONFIG_RANGES[key]
        if not lo <= value <= hi:
            raise UsageError(f"{key}={value} outside allowed range [{lo}, {hi}]")
    return value


def load_config_file(path):
    """TOML-style key=value configuration; unknown keys are rejected."""
    config = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        config[key] = _parse_value(key, raw)
    return config


def _resolution(spec):
    try:
        w, h = spec.lower().split("x")
        return int(w), int(h)
    except Exception:
        raise UsageError(f"bad resolution {spec!r}, expected WIDTHxHEIGHT")


def resolve_config(args):
    """Defaults, then config file, then explicit flags (flags win)."""
    from .align import AlignParams
    from .optimizer import ObjectiveParams
    from .viewsynth import StereoParams

    obj = ObjectiveParams()
    aln = AlignParams()
    config = {
        "k": obj.k, "alpha": obj.alpha, "beta": obj.beta, "gamma": obj.gamma,
        "nu": obj.nu, "eta": obj.eta, "epsilon": obj.epsilon,
        "max_outer": obj.max_outer, "window": obj.window,
        "window_overlap": obj.window_overlap,
        "tau": 0.01,
        "max_disparity": StereoParams().max_disparity,
        "convergence_percentile": StereoParams().convergence_percentile,
        "align_radius": aln.search_radius, "align_levels": aln.levels,
        "align_sweeps": aln.sweeps,
        "workers": os.cpu_count() or 1,
        "resolution": "",
    }
    if getattr(args, "config", None):
        config.update(load_config_file(args.config))
    for key in CONFIG_SCHEMA:
        flag = getattr(args, key, None)
        if flag is not None:
            config[key] = _parse_value(key, str(flag))
    return config


def _objective_params(config):
    from .optimizer import ObjectiveParams

    return ObjectiveParams(
        alpha=config["alpha"], beta=config["beta"], gamma=config["gamma"],
        nu=config["nu"], eta=config["eta"], epsilon=config["epsilon"],
        k=config["k"], max_outer=config["max_outer"],
        window=config["window"], window_overlap=config["window_overlap"])


def _align_params(config):
    from .align import AlignParams

    return AlignParams(search_radius=config["align_radius"],
                       levels=config["align_levels"],
                       sweeps=config["align_sweeps"])


def _print_config(config):
    for key in sorted(config):
        print(f"{key} = {config[key]}")


def _add_common(sub):
    sub.add_argument("--config", help="key=value configuration file")
    sub.add_argument("--print-config", action="store_true",
                     help="echo the fully resolved configuration")
    sub.add_argument("--workers", type=int)
    for key in ("k", "max_outer", "window", "window_overlap",
                "align_radius", "align_levels", "align_sweeps"):
        sub.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
    for key in ("alpha", "beta", "gamma", "nu", "eta", "epsilon", "tau",
                "max_disparity", "convergence_percentile"):
        sub.add_argument(f"--{key.replace('_', '-')}", type=float, dest=key)
    sub.add_argument("--resolution", help="working resolution WIDTHxHEIGHT")


def build_parser():
    parser = _Parser(prog="depthtransfer",
                     description="Non-parametric depth estimation and "
                                 "2D-to-3D conversion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-db", parents=[], help="ingest an RGBD directory")
    p.add_argument("root")
    p.add_argument("--cache", required=True, help="feature cache to write")
    _add_common(p)

    p = sub.add_parser("infer", help="single-image depth inference")
    p.add_argument("image")
    p.add_argument("--db", required=True, help="feature cache from build-db")
    p.add_argument("-o", "--output", required=True, help="depth PNG path")
    p.add_argument("--dump-trace", help="objective trace CSV")
    p.add_argument("--dump-warps", help="directory for warp/residual PFMs")
    _add_common(p)

    p = sub.add_parser("infer-video", help="video depth inference")
    p.add_argument("framedir")
    p.add_argument("--db", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--no-motion", action="store_true",
                   help="disable the moving-object term")
    p.add_argument("--no-temporal", action="store_true",
                   help="disable temporal coherence")
    p.add_argument("--dump-motion", action="store_true",
                   help="write motion masks next to the depth maps")
    p.add_argument("--dump-flow", action="store_true",
                   help="write .flo flow fields next to the depth maps")
    _add_common(p)

    p = sub.add_parser("motion-mask", help="moving-object segmentation only")
    p.add_argument("framedir")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("stereo", help="synthesize stereoscopic frames")
    p.add_argument("framedir")
    p.add_argument("--depth", required=True, help="directory of depth maps")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--format", choices=("anaglyph", "sbs"), default="anaglyph")
    _add_common(p)

    p = sub.add_parser("eval", help="run the benchmark protocol")
    p.add_argument("--db", required=True)
    p.add_argument("--test", required=True, help="test-set directory")
    p.add_argument("--protocol", choices=("make3d", "rgbd"), default="make3d")
    p.add_argument("-o", "--output", required=True, help="report CSV path")
    p.add_argument("--pooled", action="store_true",
                   help="pixel-pooled aggregation instead of image means")
    _add_common(p)
    return parser


def _load_frames(framedir):
    from .fileio import read_image

    paths = sorted(Path(framedir).glob("img_*.png"))
    if not paths:
        raise UsageError(f"no img_*.png frames under {framedir}")
    return [read_image(p) for p in paths], paths


def _status(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_build_db(args, config):
    from .database import ingest

    res = _resolution(config["resolution"]) if config["resolution"] else None
    db = ingest(args.root, cache=args.cache, resolution=res)
    _status(f"ingested {len(db)} entries from {len(db.sources())} sources "
            f"at {db.resolution[0]}x{db.resolution[1]}")
    for err in db.errors:
        _status(f"  ingest error [{err.source_id}/{err.frame_index}]: "
                f"{err.message}")
    return 0


def _open_database(args, config):
    from .database import load_database

    res = _resolution(config["resolution"]) if config["resolution"] else None
    return load_database(args.db, resolution=res)


def cmd_infer(args, config):
    from .fileio import read_image, write_depth_png, write_pfm
    from .optimizer import infer_image

    db = _open_database(args, config)
    img = read_image(args.image)

    trace_rows = []
    warp_dir = Path(args.dump_warps) if args.dump_warps else None
    if warp_dir:
        warp_dir.mkdir(parents=True, exist_ok=True)

    def warp_sink(j, warp):
        if warp_dir:
            write_pfm(warp_dir / f"warp_{j:02d}.pfm",
                      np.dstack([warp.u, warp.v]).astype(np.float32))
            write_pfm(warp_dir / f"residual_{j:02d}.pfm", warp.residual)

    depth = infer_image(img, db, _objective_params(config),
                        _align_params(config),
                        trace_sink=trace_rows.extend,
                        warp_sink=warp_sink if warp_dir else None)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_depth_png(out, depth)
    write_pfm(out.with_suffix(".pfm"), depth.values)
    if args.dump_trace:
        with open(args.dump_trace, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "objective"])
            for i, obj in enumerate(trace_rows):
                writer.writerow([i, f"{obj:.10g}"])
    _status(f"wrote {out} and {out.with_suffix('.pfm')}")
    return 0


def _write_mask(path, mask):
    cv2.imwrite(str(path), (mask.mask.astype(np.uint8) * 255))


def cmd_infer_video(args, config):
    from .fileio import write_depth_png, write_flo, write_pfm
    from .optimizer import infer_video

    db = _open_database(args, config)
    frames, _paths = _load_frames(args.framedir)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)

    def mask_sink(masks):
        if args.dump_motion:
            for t, m in enumerate(masks):
                _write_mask(outdir / f"motion_{t:05d}.png", m)

    def flow_sink(flows):
        if args.dump_flow:
            for t, fl in enumerate(flows):
                write_flo(outdir / f"flow_{t:05d}.flo", fl.u, fl.v)

    depths = infer_video(
        frames, db, _objective_params(config), _align_params(config),
        with_motion=not args.no_motion, with_temporal=not args.no_temporal,
        progress=_status, mask_sink=mask_sink, flow_sink=flow_sink)
    for t, depth in enumerate(depths):
        write_depth_png(outdir / f"depth_{t:05d}.png", depth)
        write_pfm(outdir / f"depth_{t:05d}.pfm", depth.values)
    _status(f"wrote {len(depths)} depth maps to {outdir}")
    return 0


def cmd_motion_mask(args, config):
    from .motionseg import segment_frames

    frames, _paths = _load_frames(args.framedir)
    if len(frames) < 3:
        raise UsageError("motion segmentation needs at least 3 frames")
    masks = segment_frames(frames, tau=config["tau"])
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(masks):
        _write_mask(outdir / f"motion_{t:05d}.png", m)
    _status(f"wrote {len(masks)} masks to {outdir}")
    return 0


def cmd_stereo(args, config):
    from .fileio import read_depth, write_image
    from .flow import estimate_flow
    from .imageops import to_grayscale
    from .viewsynth import (StereoParams, compose_anaglyph,
                            compose_side_by_side, depth_to_disparity,
                            render_view, temporal_filter_disparity)

    frames, frame_paths = _load_frames(args.framedir)
    depth_dir = Path(args.depth)
    depths = []
    for p in frame_paths:
        idx = p.stem.split("_")[1]
        dp = depth_dir / f"depth_{idx}.png"
        if not dp.is_file():
            raise UsageError(f"missing depth map {dp}")
        depths.append(read_depth(dp))

    sp = StereoParams(max_disparity=config["max_disparity"],
                      convergence_percentile=config["convergence_percentile"])
    disparities = [depth_to_disparity(d, sp) for d in depths]
    if len(frames) > 1:
        grays = [to_grayscale(f) for f in frames]
        flows = [estimate_flow(grays[t], grays[t + 1])
                 for t in range(len(frames) - 1)]
        disparities = temporal_filter_disparity(disparities, flows)

    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for t, (frame, disp) in enumerate(zip(frames, disparities)):
        right, _holes = render_view(frame, disp)
        if args.format == "anaglyph":
            composed = compose_anaglyph(frame, right)
            write_image(outdir / f"anaglyph_{t:05d}.png", composed)
        else:
            composed = compose_side_by_side(frame, right)
            write_image(outdir / f"sbs_{t:05d}.png", composed)
    _status(f"wrote {len(frames)} {args.format} frames to {outdir}")
    return 0


def cmd_eval(args, config):
    from .evaluation import load_test_items, run_benchmark

    db = _open_database(args, config)
    db_root = Path(db.root).resolve()
    test_root = Path(args.test).resolve()
    if db_root == test_root or db_root in test_root.parents \
            or test_root in db_root.parents:
        raise UsageError(
            f"train and test paths overlap: {db_root} vs {test_root}")
    items = load_test_items(args.test)
    report = run_benchmark(
        db, items, _objective_params(config), _align_params(config),
        protocol=args.protocol, workers=config["workers"],
        csv_path=args.output,
        summary_path=str(Path(args.output).with_suffix(".json")),
        pooled=args.pooled, progress=_status)
    _status(f"rel={report.rel:.4f} log10={report.log10:.4f} "
            f"rms={report.rms:.4f} over {len(report.items)} items "
            f"({len(report.failures)} failures)")
    return 0


COMMANDS = {
    "build-db": cmd_build_db,
    "infer": cmd_infer,
    "infer-video": cmd_infer_video,
    "motion-mask": cmd_motion_mask,
    "stereo": cmd_stereo,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = resolve_config(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "print_config", False):
        _print_config(config)
    try:
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
