"""Command line entry point: ``semsurfel <command> [options]``.

Exit codes: 0 success, 1 operation error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, dump_config, load_config, save_config

log = logging.getLogger("semsurfel")

MODES = ("geometric", "nomovable", "semantic")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CommandError(RuntimeError):
    """Operation failure reported with exit code 1."""


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (default: <data>/config.yaml if present)")
    p.add_argument("--print-config", action="store_true", help="echo the resolved configuration and exit")
    g = p.add_argument_group("configuration overrides")
    for f in dataclasses.fields(RunConfig):
        if f.name == "seed":
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE",
                       help=argparse.SUPPRESS if f.name == "class_table" else None)
    g.add_argument("--class-table-file", dest="cfg_class_table", metavar="PATH",
                   help="class name/color/movable table (YAML)")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
    p.add_argument("--threads", type=int, default=None, help="numeric library threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semsurfel", description="Semantic surfel LiDAR odometry.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("odometry", help="estimate a trajectory for a sequence directory")
    p.add_argument("--data", required=True, help="sequence directory with velodyne/ (and labels/)")
    p.add_argument("--mode", choices=MODES, default="semantic")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--map", action="store_true", help="also write map.ply with all surfels")
    _add_config_options(p)
    _common(p)

    p = sub.add_parser("evaluate", help="relative pose errors of an estimate against ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--lengths", default="odom", help="odom, road or a comma separated list in metres")
    p.add_argument("--stride", type=int, default=1, help="segment start stride (benchmark uses 10)")
    p.add_argument("--calib", help="calib.txt; the estimate is converted to the camera frame")
    p.add_argument("--name", default="estimate", help="row label in the table")
    p.add_argument("--out", help="directory for errors.csv")
    _common(p)

    p = sub.add_parser("refine-labels", help="write raw and refined label rasters for inspection")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-frames", type=int, default=None)
    _add_config_options(p)
    _common(p)

    p = sub.add_parser("export-map", help="run odometry and write only the surfel map as PLY")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="semantic")
    p.add_argument("--which", choices=("all", "stable"), default="stable")
    p.add_argument("--color", choices=("class", "normal", "gray"), default="class")
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--max-frames", type=int, default=None)
    _add_config_options(p)
    _common(p)

    p = sub.add_parser("simulate-export", help="write a synthetic sequence in KITTI layout")
    p.add_argument("--scenario", required=True, help="scenario file or one of: static_room, highway_jam, urban_parked")
    p.add_argument("--out", required=True)
    p.add_argument("--label-noise", type=float, default=0.0, help="fraction of labels flipped")
    p.add_argument("--frames", type=int, default=None, help="truncate the scenario")
    p.add_argument("--noise-sigma", type=float, default=None, help="override range noise (m)")
    _common(p)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    _common(p)
    return parser


def _setup(args) -> None:
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            raise CommandError("--threads must be >= 1")
        if "numpy" in sys.modules:
            log.warning("numpy already loaded; --threads may not take effect")
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)


def _resolve_config(args, data_dir: str | None = None) -> RunConfig:
    path = args.config
    if path is None and data_dir is not None and (Path(data_dir) / "config.yaml").is_file():
        path = str(Path(data_dir) / "config.yaml")
        log.info("using %s", path)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return load_config(path, overrides)
    except (ConfigError, ValueError, TypeError) as exc:
        raise CommandError(f"configuration: {exc}") from exc
    except OSError as exc:
        raise CommandError(f"cannot read config: {exc}") from exc


def _check_out(out: str, data: str | None = None, create: bool = True) -> Path:
    o = Path(out).resolve()
    if data is not None:
        d = Path(data).resolve()
        if o == d or d in o.parents:
            raise CommandError(f"--out {out} lies inside the input tree {data}")
    if create:
        o.mkdir(parents=True, exist_ok=True)
    return o


def cmd_odometry(args) -> int:
    cfg = _resolve_config(args, args.data)
    if args.print_config:
        print(dump_config(cfg), end="")
        return 0
    from . import kitti_io
    from .pipeline import run_sequence, write_report
    from .surfel_map import export_ply
    _check_out(args.out, args.data, create=False)
    report, odo = run_sequence(args.data, cfg, args.mode, max_frames=args.max_frames)
    if len(report) == 0:
        print("no scans found; nothing written")
        return 0
    out = _check_out(args.out, args.data)
    write_report(report, out)
    save_config(cfg, out / "config.yaml")
    if args.map:
        export_ply(odo.map, out / "map.ply", cfg, mode="all")
    fallbacks = sum(fr.fallback for fr in report.frames)
    print(f"mode={args.mode} frames={len(report)} surfels={len(odo.map)} fallbacks={fallbacks} seed={cfg.seed}")
    gt = Path(args.data) / "poses.txt"
    if gt.is_file() and len(report) > 1:
        from .evaluation import final_drift
        gt_poses = kitti_io.read_poses(gt)[:len(report)]
        if len(gt_poses) == len(report):
            print(f"final drift vs poses.txt: {final_drift(report.poses, gt_poses):.4f} m")
    return 0


def cmd_evaluate(args) -> int:
    from . import kitti_io
    from .evaluation import format_table, parse_lengths, relative_errors, to_camera_frame
    try:
        lengths = parse_lengths(args.lengths)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    est = kitti_io.read_poses(args.est)
    gt = kitti_io.read_poses(args.gt)
    if args.calib:
        est = to_camera_frame(est, kitti_io.read_calib(args.calib))
    rep = relative_errors(est, gt, lengths, stride=args.stride)
    print(format_table({args.name: rep}))
    for L in rep.skipped:
        print(f"note: {L:g} m segments skipped (trajectory too short)")
    if args.out:
        out = _check_out(args.out)
        rep.write_csv(out / "errors.csv")
    return 0


def cmd_refine_labels(args) -> int:
    cfg = _resolve_config(args, args.data)
    if args.print_config:
        print(dump_config(cfg), end="")
        return 0
    import numpy as np
    from PIL import Image

    from . import kitti_io
    from .projection import compute_normals, project
    from .semantics import ClassTable, refine
    out = _check_out(args.out, args.data)
    seq = kitti_io.Sequence.open(args.data)
    n = len(seq) if args.max_frames is None else min(len(seq), args.max_frames)
    table = ClassTable.load(cfg.class_table or None)
    for i in range(n):
        if not seq.has_labels(i):
            raise CommandError(f"missing label file {seq.label_path(i)}")
        scan = kitti_io.filter_scan(seq.load(i, True, cfg.default_confidence), cfg.min_range, cfg.max_range)
        maps = compute_normals(project(scan, cfg), cfg)
        ref = refine(maps, cfg)
        stem = seq.scan_files[i].stem
        np.save(out / f"{stem}_raw.npy", maps.label)
        np.save(out / f"{stem}_refined.npy", ref.label)
        Image.fromarray(table.colors(maps.label)).save(out / f"{stem}_raw.png")
        Image.fromarray(table.colors(ref.label)).save(out / f"{stem}_refined.png")
    print(f"wrote {n} frames to {out}")
    return 0


def cmd_export_map(args) -> int:
    cfg = _resolve_config(args, args.data)
    if args.print_config:
        print(dump_config(cfg), end="")
        return 0
    from .pipeline import run_sequence
    from .surfel_map import export_ply
    out = _check_out(args.out, args.data)
    _, odo = run_sequence(args.data, cfg, args.mode, max_frames=args.max_frames)
    n = export_ply(odo.map, out / "map.ply", cfg, mode=args.which, color=args.color, binary=not args.ascii)
    print(f"wrote {n} surfels to {out / 'map.ply'}")
    return 0


def cmd_simulate_export(args) -> int:
    from .synthworld import export_sequence, load_scenario
    try:
        scn = load_scenario(args.scenario)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"cannot load scenario {args.scenario}: {exc}") from exc
    if args.seed is not None:
        scn = scn.replace(seed=args.seed)
    if args.frames is not None:
        scn = scn.replace(frames=min(scn.frames, args.frames))
    if args.noise_sigma is not None:
        scn = scn.replace(noise_sigma=args.noise_sigma)
    if not 0.0 <= args.label_noise <= 1.0:
        raise CommandError("--label-noise must lie in [0, 1]")
    out = _check_out(args.out)
    export_sequence(scn, out, label_noise=args.label_noise)
    print(f"wrote {scn.frames} frames of {scn.name} to {out} (seed={scn.seed})")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run
    return 0 if run(seed=42 if args.seed is None else args.seed) else 1


COMMANDS = {
    "odometry": cmd_odometry,
    "evaluate": cmd_evaluate,
    "refine-labels": cmd_refine_labels,
    "export-map": cmd_export_map,
    "simulate-export": cmd_simulate_export,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup(args)
        return COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
