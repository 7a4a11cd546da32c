"""Command line: run / synth / render / mesh / eval."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import eval as metrics
from .config import Config, ConfigError, load_config, parse_assignments
from .dataio import DatasetError, Intrinsics, SyntheticScene, generate_synthetic, load_sequence, read_tum
from .fields import NeuralField
from .geometry import Pose
from .meshing import cull_unobserved, extract_mesh, save_ply
from .pipeline import PipelineError, run
from .render import render_image
from .voxmap import VoxelMap


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file overriding the defaults")
    p.add_argument("--seed", type=int, help="seed for every random draw")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", type=Path, help="output directory or file")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynslam", description="Dynamic neural RGB-D SLAM on a sparse voxel grid.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="track and map a sequence")
    p.add_argument("dataset", type=Path)
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    _common(p)

    p = sub.add_parser("synth", help="write a synthetic sequence")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--object", choices=["none", "box", "sphere"], default="none")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="image size (default 64 48)")
    p.add_argument("--noise", type=float, default=0.0, help="depth noise std in metres")
    _common(p)

    p = sub.add_parser("render", help="render colour and depth from a finished run")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--frame", type=int, help="take pose and time from this trajectory row")
    p.add_argument("--pose", type=float, nargs=7, metavar="V", help="tx ty tz qx qy qz qw")
    p.add_argument("--time", type=float, help="normalized time in [0, 1]")
    _common(p)

    p = sub.add_parser("mesh", help="extract meshes from a finished run")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--time", type=float, action="append", help="normalized time (repeatable, default 0)")
    p.add_argument("--dataset", type=Path, help="cull surfaces that no frame of this sequence observes")
    _common(p)

    p = sub.add_parser("eval", help="trajectory and image metrics")
    p.add_argument("--est", type=Path, help="estimated TUM trajectory")
    p.add_argument("--gt", type=Path, help="ground-truth TUM trajectory")
    p.add_argument("--rendered", type=Path, help="rendered image")
    p.add_argument("--reference", type=Path, help="reference image")
    _common(p)
    return parser


def resolve_config(args) -> Config:
    overrides = parse_assignments(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    run_cfg = getattr(args, "run_dir", None)
    path = args.config
    if path is None and run_cfg is not None and (run_cfg / "config.toml").exists():
        path = run_cfg / "config.toml"
    return load_config(path, overrides)


def _read_calibration(path: Path) -> Intrinsics:
    vals = path.read_text().split()
    return Intrinsics(*map(float, vals[:4]), int(vals[4]), int(vals[5]))


def _load_run(run_dir: Path):
    vm = VoxelMap.load(run_dir / "map.vxm")
    field = NeuralField.load(run_dir / "nets.bin")
    return vm, field


def cmd_run(args, cfg: Config) -> int:
    if args.print_config:
        sys.stdout.write(cfg.to_toml())
        return 0
    out = args.out or Path("run_out")
    try:
        seq = load_sequence(args.dataset, cfg.depth_scale, cfg.downsample)
    except (DatasetError, OSError) as exc:
        raise PipelineError(-1, "loading", exc) from exc
    result = run(seq, cfg, out)
    k = seq.intrinsics
    (out / "calibration.txt").write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")
    (out / "times.txt").write_text("".join(f"{f.index} {f.raw_timestamp:.6f} {f.timestamp!r}\n" for f in seq.frames))
    if seq.groundtruth is not None and len(seq.groundtruth) >= 3:
        traj = metrics.ate(result.timestamps, result.poses, result.timestamps, seq.groundtruth)
        (out / "metrics.json").write_text(metrics.metrics_json(traj))
        print(f"ATE rmse {traj.rmse:.4f} m over {traj.pairs} poses")
    print(f"wrote {out}")
    return 0


def cmd_synth(args, cfg: Config) -> int:
    out = args.out or Path("synthetic")
    scene = SyntheticScene(object_kind=None if args.object == "none" else args.object, depth_noise_std=args.noise)
    seq = generate_synthetic(scene, args.frames, out, tuple(args.size) if args.size else None, seed=cfg.seed)
    print(f"wrote {len(seq.frames)} frames to {out}")
    return 0


def _frame_times(run_dir: Path) -> dict[int, float]:
    out = {}
    path = run_dir / "times.txt"
    if path.exists():
        for line in path.read_text().splitlines():
            idx, _, t = line.split()
            out[int(idx)] = float(t)
    return out


def cmd_render(args, cfg: Config) -> int:
    vm, field = _load_run(args.run_dir)
    K = _read_calibration(args.run_dir / "calibration.txt")
    if args.pose is not None:
        pose = Pose.from_tum(args.pose)
        t = 0.0 if args.time is None else args.time
    elif args.frame is not None:
        _, poses = read_tum(args.run_dir / "trajectory.txt")
        pose = poses[args.frame]
        t = _frame_times(args.run_dir).get(args.frame, 0.0) if args.time is None else args.time
    else:
        raise ValueError("give --frame or --pose")
    color, depth = render_image(vm, field, K, pose, t, cfg.sampling(), seed=cfg.seed)
    out = args.out or args.run_dir / "render"
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(color, 0, 1) * 255).astype(np.uint8)).save(out / "color.png")
    Image.fromarray(np.clip(np.round(depth * 1000), 0, 65535).astype(np.uint16)).save(out / "depth.png")
    print(f"wrote {out / 'color.png'} and {out / 'depth.png'}")
    return 0


def cmd_mesh(args, cfg: Config) -> int:
    vm, field = _load_run(args.run_dir)
    out = args.out or args.run_dir / "meshes"
    out.mkdir(parents=True, exist_ok=True)
    seq = poses = None
    if args.dataset is not None:
        seq = load_sequence(args.dataset, cfg.depth_scale, cfg.downsample)
        _, poses = read_tum(args.run_dir / "trajectory.txt")
        if len(poses) != len(seq.frames):
            raise ValueError(f"trajectory has {len(poses)} poses but the dataset has {len(seq.frames)} frames")
    for t in args.time or [0.0]:
        mesh = extract_mesh(vm, field, t, cfg.cells_per_voxel, cfg.tr)
        if seq is not None:
            mesh = cull_unobserved(mesh, seq.frames, poses, seq.intrinsics, cfg.tr)
        path = out / f"mesh_t{t:.3f}.ply"
        save_ply(mesh, path)
        print(f"t={t:.3f}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces -> {path}")
    return 0


def _read_rgb(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def cmd_eval(args, cfg: Config) -> int:
    traj = images = None
    if args.est is not None or args.gt is not None:
        if args.est is None or args.gt is None:
            raise ValueError("--est and --gt go together")
        ts_e, est = read_tum(args.est)
        ts_g, gt = read_tum(args.gt)
        traj = metrics.ate(ts_e, est, ts_g, gt)
    if args.rendered is not None or args.reference is not None:
        if args.rendered is None or args.reference is None:
            raise ValueError("--rendered and --reference go together")
        images = metrics.image_metrics(_read_rgb(args.rendered), _read_rgb(args.reference))
    if traj is None and images is None:
        raise ValueError("nothing to evaluate")
    text = metrics.metrics_json(traj, images)
    if args.out is not None:
        args.out.write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "render": cmd_render, "mesh": cmd_mesh, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
