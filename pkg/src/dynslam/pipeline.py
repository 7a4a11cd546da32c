"""Alternating tracking and mapping over an RGB-D sequence."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config
from .dataio import Sequence, write_tum
from .fields import NeuralField
from .geometry import Pose
from .mapper import Keyframe, KeyframeDB, map_round, select_targets
from .render import STATIC, TRACKING, render_image
from .tracker import TrackState, track_frame
from .voxmap import VoxelMap

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("frame", "phase", "iteration", "member", "total", "color", "depth", "space", "sdf", "zero")


class PipelineError(RuntimeError):
    """A module failure tagged with the frame index and phase."""

    def __init__(self, frame: int, phase: str, cause: Exception):
        super().__init__(f"frame {frame}, {phase}: {type(cause).__name__}: {cause}")
        self.frame = frame
        self.phase = phase


@dataclass
class FrameLog:
    index: int
    timestamp: float
    iterations: int
    final_loss: float
    accepted: bool
    pose: Pose

    def line(self) -> str:
        row = " ".join(f"{x:.9f}" for x in self.pose.tum())
        return f"{self.index} {self.iterations} {self.final_loss:.9g} {int(self.accepted)} {self.timestamp:.6f} {row}"


@dataclass
class RunResult:
    config: Config
    poses: list[Pose]
    timestamps: list[float]
    voxmap: VoxelMap
    field: NeuralField
    keyframes: KeyframeDB
    track_log: list[FrameLog] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)
    phases: list[tuple[int, str]] = field(default_factory=list)
    seconds: float = 0.0


class SLAM:
    """Owns the map, the networks, the keyframe database and one seeded RNG."""

    def __init__(self, cfg: Config, intrinsics):
        self.cfg = cfg
        self.intrinsics = intrinsics
        self.rng = np.random.default_rng(cfg.seed)
        self.voxmap = VoxelMap(cfg.voxel_size, cfg.embedding_dim)
        self.field = NeuralField(cfg.embedding_dim, cfg.hidden, cfg.time_freqs, seed=cfg.seed,
                                 scene_time=cfg.scene_time)
        self.db = KeyframeDB(cfg.gap, cfg.n_targets)
        self.state = TrackState(lambda_r=cfg.lambda_r, iterations=cfg.track_iterations,
                                rays_per_iter=cfg.track_rays, lr=cfg.track_lr,
                                lr_end=cfg.track_lr_end if cfg.track_lr_end > 0 else None, gate_enabled=cfg.gate,
                                sample_mode=STATIC if cfg.track_static_only else TRACKING,
                                static_pose_grad=cfg.static_pose_grad)
        self.weights = cfg.weights()
        self.sampling = cfg.sampling()
        self.map_cfg = cfg.mapping()
        self.poses: dict[int, Pose] = {}
        self.track_log: list[FrameLog] = []
        self.losses: list[dict] = []
        self.phases: list[tuple[int, str]] = []

    def _phase(self, index: int, name: str, fn):
        self.phases.append((index, name))
        try:
            return fn()
        except Exception as exc:
            raise PipelineError(index, name, exc) from exc

    def frame_rng(self, index: int) -> np.random.Generator:
        """Generator for one frame, spawned from the run seed.

        Keeping one stream per frame means a skipped mapping round does not
        shift the random draws of every later frame.
        """
        return np.random.default_rng([self.cfg.seed, index])

    def step(self, frame) -> FrameLog:
        i = frame.index
        self.rng = self.frame_rng(i)
        res = self._phase(i, "tracking", lambda: track_frame(
            frame, self.intrinsics, self.voxmap, self.field, self.state, self.weights, self.sampling, self.rng))
        self.poses[i] = res.pose
        entry = FrameLog(i, frame.raw_timestamp, res.iterations, res.final_loss, res.accepted, res.pose)
        self.track_log.append(entry)
        for k, v in enumerate(res.losses):
            self.losses.append({"frame": i, "phase": "tracking", "iteration": k, "member": i, "total": v})
        if not res.accepted:
            log.info("frame %d rejected by the gate (loss %.4g)", i, res.final_loss)
        self._phase(i, "mapping", lambda: self._map(frame, res.pose, res.accepted))
        return entry

    def _map(self, frame, pose: Pose, accepted: bool = True) -> None:
        """One mapping round after tracking ``frame``.

        A frame the gate rejected still joins the round, but with its pose
        held at the prior; it allocates no voxels and never becomes a
        keyframe, so a corrupted frame cannot plant geometry in the map.
        """
        i = frame.index
        first = len(self.db) == 0
        if accepted:
            self.voxmap.allocate_from_depth(frame, self.intrinsics, pose, self.cfg.tr, self.rng)
            self.db.maybe_insert(frame, pose)
        if len(self.db) == 0:
            return
        targets = select_targets((frame, pose), self.db, self.intrinsics, self.cfg.overlap_points, self.rng)
        if not accepted:
            targets[-1] = Keyframe(frame, pose, insertion=-1, frozen=True)
        n_iter = self.cfg.init_iterations if first else self.map_cfg.iterations

        def record(vals):
            row = {"frame": i, "phase": "mapping", "member": vals["frame"]}
            row.update(vals)
            row["frame"] = i
            self.losses.append(row)

        _, refined = map_round(targets, self.intrinsics, self.voxmap, self.field, self.map_cfg, self.weights,
                               self.sampling, self.rng, self.db, iterations=max(n_iter, 1), on_step=record)
        if i in refined:
            self.poses[i] = refined[i]
            self.state.last_pose = refined[i]

    def trajectory(self, frames) -> list[Pose]:
        out = []
        for f in frames:
            kf = self.db.find(f.index)
            out.append(kf.pose if kf is not None else self.poses[f.index])
        return out


def run(seq: Sequence, cfg: Config, out_dir=None, on_frame=None) -> RunResult:
    """Track and map every frame of ``seq``; write artifacts when ``out_dir`` is given."""
    start = time.perf_counter()
    slam = SLAM(cfg, seq.intrinsics)
    for frame in seq.frames:
        entry = slam.step(frame)
        log.info("track %s", entry.line())
        if on_frame is not None:
            on_frame(entry)
        if out_dir is not None and cfg.preview_every and frame.index % cfg.preview_every == 0:
            _preview(slam, frame, Path(out_dir))
    result = RunResult(cfg, slam.trajectory(seq.frames), [f.raw_timestamp for f in seq.frames], slam.voxmap,
                       slam.field, slam.db, slam.track_log, slam.losses, slam.phases, time.perf_counter() - start)
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def _preview(slam: SLAM, frame, out: Path) -> None:
    out = out / "previews"
    out.mkdir(parents=True, exist_ok=True)
    color, _ = render_image(slam.voxmap, slam.field, slam.intrinsics, slam.poses[frame.index], frame.timestamp,
                            slam.sampling, guide_depth=frame.depth, seed=frame.index)
    Image.fromarray((np.clip(color, 0, 1) * 255 + 0.5).astype(np.uint8)).save(out / f"{frame.index:06d}.png")


def write_artifacts(result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / "trajectory.txt",
        "keyframes": out / "keyframes.txt",
        "losses": out / "losses.csv",
        "tracking_log": out / "tracking.log",
        "map": out / "map.vxm",
        "networks": out / "nets.bin",
        "config": out / "config.toml",
        "manifest": out / "manifest.json",
    }
    write_tum(paths["trajectory"], result.timestamps, result.poses)
    result.keyframes.dump(paths["keyframes"])
    with open(paths["losses"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, LOSS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in result.losses:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    with open(paths["tracking_log"], "w") as fh:
        fh.write("# frame iterations final_loss accepted timestamp tx ty tz qx qy qz qw\n")
        for entry in result.track_log:
            fh.write(entry.line() + "\n")
    result.voxmap.save(paths["map"])
    result.field.save(paths["networks"])
    paths["config"].write_text(result.config.to_toml())
    manifest = {
        "seed": result.config.seed,
        "config": result.config.to_dict(),
        "frames": len(result.poses),
        "keyframes": len(result.keyframes),
        "voxels": len(result.voxmap),
        "rejected": [e.index for e in result.track_log if not e.accepted],
        "seconds": round(result.seconds, 3),
        "artifacts": {k: p.name for k, p in paths.items()},
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2) + "\n")
    return paths


def parameter_checksum(voxmap: VoxelMap, field_: NeuralField) -> str:
    """Hex digest over every map and network parameter (for no-mutation checks)."""
    h = hashlib.sha256()
    for p in [voxmap.embeddings, *field_.params()]:
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


__all__ = ["SLAM", "run", "RunResult", "FrameLog", "PipelineError", "write_artifacts", "parameter_checksum"]
