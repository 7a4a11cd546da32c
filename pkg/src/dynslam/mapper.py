"""Keyframe database, overlap-based target selection and joint map optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataio import Frame, Intrinsics, backproject, project, write_tum
from .geometry import Pose, twist_to_pose
from .loss import LossWeights, frame_loss
from .render import MAPPING, EmptyFrameError, SamplingConfig, render_rays, sample_pixels

log = logging.getLogger(__name__)


class OverlapError(ValueError):
    pass


@dataclass
class Keyframe:
    frame: Frame
    base_pose: Pose
    insertion: int
    twist: ad.Param = field(default_factory=lambda: ad.Param(np.zeros(6), name="kf.twist"))
    frozen: bool = False

    @property
    def pose(self) -> Pose:
        if not np.any(self.twist.value):
            return self.base_pose
        return twist_to_pose(self.base_pose, self.twist.value)


@dataclass
class KeyframeDB:
    gap: int = 10
    n_targets: int = 4
    keyframes: list[Keyframe] = field(default_factory=list)
    _inserted: int = 0

    def __len__(self):
        return len(self.keyframes)

    def maybe_insert(self, frame: Frame, pose: Pose) -> bool:
        """Insert every ``gap``-th frame (always frame 0 and the very first frame seen)."""
        if frame.index % self.gap != 0 and self.keyframes:
            return False
        if self.keyframes and frame.index <= self.keyframes[-1].frame.index:
            return False
        kf = Keyframe(frame, pose, self._inserted, frozen=not self.keyframes)
        kf.twist.trainable = not kf.frozen
        self.keyframes.append(kf)
        self._inserted += 1
        return True

    def find(self, frame_index: int) -> Keyframe | None:
        for kf in self.keyframes:
            if kf.frame.index == frame_index:
                return kf
        return None

    def dump(self, path) -> None:
        write_tum(path, [kf.frame.raw_timestamp for kf in self.keyframes], [kf.pose for kf in self.keyframes])


def overlap_ratio(current: tuple[Frame, Pose], candidate: tuple[Frame, Pose], intrinsics: Intrinsics,
                  n_points: int = 512, rng: np.random.Generator | None = None) -> float:
    """Fraction of the current frame's back-projected depth points that land
    inside the candidate camera's image with positive depth."""
    frame, pose = current
    _, cand_pose = candidate
    vs, us = np.nonzero(frame.depth > 0)
    if len(vs) == 0:
        raise OverlapError("untestable overlap: current frame has no valid depth")
    rng = rng if rng is not None else np.random.default_rng(0)
    pick = rng.integers(0, len(vs), size=n_points)
    pts = backproject(frame.depth, intrinsics, (vs[pick], us[pick]))
    return overlap_of_points(pose.apply(pts), cand_pose, intrinsics)


def overlap_of_points(world: np.ndarray, cand_pose: Pose, intrinsics: Intrinsics) -> float:
    cam = cand_pose.inverse().apply(world)
    uv, z = project(cam, intrinsics)
    inside = (
        (z > 0)
        & (uv[:, 0] >= -0.5) & (uv[:, 0] < intrinsics.width - 0.5)
        & (uv[:, 1] >= -0.5) & (uv[:, 1] < intrinsics.height - 0.5)
    )
    return float(np.mean(inside))


def select_by_ratio(ratios, insertions, n_targets: int) -> list[int]:
    """Positions of the ``n_targets`` smallest ratios; ties go to older insertions."""
    order = sorted(range(len(ratios)), key=lambda i: (ratios[i], insertions[i]))
    return order[:n_targets]


def select_targets(current: tuple[Frame, Pose], db: KeyframeDB, intrinsics: Intrinsics,
                   n_points: int = 512, rng: np.random.Generator | None = None) -> list:
    """Lowest-overlap keyframes followed by the current (frame, pose) pair."""
    if not db.keyframes:
        raise ValueError("keyframe database is empty")
    frame, pose = current
    pick_rng = rng if rng is not None else np.random.default_rng(0)
    vs, us = np.nonzero(frame.depth > 0)
    if len(vs) == 0:
        raise OverlapError("untestable overlap: current frame has no valid depth")
    pick = pick_rng.integers(0, len(vs), size=n_points)
    world = pose.apply(backproject(frame.depth, intrinsics, (vs[pick], us[pick])))
    ratios = [overlap_of_points(world, kf.pose, intrinsics) for kf in db.keyframes]
    chosen = select_by_ratio(ratios, [kf.insertion for kf in db.keyframes], db.n_targets)
    return [db.keyframes[i] for i in chosen] + [current]


@dataclass
class MapConfig:
    iterations: int = 15
    rays_per_keyframe: int = 1024
    lr_embeddings: float = 1e-2
    lr_networks: float = 1e-2
    lr_pose: float = 1e-3
    dynamic_fraction: float = 0.5
    static_pose_grad: bool = True


@dataclass
class Member:
    """One optimization member of a mapping round."""

    frame: Frame
    base_pose: Pose
    twist: ad.Param
    frozen: bool


def _members(targets, db: KeyframeDB | None) -> list[Member]:
    """One member per frame: a current frame that is already a selected
    keyframe is not optimized twice."""
    out, seen = [], set()
    for tgt in targets:
        if isinstance(tgt, Keyframe):
            m = Member(tgt.frame, tgt.base_pose, tgt.twist, tgt.frozen)
        else:
            frame, pose = tgt
            kf = db.find(frame.index) if db is not None else None
            if kf is not None:
                m = Member(kf.frame, kf.base_pose, kf.twist, kf.frozen)
            else:
                m = Member(frame, pose, ad.Param(np.zeros(6), name="current.twist"), False)
        if m.frame.index in seen:
            continue
        seen.add(m.frame.index)
        out.append(m)
    return out


def map_round(targets, intrinsics: Intrinsics, voxmap, field_, cfg: MapConfig, weights: LossWeights,
              sampling: SamplingConfig, rng: np.random.Generator, db: KeyframeDB | None = None,
              iterations: int | None = None, on_step=None):
    """Jointly optimize embeddings, both networks and member poses, one member at a time.

    ``targets`` mixes :class:`Keyframe` objects and ``(frame, pose)`` pairs.
    Returns ``(history, refined)`` where ``history`` holds one loss dict per
    member step and ``refined`` maps frame index to the member's final pose.
    """
    members = _members(targets, db)
    net_params = field_.params()
    history = []
    n_iter = cfg.iterations if iterations is None else iterations
    for it in range(n_iter):
        for m in members:
            tape = ad.Tape(frozen=[m.twist] if m.frozen else ())
            try:
                rays = sample_pixels(m.frame, intrinsics, cfg.rays_per_keyframe, MAPPING, rng, cfg.dynamic_fraction)
            except EmptyFrameError:
                log.warning("frame %d has no valid depth; skipped", m.frame.index)
                continue
            twist = None if m.frozen else tape.param(m.twist)
            res = render_rays(tape, rays, voxmap, field_, m.frame.timestamp, m.base_pose, twist, sampling, rng,
                              static_pose_grad=cfg.static_pose_grad)
            if res.n_renderable == 0:
                log.warning("frame %d: no renderable rays this iteration; skipped", m.frame.index)
                continue
            breakdown = frame_loss(res, rays, sampling.tr, weights)
            ad.backward(tape, breakdown.total)
            ad.adam_step([voxmap.embeddings], lr=cfg.lr_embeddings)
            ad.adam_step(net_params, lr=cfg.lr_networks)
            if not m.frozen:
                ad.adam_step([m.twist], lr=cfg.lr_pose)
            vals = breakdown.values()
            tape.clear()
            vals.update(iteration=it, frame=m.frame.index)
            history.append(vals)
            if on_step is not None:
                on_step(vals)
    refined = {m.frame.index: (m.base_pose if m.frozen else twist_to_pose(m.base_pose, m.twist.value)) for m in members}
    return history, refined
