"""Per-frame camera tracking against a frozen map.

The pose starts at the previous frame's estimate (zero-motion model) and a
6-vector twist on top of it is optimized with Adam.  The final loss then
goes through a gate: a frame whose loss exceeds ``lambda_r`` times the last
accepted loss keeps the zero-motion prior instead.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Pose, twist_to_pose
from .loss import LossWeights, frame_loss
from .render import TRACKING, SamplingConfig, render_rays, sample_pixels

log = logging.getLogger(__name__)

__all__ = ["TrackState", "TrackResult", "track_frame", "robustness_gate", "twist_to_pose"]


@dataclass
class TrackState:
    last_pose: Pose = field(default_factory=Pose.identity)
    last_final_loss: float | None = None
    lambda_r: float = 2.0
    iterations: int = 30
    rays_per_iter: int = 1024
    lr: float = 1e-3
    lr_end: float | None = None  # geometric decay from lr to lr_end over the iterations
    gate_enabled: bool = True
    sample_mode: str = TRACKING
    static_pose_grad: bool = True


@dataclass
class TrackResult:
    pose: Pose
    accepted: bool
    final_loss: float
    iterations: int
    losses: list[float] = field(default_factory=list)
    optimized_pose: Pose | None = None


def robustness_gate(current_loss: float, state: TrackState) -> bool:
    """Accept when ``current_loss <= lambda_r * last_final_loss``; updates the state on accept."""
    if not math.isfinite(current_loss):
        return False
    if state.last_final_loss is None or not state.gate_enabled:
        state.last_final_loss = current_loss
        return True
    if current_loss <= state.lambda_r * state.last_final_loss:
        state.last_final_loss = current_loss
        return True
    return False


def _lr_at(state: TrackState, k: int) -> float:
    if state.lr_end is None or state.iterations < 2:
        return state.lr
    return state.lr * (state.lr_end / state.lr) ** (k / (state.iterations - 1))


def track_frame(frame, intrinsics, voxmap, field_, state: TrackState, weights: LossWeights,
                sampling: SamplingConfig, rng: np.random.Generator) -> TrackResult:
    """Estimate the camera pose of ``frame``; the map and networks are not modified."""
    prior = state.last_pose
    if len(voxmap) == 0:
        state.last_pose = Pose.identity()
        return TrackResult(Pose.identity(), True, 0.0, 0)

    twist = ad.Param(np.zeros(6), name="track.twist")
    frozen = [voxmap.embeddings, *field_.params()]
    losses = []
    final = math.inf
    for k in range(state.iterations):
        tape = ad.Tape(frozen=frozen)
        rays = sample_pixels(frame, intrinsics, state.rays_per_iter, state.sample_mode, rng)
        res = render_rays(tape, rays, voxmap, field_, frame.timestamp, prior, tape.param(twist), sampling, rng,
                          static_pose_grad=state.static_pose_grad)
        if res.n_renderable == 0:
            final = math.inf
            losses.append(final)
            break
        try:
            breakdown = frame_loss(res, rays, sampling.tr, weights)
        except FloatingPointError:
            final = math.inf
            losses.append(final)
            break
        final = float(breakdown.total.value)
        losses.append(final)
        ad.backward(tape, breakdown.total)
        ad.adam_step([twist], lr=_lr_at(state, k))
        tape.clear()

    optimized = twist_to_pose(prior, twist.value)
    accepted = robustness_gate(final, state)
    pose = optimized if accepted else prior
    state.last_pose = pose
    return TrackResult(pose, accepted, final, len(losses), losses, optimized)
