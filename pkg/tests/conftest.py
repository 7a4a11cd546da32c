"""Shared fixtures: small synthetic scenes, a finite-difference oracle and a
single-keyframe map fitted once per session."""

from __future__ import annotations

import numpy as np
import pytest

from dynslam import autodiff as ad
from dynslam import dataio, mapper
from dynslam.config import Config
from dynslam.fields import NeuralField
from dynslam.geometry import Pose
from dynslam.voxmap import VoxelMap

# criterion lines collected by test_acceptance.py and echoed in the summary
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])


def numeric_grad(loss_fn, param: ad.Param, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = loss_fn()
        flat[i] = old - eps
        lo = loss_fn()
        flat[i] = old
        out.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def static_scene():
    return dataio.SyntheticScene()


@pytest.fixture(scope="session")
def first_frame(static_scene):
    seq = dataio.generate_synthetic(static_scene, 1)
    return seq.frames[0], seq.intrinsics


class FittedMap:
    def __init__(self, voxmap, field, frame, intrinsics, depth_l1_at_200):
        self.voxmap = voxmap
        self.field = field
        self.frame = frame
        self.intrinsics = intrinsics
        self.depth_l1_at_200 = depth_l1_at_200


@pytest.fixture(scope="session")
def fitted_map(first_frame):
    """The first static frame as the only keyframe: 200 default mapping
    iterations (depth error recorded), then 300 more with 2048 rays so the
    map is converged enough for tracking precision tests."""
    from dynslam.render import render_image

    frame, K = first_frame
    cfg = Config()
    vm = VoxelMap(cfg.voxel_size, cfg.embedding_dim)
    field = NeuralField(cfg.embedding_dim, cfg.hidden, cfg.time_freqs, seed=0)
    rng = np.random.default_rng(0)
    vm.allocate_from_depth(frame, K, Pose.identity(), cfg.tr, rng)
    db = mapper.KeyframeDB(cfg.gap, cfg.n_targets)
    db.maybe_insert(frame, Pose.identity())
    mapper.map_round([db.keyframes[0]], K, vm, field, cfg.mapping(), cfg.weights(), cfg.sampling(), rng,
                     iterations=200)
    _, depth = render_image(vm, field, K, Pose.identity(), 0.0, cfg.sampling())
    ok = frame.depth > 0
    l1 = float(np.mean(np.abs(depth[ok] - frame.depth[ok])))
    fine = cfg.mapping()
    fine.rays_per_keyframe = 2048
    mapper.map_round([db.keyframes[0]], K, vm, field, fine, cfg.weights(), cfg.sampling(), rng, iterations=300)
    return FittedMap(vm, field, frame, K, l1)
