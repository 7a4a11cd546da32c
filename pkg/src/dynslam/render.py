"""Ray sampling, SDF-to-weight conversion and colour/depth compositing.

Depth along a ray is measured as distance along the unit direction (range),
not as camera z.  Ground-truth z-depth is converted on sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataio import Frame, Intrinsics, pixel_directions
from .geometry import Pose, transform_points

TRACKING = "tracking"
MAPPING = "mapping"
STATIC = "static"


class EmptyFrameError(ValueError):
    pass


@dataclass
class RayBatch:
    """A set of camera rays from one frame (camera-frame unit directions)."""

    pixels: np.ndarray  # (R, 2) as (v, u)
    directions: np.ndarray  # (R, 3) unit, camera frame
    z_scale: np.ndarray  # (R,) range / z-depth ratio for each direction
    gt_color: np.ndarray  # (R, 3)
    gt_depth: np.ndarray  # (R,) range in metres, 0 = invalid
    in_dynamic_mask: np.ndarray  # (R,) bool

    def __len__(self):
        return len(self.directions)

    def world(self, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
        """Ray origins and unit directions in world coordinates."""
        return np.broadcast_to(pose.translation, self.directions.shape), self.directions @ pose.rotation.T


def rays_for_pixels(frame: Frame, intrinsics: Intrinsics, vs: np.ndarray, us: np.ndarray) -> RayBatch:
    d = pixel_directions(intrinsics, us, vs)
    norm = np.linalg.norm(d, axis=1)
    return RayBatch(
        pixels=np.stack([vs, us], axis=1),
        directions=d / norm[:, None],
        z_scale=norm,
        gt_color=frame.color[vs, us].astype(np.float64),
        gt_depth=frame.depth[vs, us] * norm,
        in_dynamic_mask=frame.mask[vs, us].copy(),
    )


def sample_pixels(
    frame: Frame,
    intrinsics: Intrinsics,
    count: int,
    mode: str = TRACKING,
    rng: np.random.Generator | None = None,
    dynamic_fraction: float = 0.5,
) -> RayBatch:
    """Draw ``count`` rays (with replacement) from valid-depth pixels.

    Tracking draws uniformly.  Mapping draws ``dynamic_fraction`` of the rays
    from the dynamic mask when it is nonempty and the rest from the
    remaining pixels.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    valid = frame.depth > 0
    flat_valid = np.flatnonzero(valid)
    if len(flat_valid) == 0:
        raise EmptyFrameError("empty frame: no valid depth pixels")
    if mode == TRACKING:
        picks = flat_valid[rng.integers(0, len(flat_valid), size=count)]
    elif mode == STATIC:
        pool = np.flatnonzero(valid & ~frame.mask)
        if len(pool) == 0:
            raise EmptyFrameError("no valid static pixels")
        picks = pool[rng.integers(0, len(pool), size=count)]
    elif mode == MAPPING:
        dyn = np.flatnonzero(valid & frame.mask)
        static = np.flatnonzero(valid & ~frame.mask)
        if len(dyn) == 0:
            n_dyn = 0
        elif len(static) == 0:
            n_dyn = count
        else:
            n_dyn = int(round(dynamic_fraction * count))
        picks = np.concatenate([
            dyn[rng.integers(0, len(dyn), size=n_dyn)] if n_dyn else np.zeros(0, dtype=np.int64),
            static[rng.integers(0, len(static), size=count - n_dyn)] if count - n_dyn else np.zeros(0, dtype=np.int64),
        ])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    vs, us = np.unravel_index(picks, frame.depth.shape)
    return rays_for_pixels(frame, intrinsics, vs, us)


def sample_along_rays(
    gt_depth: np.ndarray,
    n_uniform: int,
    n_surface: int,
    tr: float,
    near: float,
    far: float,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified depths per ray, sorted ascending.

    Returns ``(depths, valid)`` of shape (R, n_uniform + n_surface); surface
    samples of rays without a valid ``gt_depth`` are flagged invalid.
    """
    rng = rng if rng is not None else np.random.default_rng()
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    R = len(gt_depth)
    parts, valid = [], []
    if n_uniform:
        edges = np.linspace(near, far, n_uniform + 1)
        u = edges[:-1] + (edges[1:] - edges[:-1]) * rng.random((R, n_uniform))
        parts.append(u)
        valid.append(np.ones((R, n_uniform), dtype=bool))
    if n_surface:
        has = gt_depth > 0
        steps = (np.arange(n_surface) + rng.random((R, n_surface))) / n_surface
        s = gt_depth[:, None] - tr + 2.0 * tr * steps
        s = np.where(has[:, None], s, np.inf)
        parts.append(s)
        valid.append(np.repeat(has[:, None], n_surface, axis=1))
    depths = np.concatenate(parts, axis=1)
    valid = np.concatenate(valid, axis=1)
    order = np.argsort(depths, axis=1, kind="stable")
    depths = np.take_along_axis(depths, order, axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    return np.where(valid, depths, 0.0), valid


def sdf_to_weight(s, tr: float):
    """sigmoid(s/tr) * sigmoid(-s/tr); accepts arrays or tape Vars."""
    if isinstance(s, ad.Var):
        x = s * (1.0 / tr)
        return ad.sigmoid(x) * ad.sigmoid(-x)
    x = np.asarray(s, dtype=np.float64) / tr
    sig = ad._sigmoid
    return sig(x) * sig(-x)


def composite(weights: ad.Var, colors: ad.Var, depths: np.ndarray, ray_ids: np.ndarray, n_rays: int, min_weight: float = 1e-12):
    """Weight-normalized colour and depth per ray.

    Returns ``(C, D, renderable)`` where C and D only hold renderable rays
    (those with covered samples and total weight >= ``min_weight``).
    """
    tape = weights.tape
    w_sum = ad.segment_sum(weights, ray_ids, n_rays)
    wc = ad.segment_sum(colors * ad.reshape(weights, (-1, 1)), ray_ids, n_rays)
    wd = ad.segment_sum(weights * tape.const(depths), ray_ids, n_rays)
    renderable = w_sum.value >= min_weight
    keep = np.flatnonzero(renderable)
    w_k = ad.take_rows(w_sum, keep)
    C = ad.take_rows(wc, keep) / ad.reshape(w_k, (-1, 1))
    D = ad.take_rows(wd, keep) / w_k
    return C, D, renderable


@dataclass
class RenderResult:
    color: ad.Var  # (K, 3) renderable rays only
    depth: ad.Var  # (K,)
    renderable: np.ndarray  # (R,) bool
    sdf: ad.Var  # (M,) covered samples
    offset: ad.Var  # (M, N)
    sample_depth: np.ndarray  # (M,)
    sample_ray: np.ndarray  # (M,) index into the batch
    n_samples: int  # before coverage filtering

    @property
    def n_renderable(self) -> int:
        return int(self.renderable.sum())


@dataclass
class SamplingConfig:
    n_uniform: int = 8
    n_surface: int = 8
    tr: float = 0.1
    near: float = 0.1
    far: float = 8.0


def render_rays(
    tape: ad.Tape,
    rays: RayBatch,
    voxmap,
    field,
    t: float,
    base_pose: Pose,
    twist: ad.Var | None = None,
    sampling: SamplingConfig | None = None,
    rng: np.random.Generator | None = None,
    depths: np.ndarray | None = None,
    valid: np.ndarray | None = None,
    static_pose_grad: bool = False,
) -> RenderResult:
    """Differentiable forward pass for one batch of rays from one frame.

    The pose is ``twist_to_pose(base_pose, twist)``; pass ``twist=None`` for
    a fixed pose.  Uncovered samples are dropped.  With ``static_pose_grad``
    the twist receives gradient only through rays outside the dynamic mask;
    the moving object is left for the deformation net to explain.
    """
    sampling = sampling or SamplingConfig()
    if depths is None:
        depths, valid = sample_along_rays(
            rays.gt_depth, sampling.n_uniform, sampling.n_surface, sampling.tr, sampling.near, sampling.far, rng
        )
    elif valid is None:
        valid = np.ones_like(depths, dtype=bool)
    R, S = depths.shape
    pts_cam = (rays.directions[:, None, :] * depths[..., None]).reshape(-1, 3)
    ray_ids = np.repeat(np.arange(R), S)
    valid = valid.reshape(-1)

    if twist is None:
        world_np = base_pose.apply(pts_cam)
        rows, covered = voxmap.corner_rows(world_np)
        keep = np.flatnonzero(covered & valid)
        positions = tape.const(world_np[keep])
    else:
        world = transform_points(twist, base_pose, pts_cam)
        rows, covered = voxmap.corner_rows(world.value)
        keep = np.flatnonzero(covered & valid)
        positions = ad.take_rows(world, keep)
        if static_pose_grad:
            dyn = rays.in_dynamic_mask[ray_ids[keep]]
            if np.any(dyn):
                gate = (~dyn).astype(np.float64)[:, None]
                positions = positions * gate + tape.const(positions.value * (1.0 - gate))

    sample_depth = depths.reshape(-1)[keep]
    sample_ray = ray_ids[keep]
    table = tape.param(voxmap.embeddings)
    e = voxmap.trilerp(tape, positions, table, rows[keep])
    out = field.regress(tape, e, t)
    w = sdf_to_weight(out.sdf, sampling.tr)
    C, D, renderable = composite(w, out.color, sample_depth, sample_ray, R)
    return RenderResult(C, D, renderable, out.sdf, out.offset, sample_depth, sample_ray, R * S)


def first_crossing_depth(voxmap, field, intrinsics: Intrinsics, pose: Pose, t: float,
                         near: float, far: float, n_steps: int = 192) -> np.ndarray:
    """z-depth of the first +/- SDF crossing along every pixel ray (0 where none)."""
    H, W = intrinsics.height, intrinsics.width
    vs, us = np.mgrid[0:H, 0:W]
    d = pixel_directions(intrinsics, us.ravel(), vs.ravel())
    norm = np.linalg.norm(d, axis=1)
    dirs = d / norm[:, None]
    steps = np.linspace(near, far, n_steps)
    pts = pose.apply((dirs[:, None, :] * steps[None, :, None]).reshape(-1, 3))
    emb, covered = voxmap.interpolate(pts)
    sdf = np.full(len(pts), np.nan)
    if np.any(covered):
        sdf[covered] = field.evaluate(emb[covered], t)[1]
    sdf = sdf.reshape(-1, n_steps)
    a, b = sdf[:, :-1], sdf[:, 1:]
    with np.errstate(invalid="ignore"):
        cross = (a > 0) & (b <= 0)
    has = cross.any(axis=1)
    k = np.argmax(cross, axis=1)
    rows = np.arange(len(sdf))
    sa, sb = a[rows, k], b[rows, k]
    frac = np.where(has, sa / np.where(has, sa - sb, 1.0), 0.0)
    rng_hit = steps[k] + frac * (steps[1] - steps[0])
    return np.where(has, rng_hit / norm, 0.0).reshape(H, W)


def render_image(voxmap, field, intrinsics: Intrinsics, pose: Pose, t: float,
                 sampling: SamplingConfig | None = None, guide_depth: np.ndarray | None = None,
                 seed: int = 0, chunk: int = 4096):
    """Render full colour and z-depth images without gradients.

    Rays are sampled as in training around ``guide_depth`` (z-depth).  When
    no guide is given, the first zero crossing of the field is used and only
    truncation-band samples are drawn.  Unrenderable pixels get depth 0.
    """
    sampling = sampling or SamplingConfig()
    if guide_depth is None:
        guide_depth = first_crossing_depth(voxmap, field, intrinsics, pose, t, sampling.near, sampling.far)
        n_uniform = 0
    else:
        n_uniform = sampling.n_uniform
    H, W = intrinsics.height, intrinsics.width
    vs, us = np.mgrid[0:H, 0:W]
    vs, us = vs.ravel(), us.ravel()
    d = pixel_directions(intrinsics, us, vs)
    norm = np.linalg.norm(d, axis=1)
    dirs = d / norm[:, None]
    guide = guide_depth.ravel() * norm
    color = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    rng = np.random.default_rng(seed)
    for s in range(0, H * W, chunk):
        sl = slice(s, min(s + chunk, H * W))
        n = sl.stop - sl.start
        depths, valid = sample_along_rays(guide[sl], n_uniform, sampling.n_surface, sampling.tr,
                                          sampling.near, sampling.far, rng)
        rays = RayBatch(np.zeros((n, 2), int), dirs[sl], norm[sl], np.zeros((n, 3)), guide[sl], np.zeros(n, bool))
        tape = ad.Tape()
        res = render_rays(tape, rays, voxmap, field, t, pose, sampling=sampling, depths=depths, valid=valid)
        idx = np.flatnonzero(res.renderable) + s
        color[idx] = res.color.value
        depth[idx] = res.depth.value / norm[idx]
        tape.clear()
    return color.reshape(H, W, 3), depth.reshape(H, W)
