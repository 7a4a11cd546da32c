"""RGB-D sequence I/O and a ray-cast synthetic desk scene.

On-disk layout (read by :func:`load_sequence`, written by
:func:`save_sequence` / :func:`generate_synthetic`)::

    calibration.txt      fx fy cx cy W H
    times.txt            <index> <timestamp>   one line per frame
    color/%06d.png       8-bit RGB
    depth/%06d.png       16-bit, depth_scale metres per unit, 0 = invalid
    mask/%06d.png        8-bit, 255 = dynamic object
    groundtruth.txt      TUM rows (optional)
    object_traj.txt      TUM rows of the dynamic object (synthetic only)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Pose, so3_exp

log = logging.getLogger(__name__)

DEFAULT_DEPTH_SCALE = 1.0 / 5000.0


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def downsampled(self, factor: int = 2) -> "Intrinsics":
        # pixel centres sit on integer coordinates, so u' = u / factor
        return Intrinsics(
            self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
            self.width // factor, self.height // factor,
        )


@dataclass
class Frame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) metres, 0 = invalid
    mask: np.ndarray  # (H, W) bool, True = dynamic
    timestamp: float  # normalized to [0, 1]
    index: int
    raw_timestamp: float = 0.0

    def __post_init__(self):
        if not (self.color.shape[:2] == self.depth.shape == self.mask.shape):
            raise ValueError("color, depth and mask must share dimensions")


@dataclass
class Sequence:
    intrinsics: Intrinsics
    frames: list[Frame]
    groundtruth: list[Pose] | None = None
    object_trajectory: list[Pose] | None = None


def pixel_directions(intrinsics: Intrinsics, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z component."""
    x = (np.asarray(us, dtype=np.float64) - intrinsics.cx) / intrinsics.fx
    y = (np.asarray(vs, dtype=np.float64) - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(depth: np.ndarray, intrinsics: Intrinsics, pixels=None) -> np.ndarray:
    """Camera-frame points of valid depth pixels (or of the given (v, u) pixels)."""
    if pixels is None:
        vs, us = np.nonzero(depth > 0)
    else:
        vs, us = pixels
    z = depth[vs, us].astype(np.float64)
    return pixel_directions(intrinsics, us, vs) * z[:, None]


def project(points_cam: np.ndarray, intrinsics: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (u, v) and depth z of camera-frame points."""
    z = points_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * points_cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * points_cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1), z


def normalize_timestamps(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if len(raw) == 0:
        return raw
    span = raw[-1] - raw[0]
    if span <= 0:
        return np.zeros_like(raw)
    return (raw - raw[0]) / span


# TUM trajectories ---------------------------------------------------------

def write_tum(path, timestamps, poses) -> None:
    with open(path, "w") as fh:
        for ts, pose in zip(timestamps, poses):
            fh.write(f"{ts:.6f} " + " ".join(f"{x:.9f}" for x in pose.tum()) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Pose]]:
    stamps, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise DatasetError(f"{path}: malformed TUM row {line!r}")
        stamps.append(vals[0])
        poses.append(Pose.from_tum(vals[1:]))
    return np.array(stamps), poses


# sequence files -----------------------------------------------------------

def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except Exception as exc:  # PIL raises several types
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def load_sequence(
    directory,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
    downsample: bool = False,
) -> Sequence:
    root = Path(directory)
    calib = root / "calibration.txt"
    if not calib.exists():
        raise DatasetError(f"missing calibration in {root}")
    vals = calib.read_text().split()
    if len(vals) != 6:
        raise DatasetError(f"{calib}: expected 'fx fy cx cy W H'")
    fx, fy, cx, cy = map(float, vals[:4])
    intr = Intrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]))

    times_path = root / "times.txt"
    if not times_path.exists():
        raise DatasetError(f"missing times.txt in {root}")
    entries = []
    for line in times_path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            idx, ts = line.split()[:2]
            entries.append((float(ts), int(idx)))
    entries.sort()

    names = {sub: {p.stem for p in (root / sub).glob("*.png")} for sub in ("color", "depth", "mask")}
    wanted = {f"{i:06d}" for _, i in entries}
    sets = [*names.values(), wanted]
    orphans = sorted(n for n in set().union(*sets) if not all(n in s for s in sets))
    if orphans:
        raise DatasetError(f"frame count mismatch across color/depth/mask/times; orphans: {orphans}")

    raw = np.array([ts for ts, _ in entries])
    norm = normalize_timestamps(raw)
    frames = []
    for k, ((ts, idx), t) in enumerate(zip(entries, norm)):
        name = f"{idx:06d}.png"
        color = _read_image(root / "color" / name)[..., :3].astype(np.float32) / 255.0
        depth_raw = _read_image(root / "depth" / name)
        depth = depth_raw.astype(np.float64) * depth_scale
        mask = _read_image(root / "mask" / name)
        mask = (mask[..., 0] if mask.ndim == 3 else mask) > 127
        if downsample:
            color, depth, mask = color[::2, ::2], depth[::2, ::2], mask[::2, ::2]
        frames.append(Frame(color, depth, mask, float(t), k, float(ts)))

    if downsample:
        intr = intr.downsampled(2)

    gt = None
    if (root / "groundtruth.txt").exists():
        _, gt = read_tum(root / "groundtruth.txt")
    obj = None
    if (root / "object_traj.txt").exists():
        _, obj = read_tum(root / "object_traj.txt")
    return Sequence(intr, frames, gt, obj)


def quantize_frame(frame: Frame, depth_scale: float = DEFAULT_DEPTH_SCALE) -> Frame:
    """Round a frame to exactly what the PNG encoding can represent."""
    color = np.round(np.clip(frame.color, 0, 1) * 255).astype(np.uint8).astype(np.float32) / 255.0
    units = np.clip(np.round(frame.depth / depth_scale), 0, 65535).astype(np.uint16)
    return replace(frame, color=color, depth=units.astype(np.float64) * depth_scale)


def save_sequence(seq: Sequence, directory, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    root = Path(directory)
    for sub in ("color", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    k = seq.intrinsics
    (root / "calibration.txt").write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")
    lines = []
    for f in seq.frames:
        name = f"{f.index:06d}.png"
        Image.fromarray(np.round(np.clip(f.color, 0, 1) * 255).astype(np.uint8)).save(root / "color" / name)
        units = np.clip(np.round(f.depth / depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(units).save(root / "depth" / name)
        Image.fromarray((f.mask.astype(np.uint8) * 255)).save(root / "mask" / name)
        lines.append(f"{f.index} {f.raw_timestamp!r}")
    (root / "times.txt").write_text("\n".join(lines) + "\n")
    stamps = [f.raw_timestamp for f in seq.frames]
    if seq.groundtruth is not None:
        write_tum(root / "groundtruth.txt", stamps, seq.groundtruth)
    if seq.object_trajectory is not None:
        write_tum(root / "object_traj.txt", stamps, seq.object_trajectory)


# synthetic scene ----------------------------------------------------------

@dataclass
class SyntheticScene:
    """Axis-aligned room with checker albedo, one moving object and a scripted camera.

    Coordinates follow the camera convention of the first frame: x right,
    y down, z forward.
    """

    room_min: tuple = (-1.6, -1.4, -1.0)
    room_max: tuple = (1.6, 1.0, 3.0)
    checker: float = 0.4
    # dynamic object: "box", "sphere" or None
    object_kind: str | None = None
    object_size: float = 0.4  # box edge or sphere diameter
    object_start: tuple = (-0.5, 0.1, 1.8)
    object_end: tuple = (0.5, 0.1, 1.8)
    # camera path: linear translation plus a yaw sweep
    camera_start: tuple = (0.0, 0.0, 0.0)
    camera_end: tuple = (0.5, 0.0, 0.0)
    yaw_end_deg: float = 5.0
    fps: float = 30.0
    depth_noise_std: float = 0.0
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(48.0, 48.0, 31.5, 23.5, 64, 48))

    def camera_pose(self, s: float) -> Pose:
        t = (1 - s) * np.asarray(self.camera_start, float) + s * np.asarray(self.camera_end, float)
        R = so3_exp(np.array([0.0, np.deg2rad(self.yaw_end_deg) * s, 0.0]))
        return Pose(R, t)

    def object_pose(self, s: float) -> Pose:
        t = (1 - s) * np.asarray(self.object_start, float) + s * np.asarray(self.object_end, float)
        return Pose(np.eye(3), t)


_WALL_COLORS = np.array(
    [
        [[0.85, 0.35, 0.30], [0.55, 0.15, 0.12]],  # -x
        [[0.30, 0.70, 0.40], [0.12, 0.40, 0.18]],  # +x
        [[0.90, 0.90, 0.85], [0.60, 0.60, 0.55]],  # -y ceiling
        [[0.75, 0.60, 0.35], [0.40, 0.28, 0.12]],  # +y floor
        [[0.25, 0.35, 0.80], [0.70, 0.75, 0.95]],  # -z
        [[0.80, 0.80, 0.30], [0.30, 0.45, 0.65]],  # +z back wall
    ]
)
_OBJECT_COLORS = np.array([[0.95, 0.55, 0.10], [0.20, 0.15, 0.10]])


def _checker(points: np.ndarray, axis: np.ndarray, size: float) -> np.ndarray:
    """0/1 checker parity on the two axes orthogonal to each point's face normal."""
    cells = np.floor(points / size).astype(np.int64)
    total = cells.sum(axis=1) - cells[np.arange(len(points)), axis]
    return total & 1


def render_scene(scene: SyntheticScene, s: float, rng: np.random.Generator | None = None):
    """Ray-cast the analytic scene at normalized time ``s``.

    Returns (color, depth, mask, camera pose, object pose).
    """
    K = scene.intrinsics
    cam = scene.camera_pose(s)
    vs, us = np.mgrid[0 : K.height, 0 : K.width]
    d_cam = pixel_directions(K, us.ravel(), vs.ravel())  # z = 1
    d = d_cam @ cam.rotation.T
    o = cam.translation

    lo, hi = np.asarray(scene.room_min, float), np.asarray(scene.room_max, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bound = np.where(d > 0, (hi - o) / d, np.where(d < 0, (lo - o) / d, np.inf))
    room_axis = np.argmin(t_bound, axis=1)
    t_hit = t_bound[np.arange(len(d)), room_axis]
    face = room_axis * 2 + (d[np.arange(len(d)), room_axis] > 0)
    hit = o + t_hit[:, None] * d
    color = _WALL_COLORS[face, _checker(hit, room_axis, scene.checker)]
    mask = np.zeros(len(d), dtype=bool)

    obj_pose = scene.object_pose(s)
    if scene.object_kind is not None:
        c = obj_pose.translation
        half = scene.object_size / 2
        if scene.object_kind == "box":
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (c - half - o) / d
                t2 = (c + half - o) / d
            t_near = np.nanmax(np.minimum(t1, t2), axis=1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=1)
            entry_axis = np.nanargmax(np.minimum(t1, t2), axis=1)
            obj_hit = (t_near <= t_far) & (t_near > 0)
            t_obj = t_near
        elif scene.object_kind == "sphere":
            oc = o - c
            b = d @ oc
            a = np.sum(d * d, axis=1)
            disc = b * b - a * (oc @ oc - half * half)
            with np.errstate(invalid="ignore"):
                t_obj = (-b - np.sqrt(disc)) / a
            obj_hit = (disc >= 0) & (t_obj > 0)
            entry_axis = None
        else:
            raise ValueError(f"unknown object kind {scene.object_kind!r}")
        closer = obj_hit & (t_obj < t_hit)
        if np.any(closer):
            t_hit = np.where(closer, t_obj, t_hit)
            p_local = o + t_obj[closer, None] * d[closer] - c
            if entry_axis is not None:
                parity = _checker(p_local, entry_axis[closer], scene.object_size / 4)
            else:
                parity = (np.floor(p_local[:, 1] / (scene.object_size / 4)).astype(np.int64)) & 1
            color[closer] = _OBJECT_COLORS[parity]
            mask = closer

    # z-depth in the camera frame equals t_hit because d_cam has unit z
    depth = t_hit.copy()
    if scene.depth_noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        depth = depth + rng.normal(0.0, scene.depth_noise_std, size=depth.shape)
    shape = (K.height, K.width)
    return color.reshape(*shape, 3), depth.reshape(shape), mask.reshape(shape), cam, obj_pose


def generate_synthetic(
    scene: SyntheticScene,
    n_frames: int,
    out_dir=None,
    resolution: tuple[int, int] | None = None,
    seed: int = 0,
) -> Sequence:
    """Render ``n_frames`` of the scene (optionally writing them to ``out_dir``).

    The returned frames are quantized exactly as the PNG files store them.
    """
    if n_frames < 1:
        raise ValueError("camera path needs at least one frame")
    if resolution is not None and resolution != (scene.intrinsics.width, scene.intrinsics.height):
        W, H = resolution
        k = scene.intrinsics
        sx, sy = W / k.width, H / k.height
        scene = replace(
            scene,
            intrinsics=Intrinsics(k.fx * sx, k.fy * sy, (k.cx + 0.5) * sx - 0.5, (k.cy + 0.5) * sy - 0.5, W, H),
        )
    rng = np.random.default_rng(seed)
    frames, cams, objs = [], [], []
    raw = np.arange(n_frames) / scene.fps
    norm = normalize_timestamps(raw)
    for i in range(n_frames):
        s = i / (n_frames - 1) if n_frames > 1 else 0.0
        color, depth, mask, cam, obj = render_scene(scene, s, rng)
        frame = quantize_frame(Frame(color.astype(np.float32), depth, mask, float(norm[i]), i, float(raw[i])))
        frames.append(frame)
        cams.append(cam)
        objs.append(obj)
    seq = Sequence(scene.intrinsics, frames, cams, objs if scene.object_kind else None)
    if out_dir is not None:
        save_sequence(seq, out_dir)
    return seq
