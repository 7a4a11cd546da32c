"""Trajectory error after rigid alignment, and image quality metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Pose

PSNR_CAP = 100.0


class AssociationError(ValueError):
    pass


@dataclass
class ATE:
    rmse: float
    mean: float
    std: float
    pairs: int


def associate(est_stamps, gt_stamps, tolerance: float | None = None) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching.

    The default tolerance is half the median ground-truth frame period.
    Each ground-truth stamp is used at most once.
    """
    est_stamps = np.asarray(est_stamps, dtype=np.float64)
    gt_stamps = np.asarray(gt_stamps, dtype=np.float64)
    if tolerance is None:
        period = np.median(np.diff(gt_stamps)) if len(gt_stamps) > 1 else 0.0
        tolerance = 0.5 * period if period > 0 else 1e-9
    pairs, used = [], set()
    for i, ts in enumerate(est_stamps):
        if len(gt_stamps) == 0:
            break
        j = int(np.argmin(np.abs(gt_stamps - ts)))
        if abs(gt_stamps[j] - ts) <= tolerance and j not in used:
            used.add(j)
            pairs.append((i, j))
    return pairs


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimizing sum |R source_i + t - target_i|^2 (no scale)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_t - R @ mu_s


def ate_positions(est: np.ndarray, gt: np.ndarray) -> ATE:
    est, gt = np.asarray(est, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if len(est) < 3:
        raise AssociationError(f"insufficient association: {len(est)} pose pairs, need at least 3")
    R, t = align_rigid(est, gt)
    err = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return ATE(float(np.sqrt(np.mean(err**2))), float(err.mean()), float(err.std()), len(err))


def ate(est_stamps, est_poses: list[Pose], gt_stamps, gt_poses: list[Pose], tolerance: float | None = None) -> ATE:
    """Absolute trajectory error on camera positions after SE(3) alignment."""
    pairs = associate(est_stamps, gt_stamps, tolerance)
    if len(pairs) < 3:
        raise AssociationError(f"insufficient association: {len(pairs)} pose pairs, need at least 3")
    est = np.array([est_poses[i].translation for i, _ in pairs])
    gt = np.array([gt_poses[j].translation for _, j in pairs])
    return ate_positions(est, gt)


# images -------------------------------------------------------------------

def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    m = mse(a, b)
    if m < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / m)))


def ssim(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    # truncate=3.5 with sigma 1.5 gives radius 5, i.e. an 11x11 window
    blur = lambda x: gaussian_filter(x, sigma, truncate=3.5, mode="reflect")  # noqa: E731
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class ImageMetrics:
    mse: float
    psnr: float
    ssim: float


def image_metrics(rendered, reference) -> ImageMetrics:
    return ImageMetrics(mse(rendered, reference), psnr(rendered, reference), ssim(rendered, reference))


def metrics_json(traj: ATE | None = None, images: ImageMetrics | None = None) -> str:
    out = {}
    if traj is not None:
        out.update(ate_rmse=traj.rmse, ate_mean=traj.mean, ate_std=traj.std)
    if images is not None:
        out.update(asdict(images))
    return json.dumps(out, indent=2) + "\n"
