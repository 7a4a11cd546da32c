import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dynslam.eval import (
    AssociationError,
    associate,
    ate,
    ate_positions,
    image_metrics,
    metrics_json,
    psnr,
    ssim,
)
from dynslam.geometry import Pose


def _traj(points):
    return [Pose(np.eye(3), np.asarray(p, float)) for p in points]


def _random_path(n=20, seed=0):
    return np.cumsum(np.random.default_rng(seed).normal(0, 0.1, size=(n, 3)), axis=0)


def test_identical_trajectories_have_zero_error():
    pts = _random_path()
    stamps = np.arange(len(pts)) / 30
    res = ate(stamps, _traj(pts), stamps, _traj(pts))
    assert res.rmse < 1e-9 and res.mean < 1e-9 and res.std < 1e-9 and res.pairs == len(pts)


def test_rigid_offset_is_aligned_away():
    pts = _random_path()
    R = Rotation.from_rotvec([0.3, -0.5, 1.1]).as_matrix()
    moved = pts @ R.T + [1.0, -2.0, 0.5]
    res = ate_positions(moved, pts)
    assert res.rmse < 1e-9


def _grid_search_rmse(est, gt, levels=40, steps=5):
    """Coarse-to-fine grid search over rotation vector and translation."""
    centre = np.zeros(6)
    span = np.array([np.pi / 2] * 3 + [1.0] * 3)
    offsets = np.linspace(-1, 1, steps)
    grid = np.stack(np.meshgrid(*[offsets] * 6, indexing="ij"), -1).reshape(-1, 6)
    best = np.inf
    for _ in range(levels):
        cand = centre + grid * span
        R = Rotation.from_rotvec(cand[:, :3]).as_matrix()
        moved = np.einsum("kij,nj->kni", R, est) + cand[:, None, 3:]
        cost = np.mean(np.sum((moved - gt) ** 2, axis=2), axis=1)
        k = int(np.argmin(cost))
        if cost[k] <= best:
            best, centre = cost[k], cand[k]
        span = span * 0.6
    return float(np.sqrt(best))


def test_square_path_with_one_displaced_pose_matches_grid_search():
    side = np.linspace(0, 1, 5)[:-1]
    square = np.concatenate([
        np.stack([side, 0 * side, 0 * side], 1),
        np.stack([1 + 0 * side, side, 0 * side], 1),
        np.stack([1 - side, 1 + 0 * side, 0 * side], 1),
        np.stack([0 * side, 1 - side, 0 * side], 1),
    ])
    est = square.copy()
    est[5] += [0.1, 0.0, 0.0]
    res = ate_positions(est, square)
    oracle = _grid_search_rmse(est, square)
    assert res.rmse == pytest.approx(oracle, abs=1e-6)
    # translation-only alignment is an upper bound, and the error is nonzero
    trans_only = np.sqrt(np.mean(np.sum((est - est.mean(0) + square.mean(0) - square) ** 2, axis=1)))
    assert 0 < res.rmse <= trans_only + 1e-12


def test_too_few_pairs():
    with pytest.raises(AssociationError, match="insufficient association"):
        ate([0.0, 0.1], _traj([[0, 0, 0], [1, 0, 0]]), [0.0, 0.1], _traj([[0, 0, 0], [1, 0, 0]]))
    # timestamps too far apart never associate
    with pytest.raises(AssociationError):
        ate([5.0, 5.1, 5.2], _traj(np.eye(3)), [0.0, 0.1, 0.2], _traj(np.eye(3)))


def test_association_tolerance_is_half_median_period():
    gt = np.array([0.0, 0.1, 0.2, 1.0, 1.1])  # median period 0.1
    assert associate([0.04, 1.16, 0.6], gt) == [(0, 0)]
    assert associate([1.04], gt) == [(0, 3)]
    assert len(associate(gt[:3] + 0.04, gt)) == 3


def test_ate_invariant_under_common_transform():
    rng = np.random.default_rng(1)
    gt = _random_path(30, 2)
    est = gt + rng.normal(0, 0.02, size=gt.shape)
    base = ate_positions(est, gt).rmse
    R = Rotation.from_rotvec([0.7, 0.2, -0.4]).as_matrix()
    t = np.array([3.0, -1.0, 2.0])
    assert abs(ate_positions(est @ R.T + t, gt @ R.T + t).rmse - base) < 1e-9


def test_image_metric_examples():
    rng = np.random.default_rng(0)
    img = rng.random((32, 40, 3))
    m = image_metrics(img, img)
    assert m.mse == 0 and m.psnr == 100.0 and m.ssim == pytest.approx(1.0, abs=1e-12)
    m = image_metrics(np.zeros((8, 8, 3)), np.ones((8, 8, 3)))
    assert m.mse == 1.0 and m.psnr == 0.0
    base = rng.uniform(0, 0.9, size=(16, 16, 3))
    m = image_metrics(base + 0.1, base)
    assert m.mse == pytest.approx(0.01, abs=1e-12)
    assert m.psnr == pytest.approx(20.0, abs=1e-6)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        image_metrics(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    a, b = rng.random((20, 24, 3)), rng.random((20, 24, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1 <= ssim(a, b) <= 1
    assert ssim(a, 1 - a) < 0


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(4)
    img = rng.random((48, 64, 3))
    noise = np.random.default_rng(5).normal(size=img.shape)
    vals = [psnr(img + s * noise, img) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_metrics_json_keys():
    pts = _random_path()
    m = json.loads(metrics_json(ate_positions(pts, pts), image_metrics(np.zeros((4, 4)), np.zeros((4, 4)))))
    assert set(m) == {"ate_rmse", "ate_mean", "ate_std", "mse", "psnr", "ssim"}
