import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynslam import dataio
from dynslam.dataio import DatasetError, SyntheticScene, backproject, project


def test_empty_directory_is_missing_calibration(tmp_path):
    with pytest.raises(DatasetError, match="missing calibration"):
        dataio.load_sequence(tmp_path)


def test_timestamps_are_normalized():
    assert np.allclose(dataio.normalize_timestamps([10.0, 10.5, 11.0]), [0.0, 0.5, 1.0])
    assert np.array_equal(dataio.normalize_timestamps([3.0]), [0.0])


def test_save_load_round_trip_is_pixel_identical(tmp_path):
    scene = SyntheticScene(object_kind="box")
    seq = dataio.generate_synthetic(scene, 3, out_dir=tmp_path)
    back = dataio.load_sequence(tmp_path)
    assert back.intrinsics == seq.intrinsics
    for a, b in zip(seq.frames, back.frames):
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.mask, b.mask)
        assert a.timestamp == b.timestamp and a.index == b.index
    assert [f.timestamp for f in back.frames] == [0.0, 0.5, 1.0]
    assert len(back.groundtruth) == 3 and len(back.object_trajectory) == 3
    for p, q in zip(seq.groundtruth, back.groundtruth):
        assert np.allclose(p.matrix(), q.matrix(), atol=1e-8)


def test_frames_are_sorted_by_timestamp(tmp_path):
    dataio.generate_synthetic(SyntheticScene(), 3, out_dir=tmp_path)
    (tmp_path / "times.txt").write_text("0 0.2\n1 0.0\n2 0.1\n")
    seq = dataio.load_sequence(tmp_path)
    assert [f.raw_timestamp for f in seq.frames] == [0.0, 0.1, 0.2]


def test_orphan_frames_are_listed(tmp_path):
    dataio.generate_synthetic(SyntheticScene(), 2, out_dir=tmp_path)
    (tmp_path / "mask" / "000001.png").unlink()
    with pytest.raises(DatasetError, match="000001"):
        dataio.load_sequence(tmp_path)


def test_unreadable_image_names_file(tmp_path):
    dataio.generate_synthetic(SyntheticScene(), 2, out_dir=tmp_path)
    (tmp_path / "depth" / "000000.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="000000.png"):
        dataio.load_sequence(tmp_path)


def test_downsampling_halves_resolution(tmp_path):
    dataio.generate_synthetic(SyntheticScene(), 2, out_dir=tmp_path)
    seq = dataio.load_sequence(tmp_path, downsample=True)
    assert seq.frames[0].depth.shape == (24, 32)
    assert (seq.intrinsics.width, seq.intrinsics.height) == (32, 24)


def test_wall_depth_closed_form():
    # big room whose far wall sits 2 m in front of a still camera
    scene = SyntheticScene(room_min=(-5, -5, -1), room_max=(5, 5, 2), camera_end=(0, 0, 0), yaw_end_deg=0.0)
    color, depth, mask, cam, _ = dataio.render_scene(scene, 0.0)
    K = scene.intrinsics
    assert np.allclose(depth, 2.0, atol=1e-12)
    vs, us = np.mgrid[0 : K.height, 0 : K.width]
    d = dataio.pixel_directions(K, us.ravel(), vs.ravel())
    cos_angle = 1.0 / np.linalg.norm(d, axis=1)
    ranges = np.linalg.norm(backproject(depth, K), axis=1)
    assert np.allclose(ranges, 2.0 / cos_angle, atol=1e-12)
    assert not mask.any()


def test_object_outside_every_frustum_gives_empty_masks():
    scene = SyntheticScene(object_kind="box", object_start=(0, 0, -0.8), object_end=(0.2, 0, -0.8))
    seq = dataio.generate_synthetic(scene, 4)
    assert not any(f.mask.any() for f in seq.frames)


def test_mask_is_exactly_the_object_pixels():
    scene = SyntheticScene(object_kind="sphere")
    _, depth, mask, cam, obj = dataio.render_scene(scene, 0.5)
    pts = cam.apply(backproject(depth, scene.intrinsics))
    dist = np.linalg.norm(pts - obj.translation, axis=1)
    on_sphere = np.abs(dist - scene.object_size / 2) < 1e-9
    assert mask.any() and np.array_equal(mask.ravel(), on_sphere)


def _surface_distance(points, scene, centre):
    lo, hi = np.asarray(scene.room_min), np.asarray(scene.room_max)
    room = np.minimum(np.abs(points - lo), np.abs(hi - points)).min(axis=1)
    q = np.abs(points - centre) - scene.object_size / 2
    box = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
    return np.minimum(room, np.abs(box))


def test_multi_view_consistency():
    # object held still, camera translating and turning: surface points of
    # both views lie on the same analytic geometry in world space
    scene = SyntheticScene(object_kind="box", object_start=(0.2, 0.1, 1.8), object_end=(0.2, 0.1, 1.8), yaw_end_deg=10.0)
    K = scene.intrinsics
    for s in (0.0, 1.0):
        _, depth, mask, cam, obj = dataio.render_scene(scene, s)
        world = cam.apply(backproject(depth, K))
        assert mask.any()
        assert np.max(_surface_distance(world, scene, obj.translation)) < 1e-6


def test_multi_view_points_agree_at_shared_pixels():
    # pure translation along x by a whole number of pixels at a fronto-parallel
    # wall maps pixel centres onto pixel centres: points must agree to 1e-6 m
    K = SyntheticScene().intrinsics
    shift = 4 * 2.0 / K.fx  # four pixels at 2 m
    scene = SyntheticScene(room_min=(-5, -5, -1), room_max=(5, 5, 2), camera_end=(shift, 0, 0), yaw_end_deg=0.0)
    _, d0, _, c0, _ = dataio.render_scene(scene, 0.0)
    _, d1, _, c1, _ = dataio.render_scene(scene, 1.0)
    p0 = c0.apply(backproject(d0, K, (np.arange(K.height).repeat(K.width - 4), np.tile(np.arange(4, K.width), K.height))))
    p1 = c1.apply(backproject(d1, K, (np.arange(K.height).repeat(K.width - 4), np.tile(np.arange(K.width - 4), K.height))))
    assert np.max(np.abs(p0 - p1)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2), st.floats(0.1, 10))
def test_backproject_inverts_project(xy, z):
    K = SyntheticScene().intrinsics
    p = np.array([[xy[0], xy[1], z]])
    uv, zz = project(p, K)
    back = dataio.pixel_directions(K, uv[:, 0], uv[:, 1]) * zz[:, None]
    assert np.allclose(back, p, atol=1e-9)


def test_zero_frames_is_an_error():
    with pytest.raises(ValueError):
        dataio.generate_synthetic(SyntheticScene(), 0)


def test_loaded_depth_nonnegative_invalid_exact_zero(tmp_path):
    seq = dataio.generate_synthetic(SyntheticScene(), 1)
    seq.frames[0].depth[:5, :5] = 0.0
    dataio.save_sequence(seq, tmp_path)
    back = dataio.load_sequence(tmp_path)
    assert np.all(back.frames[0].depth >= 0) and np.all(back.frames[0].depth[:5, :5] == 0.0)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        dataio.Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        dataio.Intrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)
