import numpy as np
import pytest

from epifusion.exceptions import FormatError
from epifusion.geometry import project
from epifusion.synthetic import (
    BONE_LENGTHS,
    JOINT_COLORS,
    PARENTS,
    RenderConfig,
    animate_skeleton,
    bone_lengths,
    generate_dataset,
    make_rig,
    read_dataset,
    render_heatmaps,
    render_view,
    sample_occlusion,
    standard_rig,
    write_dataset,
)


@pytest.fixture(scope="module")
def small(rig):
    return generate_dataset(rig, 24, seed=5, config=RenderConfig(occlude_fraction=0.5), frames_per_sequence=10)


def test_skeleton_bone_lengths_constant():
    j = animate_skeleton(200, seed=1)
    expected = [b for b, p in zip(BONE_LENGTHS, PARENTS) if p >= 0]
    np.testing.assert_allclose(bone_lengths(j), np.broadcast_to(expected, (200, 7)), rtol=1e-12)


def test_skeleton_motion_is_smooth():
    j = animate_skeleton(300, seed=2)
    step = np.linalg.norm(np.diff(j, axis=0), axis=-1)
    assert step.max() < 120.0
    assert np.ptp(j[:, 6], axis=0).max() > 50.0


def test_make_rig_looks_at_origin():
    rig = make_rig(4, jitter=0.0)
    for cam in rig.cameras:
        np.testing.assert_allclose(project(cam, np.zeros(3)), cam.K[:2, 2], atol=1e-9)


def test_rig_pairs():
    assert standard_rig(0).pairs() == [(0, 1)]
    assert make_rig(4).pairs() == [(0, 1), (1, 2), (2, 3), (3, 0)]


def test_heatmap_peak_is_one_at_quantized_location():
    hm = render_heatmaps(np.array([[41.5, 21.5], [63.0, 64.2]]), (128, 128), 2.0)
    assert hm.shape == (2, 32, 32)
    # (41.5 - 1.5) / 4 = 10, (21.5 - 1.5) / 4 = 5
    assert hm[0, 5, 10] == 1.0
    assert hm[0].max() == 1.0
    assert hm[1].max() == pytest.approx(1.0)
    r, c = np.unravel_index(np.argmax(hm[1]), hm[1].shape)
    assert (r, c) == (round((64.2 - 1.5) / 4), round((63.0 - 1.5) / 4))


def test_render_noiseless_argmax_per_channel():
    j2d = np.array([[30.0, 40.0], [90.0, 100.0], [60.0, 20.0]])
    img = render_view(j2d, np.ones(3, bool), (128, 128), 3.0, 0.0)
    for c in range(3):
        r, col = np.unravel_index(np.argmax(img[c]), img[c].shape)
        assert (col, r) == tuple(j2d[c].astype(int))
        assert JOINT_COLORS[c, c] == 1.0


def test_occluded_blob_removed_exactly():
    rng = np.random.default_rng(0)
    j2d = rng.uniform(10, 110, size=(8, 2))
    vis = np.ones(8, bool)
    vis[3] = False
    a = render_view(j2d, vis, (128, 128), 3.0, 0.0)
    b = render_view(np.delete(j2d, 3, 0), np.ones(7, bool), (128, 128), 3.0, 0.0)
    # joint 3 removed; the remaining joints keep their colors
    keep = [i for i in range(8) if i != 3]
    from epifusion.synthetic import gaussian_image

    c = gaussian_image(j2d[keep], 3.0, 128, 128, JOINT_COLORS[keep])
    np.testing.assert_array_equal(a, c)
    assert a.shape == b.shape


def test_occlusion_hides_in_exactly_one_view():
    vis = sample_occlusion(2000, 2, 8, RenderConfig(), np.random.default_rng(0))
    hidden = ~vis
    assert not np.any(hidden.all(axis=1))
    per_frame = hidden.any(axis=(1, 2))
    assert 0.22 < per_frame.mean() < 0.28
    counts = hidden.sum(axis=(1, 2))
    assert set(np.unique(counts)) == {0, 2}
    views = hidden.any(axis=2).sum(axis=1)
    assert views.max() == 1


def test_occlusion_needs_two_views():
    with pytest.raises(ValueError):
        RenderConfig().validate(1, 8)


def test_dataset_fields(small, rig):
    assert len(small) == 24
    assert small.images.shape == (24, 2, 3, 128, 128) and small.images.dtype == np.float32
    assert small.heatmaps.shape == (24, 2, 8, 32, 32)
    for v, cam in enumerate(rig.cameras):
        np.testing.assert_allclose(small.joints2d[:, v], project(cam, small.joints3d), atol=1e-9)
    np.testing.assert_array_equal(small.sequence, np.repeat([0, 1, 2], [10, 10, 4]))
    np.testing.assert_array_equal(small.frame_id[:12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1])
    # occluded joints still supervised
    f, v, j = np.argwhere(~small.visible)[0]
    assert small.heatmaps[f, v, j].max() == pytest.approx(1.0)


def test_dataset_deterministic(rig):
    a = generate_dataset(rig, 6, seed=9)
    b = generate_dataset(rig, 6, seed=9)
    c = generate_dataset(rig, 6, seed=10)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.visible, b.visible)
    assert not np.array_equal(a.joints3d, c.joints3d)


def test_dataset_round_trip(tmp_path, small):
    write_dataset(tmp_path / "ds", small)
    back = read_dataset(tmp_path / "ds")
    for name in ("joints3d", "joints2d", "visible", "sequence", "frame_id", "images", "heatmaps"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small, name))
    assert back.rig.cameras == small.rig.cameras
    assert back.render == small.render


def test_dataset_rejects_corruption(tmp_path, small):
    write_dataset(tmp_path / "ds", small)
    poses = tmp_path / "ds" / "poses.bin"
    raw = bytearray(poses.read_bytes())
    raw[-1] ^= 0xFF
    poses.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "ds")
    poses.write_bytes(b"POSES v9\n" + bytes(raw[9:]))
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "ds")
    poses.write_bytes(bytes(raw[:40]))
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "ds")


def test_missing_view_file(tmp_path, small):
    write_dataset(tmp_path / "ds", small)
    next((tmp_path / "ds" / "views").glob("*.img")).unlink()
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "ds")
