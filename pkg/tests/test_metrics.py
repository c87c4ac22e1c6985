import numpy as np
import pytest

from epifusion.exceptions import NonFinite, ShapeMismatch
from epifusion.metrics import decode_heatmap, head_thresholds, jdr, mpjpe, per_joint_error
from epifusion.synthetic import render_heatmaps


def test_decode_quarter_shift():
    hm = np.zeros((1, 8, 8))
    hm[0, 3, 4] = 1.0
    hm[0, 3, 5] = 0.5
    hm[0, 2, 4] = 0.2
    joints, conf = decode_heatmap(hm)
    # x: cell 4 plus a quarter toward 5; y: cell 3 a quarter toward row 2
    np.testing.assert_allclose(joints[0], [4 * 4.25 + 1.5, 4 * 2.75 + 1.5])
    assert conf[0] == 1.0


def test_decode_ties_first_in_row_major():
    hm = np.zeros((1, 4, 4))
    hm[0, 1, 2] = hm[0, 2, 0] = 1.0
    joints, _ = decode_heatmap(hm)
    np.testing.assert_allclose(joints[0], [2 * 4 + 1.5, 1 * 4 + 1.5])


def test_decode_border_has_no_shift():
    hm = np.zeros((1, 4, 4))
    hm[0, 0, 3] = 1.0
    hm[0, 0, 2] = 0.9
    joints, _ = decode_heatmap(hm)
    np.testing.assert_allclose(joints[0], [3 * 4 + 1.5, 1.5])


@pytest.mark.parametrize("seed", range(5))
def test_decode_gaussian_exact_on_ground_truth(seed):
    rng = np.random.default_rng(seed)
    j2d = rng.uniform(12, 116, size=(8, 2))
    hm = render_heatmaps(j2d, (128, 128), 2.0)
    joints, _ = decode_heatmap(hm, "gaussian")
    np.testing.assert_allclose(joints, j2d, atol=1e-9)
    quarter, _ = decode_heatmap(hm, "quarter")
    assert np.max(np.abs(quarter - j2d)) <= 4 * 0.5 + 1e-9


def test_decode_rejects_nonfinite_and_method():
    hm = np.zeros((1, 4, 4))
    with pytest.raises(ValueError):
        decode_heatmap(hm, "median")
    hm[0, 0, 0] = np.nan
    with pytest.raises(NonFinite):
        decode_heatmap(hm)


def test_jdr_counts_within_threshold():
    gt = np.zeros((2, 2, 2))
    pred = np.array([[[1.0, 0.0], [3.0, 4.0]], [[0.0, 0.5], [10.0, 0.0]]])
    assert jdr(pred, gt, 5.0) == 75.0
    assert jdr(pred, gt, np.array([[1.0], [0.5]])) == 50.0
    with pytest.raises(ValueError):
        jdr(pred, gt, 0.0)
    with pytest.raises(ShapeMismatch):
        jdr(pred[:1], gt, 1.0)


def test_mpjpe_values():
    gt = np.zeros((3, 2, 3))
    pred = gt.copy()
    pred[0, 0] = [3, 4, 0]
    assert mpjpe(pred, gt) == pytest.approx(5 / 6)
    np.testing.assert_allclose(per_joint_error(pred, gt)[0], [5, 0])
    assert mpjpe(gt, gt) == 0.0


def test_head_thresholds(cams):
    joints = np.zeros((1, 8, 3))
    joints[0, 1] = [0, 0, -250]
    th = head_thresholds(joints, cams)
    for v, cam in enumerate(cams):
        depth = (cam.R @ joints[0, 0] + cam.t)[2]
        assert th[0, v] == pytest.approx(0.5 * cam.K[0, 0] * 250 / depth)


def test_decode_symmetric_peak_is_cell_center():
    hm = np.zeros((1, 32, 32))
    hm[0, 5, 7] = 1.0
    joints, _ = decode_heatmap(hm)
    np.testing.assert_allclose(joints[0], [4 * 7 + 1.5, 4 * 5 + 1.5])


def test_decode_quarter_error_below_half_cell():
    rng = np.random.default_rng(0)
    j2d = rng.uniform(8, 120, size=(100, 2))
    worst = 0.0
    for p in j2d:
        hm = render_heatmaps(p[None], (128, 128), 2.0)
        worst = max(worst, np.max(np.abs(decode_heatmap(hm)[0][0] - p)))
    assert worst < 2.0


def test_jdr_examples():
    gt = np.zeros((4, 2))
    assert jdr(gt, gt, 1.0) == 100.0
    far = gt + [1.0 + 1e-9, 0.0]
    assert jdr(far, gt, 1.0) == 0.0
    split = np.array([[0.5, 0], [0, 0.5], [2.0, 0], [0, 2.0]])
    assert jdr(split, gt, 1.0) == 50.0


def test_jdr_monotone_in_threshold():
    rng = np.random.default_rng(1)
    pred, gt = rng.normal(size=(50, 8, 2)), rng.normal(size=(50, 8, 2))
    values = [jdr(pred, gt, t) for t in np.linspace(3.0, 0.1, 30)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_mpjpe_offset_and_permutation():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(5, 8, 3))
    assert mpjpe(gt + [0, 0, 10.0], gt) == pytest.approx(10.0)
    pred = gt + rng.normal(size=gt.shape)
    perm = rng.permutation(8)
    assert mpjpe(pred[:, perm], gt[:, perm]) == pytest.approx(mpjpe(pred, gt), abs=1e-12)
    loop = np.mean([np.sqrt(sum((pred[f, j, a] - gt[f, j, a]) ** 2 for a in range(3))) for f in range(5) for j in range(8)])
    assert mpjpe(pred, gt) == pytest.approx(loop, abs=1e-9)
