"""Heatmap decoding and 2D/3D pose metrics."""
from __future__ import annotations

import numpy as np

from .synthetic import HM_OFFSET, HM_STRIDE
from .validation import check_finite, check_same_shape


def _refine(row, i, method):
    n = row.shape[0]
    if i <= 0 or i >= n - 1:
        return 0.0
    lo, mid, hi = row[i - 1], row[i], row[i + 1]
    if method == "gaussian" and lo > 0 and mid > 0 and hi > 0:
        a, b, c = np.log(lo), np.log(mid), np.log(hi)
        denom = a - 2 * b + c
        if denom < 0:
            return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    return 0.25 * float(np.sign(hi - lo))


def decode_heatmap(hm, method="quarter", stride=HM_STRIDE, offset=HM_OFFSET):
    """Decode (k, Hh, Wh) heatmaps to image-space joints.

    Parameters
    ----------
    hm : ndarray, shape (k, Hh, Wh)
    method : {"quarter", "gaussian"}
        ``"quarter"`` shifts the argmax a quarter cell toward the larger
        axis neighbor. ``"gaussian"`` fits a parabola to the log values
        around the peak and falls back to the quarter shift when the
        neighborhood is not strictly positive and concave.

    Returns
    -------
    joints : ndarray, shape (k, 2)
        (u, v) pixel coordinates.
    confidence : ndarray, shape (k,)
        Peak values.

    Notes
    -----
    Ties resolve to the first maximum in row-major order.
    """
    hm = np.asarray(hm, dtype=np.float64)
    check_finite(hm, "heatmap")
    if method not in ("quarter", "gaussian"):
        raise ValueError(f"unknown decode method {method!r}")
    k, Hh, Wh = hm.shape
    flat = hm.reshape(k, -1)
    idx = np.argmax(flat, axis=1)
    conf = flat[np.arange(k), idx]
    out = np.empty((k, 2))
    for j in range(k):
        r, c = divmod(int(idx[j]), Wh)
        dx = _refine(hm[j, r, :], c, method)
        dy = _refine(hm[j, :, c], r, method)
        out[j] = (stride * (c + dx) + offset, stride * (r + dy) + offset)
    return out, conf


def jdr(pred2d, gt2d, threshold) -> float:
    """Percentage of joints within ``threshold`` pixels of ground truth.

    ``threshold`` may be a scalar or broadcast against ``pred2d.shape[:-1]``.
    """
    pred2d, gt2d = check_same_shape(pred2d, gt2d, "predicted and true joints")
    threshold = np.asarray(threshold, dtype=np.float64)
    if np.any(threshold <= 0):
        raise ValueError("threshold must be positive")
    dist = np.linalg.norm(pred2d - gt2d, axis=-1)
    return float(100.0 * np.mean(dist <= threshold))


def mpjpe(pred3d, gt3d) -> float:
    """Mean per-joint Euclidean error in world units, without any alignment."""
    pred3d, gt3d = check_same_shape(pred3d, gt3d, "predicted and true poses")
    return float(np.mean(np.linalg.norm(pred3d - gt3d, axis=-1)))


def per_joint_error(pred3d, gt3d) -> np.ndarray:
    pred3d, gt3d = check_same_shape(pred3d, gt3d, "predicted and true poses")
    return np.linalg.norm(pred3d - gt3d, axis=-1)


def head_thresholds(joints3d, cams, head=0, neck=1) -> np.ndarray:
    """Per-frame, per-view JDR thresholds in pixels, shape (F, V).

    Half the head-neck bone length, scaled to pixels at the head's depth in
    each view (focal length times length over depth).
    """
    joints3d = np.asarray(joints3d, dtype=np.float64)
    bone = np.linalg.norm(joints3d[:, head] - joints3d[:, neck], axis=-1)
    out = np.empty((joints3d.shape[0], len(cams)))
    for v, cam in enumerate(cams):
        depth = (joints3d[:, head] @ cam.R.T + cam.t)[:, 2]
        focal = 0.5 * (cam.K[0, 0] + cam.K[1, 1])
        out[:, v] = 0.5 * focal * bone / depth
    return out
