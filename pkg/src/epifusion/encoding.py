"""Positional encodings: fixed 2D sine tables and the geometry encoding.

The geometry encoding maps each token's unit viewing ray through a shared
``d x 3`` matrix ``W_e``. ``W_e`` is fit so that cross-view dot products of
encodings match the epipolar field between the two token grids.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .epipolar import FeatureGrid, field_target
from .exceptions import FormatError, InvalidDim, ShapeMismatch
from .geometry import CameraParams, pixel_directions
from .validation import check_rays


def sine_pe(H: int, W: int, d: int) -> np.ndarray:
    """2D sine positional encoding table of shape (H * W, d).

    The first ``d / 2`` channels encode the column and the last ``d / 2`` the
    row. Within each half, even channels are ``sin(x * w_j)`` and odd channels
    ``cos(x * w_j)`` with ``w_j = 10000 ** (-2j / (d / 2))``.
    """
    if d % 4 != 0 or d <= 0:
        raise InvalidDim(f"embedding dim must be a positive multiple of 4, got {d}")
    half = d // 2
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(half // 2) / half)

    def encode(x):
        out = np.empty((x.shape[0], half))
        out[:, 0::2] = np.sin(x[:, None] * freqs)
        out[:, 1::2] = np.cos(x[:, None] * freqs)
        return out

    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    return np.concatenate([encode(cols.ravel()), encode(rows.ravel())], axis=1)


def grid_rays(cam: CameraParams, grid: FeatureGrid) -> np.ndarray:
    """Unit world rays through the feature-grid pixel centers, shape (L, 3)."""
    return pixel_directions(cam, grid.centers())


def init_we(d: int, random_state=None) -> np.ndarray:
    """Uniform fan-in initialization of ``W_e`` in ``[-sqrt(1/3), sqrt(1/3)]``."""
    rng = check_random_state(random_state)
    a = np.sqrt(1.0 / 3.0)
    return rng.uniform(-a, a, size=(d, 3))


def geo_pe(W_e, rays) -> np.ndarray:
    """Geometry encoding ``E[n] = W_e @ rays[n]``, shape (L, d)."""
    W_e = np.asarray(W_e, dtype=np.float64)
    rays = np.asarray(rays, dtype=np.float64)
    if W_e.ndim != 2 or W_e.shape[1] != 3 or rays.shape[-1] != 3:
        raise ShapeMismatch("expected W_e (d, 3) and rays (L, 3)")
    return rays @ W_e.T


def lpos_loss(E1, E2, target) -> float:
    """Mean squared gap between cross-view encoding dot products and the field."""
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if E1.shape[1] != E2.shape[1] or target.shape != (E1.shape[0], E2.shape[0]):
        raise ShapeMismatch("encodings and target disagree")
    resid = E1 @ E2.T - target
    return float(np.mean(resid**2))


def lpos_gradient(W_e, rays1, rays2, target) -> np.ndarray:
    """Analytic gradient of ``lpos_loss(geo_pe(W_e, rays1), geo_pe(W_e, rays2), target)`` w.r.t. ``W_e``."""
    W_e = np.asarray(W_e, dtype=np.float64)
    E1, E2 = geo_pe(W_e, rays1), geo_pe(W_e, rays2)
    target = np.asarray(target, dtype=np.float64)
    G = 2.0 * (E1 @ E2.T - target) / target.size
    return (G @ E2).T @ np.asarray(rays1) + (G.T @ E1).T @ np.asarray(rays2)


def symmetric_lpos(W_e, rays1, rays2, target_12, target_21) -> tuple[float, np.ndarray]:
    """Average of both query directions; returns ``(loss, grad)``."""
    E1, E2 = geo_pe(W_e, rays1), geo_pe(W_e, rays2)
    loss = 0.5 * (lpos_loss(E1, E2, target_12) + lpos_loss(E2, E1, target_21))
    grad = 0.5 * (lpos_gradient(W_e, rays1, rays2, target_12) + lpos_gradient(W_e, rays2, rays1, target_21))
    return loss, grad


def save_we(path, W_e) -> None:
    """Write ``W_e`` as ``GPE v1 d`` header plus d x 3 float32 LE, row-major."""
    W_e = np.asarray(W_e)
    with open(path, "wb") as f:
        f.write(f"GPE v1 {W_e.shape[0]}\n".encode("ascii"))
        f.write(np.ascontiguousarray(W_e, dtype="<f4").tobytes())


def load_we(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    parts = raw[:end].decode("ascii", errors="replace").split() if end >= 0 else []
    if len(parts) != 3 or parts[0] != "GPE":
        raise FormatError("not a GPE checkpoint")
    if parts[1] != "v1":
        raise FormatError(f"unsupported GPE version {parts[1]}")
    d = int(parts[2])
    payload = raw[end + 1:]
    if len(payload) != d * 3 * 4:
        raise FormatError("GPE payload size does not match header")
    return np.frombuffer(payload, dtype="<f4").reshape(d, 3).astype(np.float64)


class GeometryEncoder(TransformerMixin, BaseEstimator):
    """Fit ``W_e`` to a camera pair with the epipolar-field matching loss alone.

    Parameters
    ----------
    d : int, default=32
        Encoding dimension.
    gamma : float, default=10.0
        Sharpness of the epipolar field target.
    n_steps : int, default=2000
        Adam iterations.
    learning_rate : float, default=1e-2
    symmetric : bool, default=True
        Average the loss over both query directions.
    grid : FeatureGrid or None
        Token grid; defaults to 16 x 16 with stride 8.
    random_state : int, RandomState or None

    Attributes
    ----------
    W_e_ : ndarray, shape (d, 3)
    loss_curve_ : list of float
    target_ : ndarray, shape (L, L)
        Field from view 1 queries to view 2 tokens.
    """

    def __init__(
        self,
        d=32,
        gamma=10.0,
        n_steps=2000,
        learning_rate=1e-2,
        symmetric=True,
        grid=None,
        random_state=None,
    ):
        self.d = d
        self.gamma = gamma
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.symmetric = symmetric
        self.grid = grid
        self.random_state = random_state

    def _grid(self):
        return self.grid if self.grid is not None else FeatureGrid(16, 16)

    def fit(self, X, y=None):
        """Fit on ``X = (cam1, cam2)``."""
        cam1, cam2 = X
        grid = self._grid()
        rays1, rays2 = grid_rays(cam1, grid), grid_rays(cam2, grid)
        t12 = field_target(cam1, cam2, grid, self.gamma)
        t21 = field_target(cam2, cam1, grid, self.gamma)
        W = init_we(self.d, self.random_state)
        m = np.zeros_like(W)
        v = np.zeros_like(W)
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.loss_curve_ = []
        for step in range(1, self.n_steps + 1):
            if self.symmetric:
                loss, g = symmetric_lpos(W, rays1, rays2, t12, t21)
            else:
                loss = lpos_loss(geo_pe(W, rays1), geo_pe(W, rays2), t12)
                g = lpos_gradient(W, rays1, rays2, t12)
            self.loss_curve_.append(loss)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            W = W - self.learning_rate * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        self.W_e_ = W
        self.target_ = t12
        self.rays_ = (rays1, rays2)
        return self

    def transform(self, X):
        """Encode unit rays of shape (L, 3)."""
        check_is_fitted(self, "W_e_")
        return geo_pe(self.W_e_, check_rays(X))

    def cross_scores(self, rays1=None, rays2=None) -> np.ndarray:
        """Dot products ``E1 @ E2.T`` between the two grids' encodings."""
        check_is_fitted(self, "W_e_")
        if rays1 is None:
            rays1, rays2 = self.rays_
        return self.transform(rays1) @ self.transform(rays2).T

    def score(self, X, y=None):
        """Negative mean absolute error against the field of camera pair ``X``."""
        cam1, cam2 = X
        grid = self._grid()
        target = field_target(cam1, cam2, grid, self.gamma)
        pred = self.cross_scores(grid_rays(cam1, grid), grid_rays(cam2, grid))
        return -float(np.mean(np.abs(pred - target)))

