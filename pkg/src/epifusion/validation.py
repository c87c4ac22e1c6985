"""Input validation helpers shared by the estimators and functional API."""
from __future__ import annotations

import numpy as np

from .exceptions import NonFinite, ShapeMismatch


def check_finite(x, name="input"):
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return x


def check_rays(rays, atol=1e-6) -> np.ndarray:
    """Validate an (L, 3) array of unit vectors."""
    rays = np.asarray(rays, dtype=np.float64)
    if rays.ndim != 2 or rays.shape[1] != 3:
        raise ShapeMismatch(f"expected rays of shape (L, 3), got {rays.shape}")
    check_finite(rays, "rays")
    if np.max(np.abs(np.linalg.norm(rays, axis=1) - 1.0)) > atol:
        raise ValueError("rays must have unit norm")
    return rays


def check_images(images, stride=8) -> np.ndarray:
    """Validate a batch of images shaped (n, C, H, W) with H, W divisible by ``stride``."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeMismatch(f"expected (n, C, H, W) images, got {images.shape}")
    if images.shape[2] % stride or images.shape[3] % stride:
        raise ShapeMismatch(f"image size {images.shape[2:]} not divisible by {stride}")
    return check_finite(images, "images")


def check_same_shape(a, b, what="arrays"):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what} differ in shape: {a.shape} vs {b.shape}")
    return a, b
