"""Calibrated pinhole cameras, ray back-projection and linear triangulation.

World units are millimeters and pixel coordinates are continuous with the
center of the top-left pixel at (0, 0). Cameras follow the world-to-camera
convention ``x_cam = R @ X + t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import DegenerateBaseline, DegenerateGeometry, DepthNonPositive

MIN_DEPTH = 1e-6


@dataclass(frozen=True, eq=False)
class CameraParams:
    """Intrinsics and extrinsics of one ideal pinhole camera.

    Parameters
    ----------
    K : array-like, shape (3, 3)
        Upper-triangular intrinsics with ``K[2, 2] == 1``.
    R : array-like, shape (3, 3)
        World-to-camera rotation.
    t : array-like, shape (3,)
        World-to-camera translation in millimeters.
    width, height : int
        Image size in pixels. Only used for frustum checks and file I/O.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int = 128
    height: int = 128
    _K_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        if K.shape != (3, 3) or R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("expected K (3, 3), R (3, 3) and t (3,)")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("camera parameters must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("K must be upper triangular with K[2, 2] == 1")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("R must be a proper rotation")
        for name, value in (("K", K), ("R", R), ("t", t)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        K_inv = np.linalg.inv(K)
        K_inv.setflags(write=False)
        object.__setattr__(self, "_K_inv", K_inv)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K_inv(self) -> np.ndarray:
        return self._K_inv

    @property
    def projection_matrix(self) -> np.ndarray:
        """The 3x4 matrix ``K [R | t]``."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(K=d["K"], R=d["R"], t=d["t"], width=d["width"], height=d["height"])

    def __eq__(self, other):
        if not isinstance(other, CameraParams):
            return NotImplemented
        return (
            np.array_equal(self.K, other.K)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
            and self.width == other.width
            and self.height == other.height
        )

    __hash__ = None


class Ray(NamedTuple):
    """A world-space ray with unit direction."""

    origin: np.ndarray
    dir: np.ndarray


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(R, t)`` for a camera at ``eye`` whose optical axis hits ``target``.

    Image x points right and image y points down, so the camera frame is
    (right, down, forward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise DegenerateGeometry("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


def camera_center(cam: CameraParams) -> np.ndarray:
    """World position of the camera center, ``C = -R^T t``."""
    return -cam.R.T @ cam.t


def to_camera(cam: CameraParams, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ cam.R.T + cam.t


def project(cam: CameraParams, points) -> np.ndarray:
    """Project world points of shape (..., 3) to pixels of shape (..., 2).

    Raises
    ------
    DepthNonPositive
        If any point has camera depth ``<= 1e-6`` mm.
    """
    pc = to_camera(cam, points)
    z = pc[..., 2]
    if np.any(~(z > MIN_DEPTH)):
        raise DepthNonPositive("point at or behind the camera plane")
    x = pc[..., 0] / z
    y = pc[..., 1] / z
    K = cam.K
    u = K[0, 0] * x + K[0, 1] * y + K[0, 2]
    v = K[1, 1] * y + K[1, 2]
    return np.stack([u, v], axis=-1)


def pixel_directions(cam: CameraParams, pixels) -> np.ndarray:
    """Unit world-frame viewing directions for pixels of shape (..., 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    homog = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    d = homog @ cam.K_inv.T @ cam.R
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(cam: CameraParams, px) -> Ray:
    """Back-project one pixel to the world ray through the camera center."""
    return Ray(camera_center(cam), pixel_directions(cam, px))


def triangulate_dlt(observations: Sequence[tuple[CameraParams, np.ndarray]]) -> np.ndarray:
    """Linear (DLT) triangulation of one point from two or more views.

    Pixels are mapped through ``K^-1`` and the world is rescaled before the
    SVD so the homogeneous system is well conditioned.

    Raises
    ------
    DegenerateGeometry
        If fewer than two views are given or the null space is not unique.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("triangulation needs at least two views")
    scale = max(float(np.linalg.norm(camera_center(cam))) for cam, _ in observations)
    scale = scale if scale > 0 else 1.0
    D = np.diag([scale, scale, scale, 1.0])
    rows = []
    for cam, px in observations:
        x, y, w = cam.K_inv @ np.array([px[0], px[1], 1.0])
        x, y = x / w, y / w
        P = np.hstack([cam.R, cam.t[:, None]]) @ D
        for r in (x * P[2] - P[0], y * P[2] - P[1]):
            rows.append(r / np.linalg.norm(r))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] - s[-1] <= 1e-12 * s[0]:
        raise DegenerateGeometry("rank-deficient triangulation system")
    X = D @ vt[-1]
    if abs(X[3]) < 1e-300:
        raise DegenerateGeometry("triangulated point at infinity")
    return X[:3] / X[3]


def triangulate_points(cams: Sequence[CameraParams], pixels: np.ndarray) -> np.ndarray:
    """Triangulate many points; ``pixels`` has shape (n_views, n_points, 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return np.array(
        [triangulate_dlt([(c, pixels[i, j]) for i, c in enumerate(cams)]) for j in range(pixels.shape[1])]
    ).reshape(pixels.shape[1], 3)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def fundamental_matrix(cam1: CameraParams, cam2: CameraParams) -> np.ndarray:
    """Fundamental matrix with ``x2^T F x1 = 0``, scaled to unit Frobenius norm."""
    if np.linalg.norm(camera_center(cam1) - camera_center(cam2)) < 1e-9:
        raise DegenerateBaseline("camera centers coincide")
    R = cam2.R @ cam1.R.T
    t = cam2.t - R @ cam1.t
    F = cam2.K_inv.T @ skew(t) @ R @ cam1.K_inv
    return F / np.linalg.norm(F)


def epipolar_line(F: np.ndarray, px) -> np.ndarray:
    """Line ``(a, b, c)`` in view 2 with ``a^2 + b^2 = 1`` for a view-1 pixel."""
    line = F @ np.array([px[0], px[1], 1.0])
    return line / np.hypot(line[0], line[1])


def load_cameras(path) -> list[CameraParams]:
    """Read a camera JSON file holding one camera object or a list of them."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "cameras" in data:
        data = data["cameras"]
    if isinstance(data, dict):
        data = [data]
    return [CameraParams.from_dict(d) for d in data]


def save_cameras(path, cams: Sequence[CameraParams]) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cams]}, indent=2))
