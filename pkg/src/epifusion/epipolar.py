"""Soft epipolar correspondence fields between two calibrated views.

For a query pixel in view 1, every pixel of view 2 is scored by how close its
viewing ray lies to the epipolar plane spanned by the two camera centers and
the query ray. The raw score ``1 - |n . u|`` is raised to a sharpness
exponent ``gamma``; large ``gamma`` collapses the field onto the epipolar
line.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DegenerateBaseline, DegenerateRay, FormatError
from .geometry import CameraParams, Ray, camera_center, pixel_directions

RAY_EPS = 1e-9


@dataclass(frozen=True)
class FeatureGrid:
    """Maps feature-map cells to image pixel centers: ``pixel = offset + stride * index``."""

    H: int
    W: int
    stride: float = 8.0
    offset: float = 3.5

    @property
    def L(self) -> int:
        return self.H * self.W

    def centers(self) -> np.ndarray:
        """Pixel centers of all cells, row-major, shape (H * W, 2) as (u, v)."""
        rows, cols = np.meshgrid(np.arange(self.H), np.arange(self.W), indexing="ij")
        u = self.offset + self.stride * cols
        v = self.offset + self.stride * rows
        return np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)

    def cell_of(self, px) -> tuple[float, float]:
        """Continuous (row, col) of a pixel in cell units."""
        return ((px[1] - self.offset) / self.stride, (px[0] - self.offset) / self.stride)

    @classmethod
    def for_image(cls, height: int, width: int, stride: int = 8) -> "FeatureGrid":
        return cls(height // stride, width // stride, float(stride), (stride - 1) / 2.0)


@dataclass(frozen=True, eq=False)
class EpipolarFieldGrid:
    query: np.ndarray
    scores: np.ndarray
    gamma: float
    degenerate: bool = False


def plane_normal(query_ray: Ray, c1, c2) -> np.ndarray:
    """Unit normal of the plane through both camera centers and the query ray."""
    baseline = np.asarray(c2, dtype=np.float64) - np.asarray(c1, dtype=np.float64)
    norm = np.linalg.norm(baseline)
    if norm <= 1e-9:
        raise DegenerateBaseline("camera centers coincide")
    n = np.cross(baseline / norm, np.asarray(query_ray.dir, dtype=np.float64))
    length = np.linalg.norm(n)
    if length < RAY_EPS:
        raise DegenerateRay("query ray is parallel to the baseline")
    return n / length


def correspondence_score(normal, ref_ray_dir) -> np.ndarray:
    """Raw score ``1 - |normal . dir|`` clipped to [0, 1]; broadcasts over leading axes."""
    dot = np.sum(np.asarray(normal) * np.asarray(ref_ray_dir), axis=-1)
    return np.clip(1.0 - np.abs(dot), 0.0, 1.0)


def _plane_normals(cam1: CameraParams, cam2: CameraParams, queries: np.ndarray):
    c1, c2 = camera_center(cam1), camera_center(cam2)
    baseline = c2 - c1
    norm = np.linalg.norm(baseline)
    if norm <= 1e-9:
        raise DegenerateBaseline("camera centers coincide")
    n = np.cross(baseline / norm, pixel_directions(cam1, queries))
    length = np.linalg.norm(n, axis=-1)
    degenerate = length < RAY_EPS
    n = n / np.where(degenerate, 1.0, length)[:, None]
    return n, degenerate


def field_matrix(cam1: CameraParams, cam2: CameraParams, queries, targets, gamma: float):
    """Scores for many queries at once.

    Returns
    -------
    scores : ndarray, shape (n_queries, n_targets)
    degenerate : ndarray of bool, shape (n_queries,)
        Rows whose query ray is parallel to the baseline; those rows hold the
        uniform value ``1 / n_targets``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    normals, degenerate = _plane_normals(cam1, cam2, queries)
    dirs = pixel_directions(cam2, targets)
    raw = np.clip(1.0 - np.abs(normals @ dirs.T), 0.0, 1.0)
    scores = raw if gamma == 1 else raw**gamma
    scores[degenerate] = 1.0 / targets.shape[0]
    return scores, degenerate


def epipolar_field(
    cam1: CameraParams, cam2: CameraParams, query, grid: FeatureGrid, gamma: float = 10.0
) -> EpipolarFieldGrid:
    """Epipolar field of one view-1 query pixel over the view-2 feature grid."""
    query = np.asarray(query, dtype=np.float64)
    scores, degenerate = field_matrix(cam1, cam2, query, grid.centers(), gamma)
    return EpipolarFieldGrid(
        query=query,
        scores=scores.reshape(grid.H, grid.W),
        gamma=float(gamma),
        degenerate=bool(degenerate[0]),
    )


def field_target(cam1: CameraParams, cam2: CameraParams, grid: FeatureGrid, gamma: float) -> np.ndarray:
    """L x L field between every view-1 token and every view-2 token."""
    centers = grid.centers()
    return field_matrix(cam1, cam2, centers, centers, gamma)[0]


def write_field(path, grid: np.ndarray, gamma: float, query) -> None:
    """Write an ``EPIFIELD v1`` dump: one text header line then float32 LE values."""
    grid = np.asarray(grid)
    H, W = grid.shape
    header = f"EPIFIELD v1 {H} {W} {float(gamma)!r} {float(query[0])!r} {float(query[1])!r}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_field(path) -> tuple[np.ndarray, float, np.ndarray]:
    """Read an ``EPIFIELD v1`` dump; returns ``(grid, gamma, query)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise FormatError("missing EPIFIELD header")
    parts = raw[:end].decode("ascii", errors="replace").split()
    if len(parts) != 7 or parts[0] != "EPIFIELD":
        raise FormatError("not an EPIFIELD file")
    if parts[1] != "v1":
        raise FormatError(f"unsupported EPIFIELD version {parts[1]}")
    try:
        H, W = int(parts[2]), int(parts[3])
        gamma, qu, qv = float(parts[4]), float(parts[5]), float(parts[6])
    except ValueError as exc:
        raise FormatError("malformed EPIFIELD header") from exc
    payload = raw[end + 1:]
    if len(payload) != 4 * H * W:
        raise FormatError("EPIFIELD payload size does not match header")
    grid = np.frombuffer(payload, dtype="<f4").reshape(H, W).copy()
    return grid, gamma, np.array([qu, qv])


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1] (``round(value * 255)``)."""
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape
    data = np.clip(np.rint(np.clip(grid, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(data.tobytes())


__all__ = [
    "FeatureGrid",
    "EpipolarFieldGrid",
    "plane_normal",
    "correspondence_score",
    "field_matrix",
    "field_target",
    "epipolar_field",
    "write_field",
    "read_field",
    "write_pgm",
]
