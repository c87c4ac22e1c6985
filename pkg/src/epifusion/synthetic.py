"""Synthetic multi-camera skeleton scenes.

A small articulated skeleton moves smoothly near the world origin and is
observed by calibrated cameras on a circle. Each view is rendered as
Gaussian blobs (one color per joint) plus noise; ground-truth heatmaps are
Gaussians at the true 2D joint positions. Occlusion deletes blobs of a few
joints in exactly one view of a frame while keeping them in the targets.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .geometry import CameraParams, intrinsics, look_at, project, to_camera

JOINT_NAMES = ("head", "neck", "r_elbow", "r_wrist", "l_elbow", "l_wrist", "hip", "knee")
PARENTS = (1, 6, 1, 2, 1, 4, -1, 6)
BONE_LENGTHS = (250.0, 500.0, 300.0, 250.0, 300.0, 250.0, 0.0, 450.0)
# Joints are generated parent-first in this order.
KINEMATIC_ORDER = (6, 1, 0, 2, 3, 4, 5, 7)

# Per-joint channel weights of the input blobs.
JOINT_COLORS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
        [0.6, 0.6, 0.6],
        [1.0, 0.5, 0.0],
    ]
)

# (azimuth, elevation) centers and amplitudes in degrees, body frame:
# x forward, y left, z up.
_BONE_ANGLES = {
    0: ((0.0, 80.0), (20.0, 8.0)),
    1: ((0.0, 82.0), (30.0, 6.0)),
    2: ((-90.0, -20.0), (45.0, 45.0)),
    3: ((-80.0, -10.0), (70.0, 60.0)),
    4: ((90.0, -20.0), (45.0, 45.0)),
    5: ((80.0, -10.0), (70.0, 60.0)),
    7: ((0.0, -70.0), (40.0, 15.0)),
}

HM_STRIDE = 4
HM_OFFSET = 1.5


@dataclass
class Rig:
    cameras: list
    height: int = 128
    width: int = 128

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def pairs(self) -> list[tuple[int, int]]:
        """Neighboring view pairs used for two-view fusion."""
        n = self.n_views
        if n == 2:
            return [(0, 1)]
        return [(i, (i + 1) % n) for i in range(n)]


@dataclass
class RenderConfig:
    sigma_img: float = 3.0
    sigma_hm: float = 2.0
    noise: float = 0.05
    occlude_fraction: float = 0.25
    occlude_joints: int = 2

    def validate(self, n_views: int, k: int) -> None:
        if self.occlude_joints and n_views < 2:
            raise ValueError("occlusion needs at least two views so every joint stays visible somewhere")
        if not 0 <= self.occlude_fraction <= 1:
            raise ValueError("occlude_fraction must be in [0, 1]")
        if not 0 <= self.occlude_joints <= k:
            raise ValueError("occlude_joints out of range")


@dataclass
class SceneDataset:
    """Frames of a scene seen by every camera of a rig.

    Arrays are indexed (frame, view, ...). ``images`` has shape
    (F, V, 3, H, W) and ``heatmaps`` (F, V, k, H/4, W/4).
    """

    rig: Rig
    joints3d: np.ndarray
    joints2d: np.ndarray
    visible: np.ndarray
    images: np.ndarray
    heatmaps: np.ndarray
    sequence: np.ndarray
    frame_id: np.ndarray
    render: RenderConfig = field(default_factory=RenderConfig)

    def __len__(self) -> int:
        return self.joints3d.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joints3d.shape[1]

    def subset(self, idx) -> "SceneDataset":
        idx = np.asarray(idx)
        return SceneDataset(
            self.rig,
            self.joints3d[idx],
            self.joints2d[idx],
            self.visible[idx],
            self.images[idx],
            self.heatmaps[idx],
            self.sequence[idx],
            self.frame_id[idx],
            self.render,
        )


def make_rig(
    n_cams=2,
    radius=3000.0,
    height=500.0,
    image_size=(128, 128),
    focal=170.0,
    seed=0,
    spread=None,
    jitter=0.02,
) -> Rig:
    """Cameras on a circle around the origin, all looking at it.

    ``spread`` is the angle between consecutive cameras and defaults to
    ``2 * pi / n_cams`` (uniform spacing). Positions are perturbed by at most
    ``jitter * radius`` using ``seed``.
    """
    if n_cams < 2:
        raise ValueError("a rig needs at least two cameras")
    rng = np.random.default_rng(seed)
    spread = 2 * np.pi / n_cams if spread is None else spread
    H, W = image_size
    K = intrinsics(focal, focal, (W - 1) / 2.0, (H - 1) / 2.0)
    cams = []
    for i in range(n_cams):
        a = i * spread
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        if jitter:
            offset = rng.normal(size=3)
            offset *= jitter * radius * rng.uniform() / np.linalg.norm(offset)
            eye = eye + offset
        R, t = look_at(eye, (0.0, 0.0, 0.0))
        cams.append(CameraParams(K, R, t, width=W, height=H))
    return Rig(cams, H, W)


def standard_rig(seed=0) -> Rig:
    """The two-camera rig used by tests and experiments (cameras 90 degrees apart)."""
    return make_rig(2, spread=np.pi / 2, seed=seed)


def _direction(az, el):
    az, el = np.radians(az), np.radians(el)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def animate_skeleton(n_frames: int, seed=0) -> np.ndarray:
    """Smooth skeleton motion; returns joints of shape (n_frames, 8, 3) in mm."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames, dtype=np.float64)

    def wave(amp, center=0.0):
        w = rng.uniform(0.02, 0.06)
        phase = rng.uniform(0, 2 * np.pi)
        return center + amp * np.sin(w * t + phase)

    root = np.stack([wave(200.0), wave(200.0), wave(30.0, -150.0)], axis=-1)
    heading = wave(1.2, rng.uniform(-np.pi, np.pi))
    c, s = np.cos(heading), np.sin(heading)
    joints = np.zeros((n_frames, len(JOINT_NAMES), 3))
    joints[:, 6] = root
    for j in KINEMATIC_ORDER[1:]:
        (az0, el0), (aza, ela) = _BONE_ANGLES[j]
        d = _direction(wave(aza, az0), wave(ela, el0))
        world = np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=-1)
        joints[:, j] = joints[:, PARENTS[j]] + BONE_LENGTHS[j] * world
    return joints


def bone_lengths(joints3d: np.ndarray) -> np.ndarray:
    """Lengths of all non-root bones, shape (..., 7)."""
    idx = [j for j in range(len(PARENTS)) if PARENTS[j] >= 0]
    par = [PARENTS[j] for j in idx]
    return np.linalg.norm(joints3d[..., idx, :] - joints3d[..., par, :], axis=-1)


def gaussian_image(centers, sigma, height, width, weights=None) -> np.ndarray:
    """Sum of isotropic Gaussians with unit peak; ``weights`` (n, C) spreads them over channels."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    gx = np.exp(-((xs[None, :] - centers[:, :1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ys[None, :] - centers[:, 1:]) ** 2) / (2 * sigma**2))
    if weights is None:
        return np.einsum("ny,nx->nyx", gy, gx)
    return np.einsum("nc,ny,nx->cyx", np.asarray(weights, dtype=np.float64), gy, gx)


def render_heatmaps(joints2d, image_size, sigma_hm=2.0) -> np.ndarray:
    """Ground-truth heatmaps of shape (k, H/4, W/4).

    Each channel is a Gaussian centered on the joint's continuous heatmap
    position, rescaled so its largest sample is exactly 1 when the joint
    falls inside the map.
    """
    H, W = image_size
    Hh, Wh = H // HM_STRIDE, W // HM_STRIDE
    centers = (np.asarray(joints2d, dtype=np.float64) - HM_OFFSET) / HM_STRIDE
    hm = gaussian_image(centers, sigma_hm, Hh, Wh)
    inside = (
        (centers[:, 0] >= -0.5) & (centers[:, 0] < Wh - 0.5) & (centers[:, 1] >= -0.5) & (centers[:, 1] < Hh - 0.5)
    )
    peak = hm.reshape(len(centers), -1).max(axis=1)
    scale = np.where(inside & (peak > 0), 1.0 / np.where(peak > 0, peak, 1.0), 1.0)
    return hm * scale[:, None, None]


def render_view(joints2d, visible, image_size, sigma_img=3.0, noise=0.0, rng=None) -> np.ndarray:
    """Blob image of shape (3, H, W) from visible joints plus Gaussian noise."""
    H, W = image_size
    visible = np.asarray(visible, dtype=bool)
    joints2d = np.asarray(joints2d, dtype=np.float64)
    img = gaussian_image(joints2d[visible], sigma_img, H, W, JOINT_COLORS[: len(joints2d)][visible])
    if noise:
        img = img + noise * rng.standard_normal(img.shape)
    return img


def sample_occlusion(n_frames, n_views, k, config: RenderConfig, rng) -> np.ndarray:
    """Visibility flags (F, V, k); occluded joints are hidden in exactly one view."""
    config.validate(n_views, k)
    visible = np.ones((n_frames, n_views, k), dtype=bool)
    for f in range(n_frames):
        if config.occlude_joints and rng.uniform() < config.occlude_fraction:
            view = rng.integers(n_views)
            joints = rng.choice(k, size=config.occlude_joints, replace=False)
            visible[f, view, joints] = False
    return visible


def render_views(joints3d, rig: Rig, visible, config: RenderConfig, rng):
    """Render all views of one frame; returns ``(joints2d, images, heatmaps)``."""
    size = (rig.height, rig.width)
    j2d = np.stack([project(cam, joints3d) for cam in rig.cameras])
    images = np.stack(
        [render_view(j2d[v], visible[v], size, config.sigma_img, config.noise, rng) for v in range(rig.n_views)]
    )
    heatmaps = np.stack([render_heatmaps(j2d[v], size, config.sigma_hm) for v in range(rig.n_views)])
    return j2d, images, heatmaps


def in_frustum(rig: Rig, joints3d, margin=2.0) -> bool:
    for cam in rig.cameras:
        if np.any(to_camera(cam, joints3d)[..., 2] <= 1e-6):
            return False
        px = project(cam, joints3d)
        if np.any(px < margin) or np.any(px[..., 0] > rig.width - 1 - margin) or np.any(
            px[..., 1] > rig.height - 1 - margin
        ):
            return False
    return True


def generate_dataset(
    rig: Rig,
    n_frames: int,
    seed=0,
    config: RenderConfig | None = None,
    frames_per_sequence: int = 100,
) -> SceneDataset:
    """Generate ``n_frames`` frames split into sequences of ``frames_per_sequence``."""
    config = config or RenderConfig()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seq_seeds = ss.spawn((n_frames + frames_per_sequence - 1) // frames_per_sequence + 1)
    render_rng = np.random.default_rng(seq_seeds[-1])
    chunks = []
    remaining = n_frames
    for s in range(len(seq_seeds) - 1):
        n = min(frames_per_sequence, remaining)
        chunks.append((s, animate_skeleton(n, np.random.default_rng(seq_seeds[s]))))
        remaining -= n
    joints3d = np.concatenate([c for _, c in chunks])
    sequence = np.concatenate([np.full(len(c), s, dtype=np.int32) for s, c in chunks])
    frame_id = np.concatenate([np.arange(len(c), dtype=np.int32) for _, c in chunks])
    if not in_frustum(rig, joints3d):
        raise ValueError("skeleton leaves a camera frustum; increase radius or reduce focal")
    k = joints3d.shape[1]
    visible = sample_occlusion(n_frames, rig.n_views, k, config, render_rng)
    Hh, Wh = rig.height // HM_STRIDE, rig.width // HM_STRIDE
    j2d = np.empty((n_frames, rig.n_views, k, 2))
    images = np.empty((n_frames, rig.n_views, 3, rig.height, rig.width), dtype=np.float32)
    heatmaps = np.empty((n_frames, rig.n_views, k, Hh, Wh), dtype=np.float32)
    for f in range(n_frames):
        j2d[f], images[f], heatmaps[f] = render_views(joints3d[f], rig, visible[f], config, render_rng)
    return SceneDataset(rig, joints3d, j2d, visible, images, heatmaps, sequence, frame_id, config)


def standard_dataset(n_train=2000, n_test=400, seed=0, n_cams=2):
    """Train/test split on the standard rig with 25% of frames carrying occlusions."""
    rig = standard_rig(seed) if n_cams == 2 else make_rig(n_cams, seed=seed)
    ss = np.random.SeedSequence(seed).spawn(2)
    train = generate_dataset(rig, n_train, ss[0])
    test = generate_dataset(rig, n_test, ss[1])
    return train, test


# ---------------------------------------------------------------------------
# Dataset files

_POSES_MAGIC = b"POSES v1\n"
_IMG_VERSION = "v1"


def _write_array(path, arr: np.ndarray) -> None:
    C, H, W = arr.shape
    with open(path, "wb") as f:
        f.write(f"IMG {_IMG_VERSION} {C} {H} {W}\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    end = raw.find(b"\n")
    parts = raw[:end].decode("ascii", errors="replace").split() if end >= 0 else []
    if len(parts) != 5 or parts[0] != "IMG":
        raise FormatError(f"{path}: not an IMG file")
    if parts[1] != _IMG_VERSION:
        raise FormatError(f"{path}: unsupported IMG version {parts[1]}")
    C, H, W = (int(p) for p in parts[2:])
    payload = raw[end + 1:]
    if len(payload) != 4 * C * H * W:
        raise FormatError(f"{path}: truncated IMG payload")
    return np.frombuffer(payload, dtype="<f4").reshape(C, H, W).copy()


def write_dataset(path, ds: SceneDataset) -> None:
    """Write ``rig.json``, ``poses.bin`` and per-frame ``views/`` files under ``path``."""
    path = Path(path)
    (path / "views").mkdir(parents=True, exist_ok=True)
    meta = {
        "cameras": [c.to_dict() for c in ds.rig.cameras],
        "image_size": [ds.rig.height, ds.rig.width],
        "render": ds.render.__dict__,
    }
    (path / "rig.json").write_text(json.dumps(meta, indent=2))
    F, V, k = ds.visible.shape
    payload = b"".join(
        [
            np.ascontiguousarray(ds.joints3d, dtype="<f8").tobytes(),
            np.ascontiguousarray(ds.joints2d, dtype="<f8").tobytes(),
            np.ascontiguousarray(ds.visible, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(ds.sequence, dtype="<i4").tobytes(),
            np.ascontiguousarray(ds.frame_id, dtype="<i4").tobytes(),
        ]
    )
    header = np.array([zlib.crc32(payload), F, V, k], dtype="<u4").tobytes()
    (path / "poses.bin").write_bytes(_POSES_MAGIC + header + payload)
    for f in range(F):
        for v in range(V):
            _write_array(path / "views" / f"{f:06d}_{v}.img", ds.images[f, v])
            _write_array(path / "views" / f"{f:06d}_{v}.hm", ds.heatmaps[f, v])


def read_dataset(path) -> SceneDataset:
    """Inverse of :func:`write_dataset`; raises :class:`FormatError` on corrupt input."""
    path = Path(path)
    try:
        meta = json.loads((path / "rig.json").read_text())
        raw = (path / "poses.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset at {path}: {exc}") from exc
    if not raw.startswith(_POSES_MAGIC):
        if raw.startswith(b"POSES"):
            raise FormatError("unsupported poses.bin version")
        raise FormatError("poses.bin: bad magic")
    head = raw[len(_POSES_MAGIC): len(_POSES_MAGIC) + 16]
    if len(head) != 16:
        raise FormatError("poses.bin: truncated header")
    crc, F, V, k = (int(x) for x in np.frombuffer(head, dtype="<u4"))
    payload = raw[len(_POSES_MAGIC) + 16:]
    sizes = [F * k * 3 * 8, F * V * k * 2 * 8, F * V * k, F * 4, F * 4]
    if len(payload) != sum(sizes):
        raise FormatError("poses.bin: payload size mismatch (truncated?)")
    if zlib.crc32(payload) != crc:
        raise FormatError("poses.bin: checksum mismatch")
    offs = np.cumsum([0] + sizes)
    joints3d = np.frombuffer(payload[offs[0]: offs[1]], dtype="<f8").reshape(F, k, 3).copy()
    joints2d = np.frombuffer(payload[offs[1]: offs[2]], dtype="<f8").reshape(F, V, k, 2).copy()
    visible = np.frombuffer(payload[offs[2]: offs[3]], dtype=np.uint8).reshape(F, V, k).astype(bool)
    sequence = np.frombuffer(payload[offs[3]: offs[4]], dtype="<i4").copy()
    frame_id = np.frombuffer(payload[offs[4]: offs[5]], dtype="<i4").copy()
    try:
        cams = [CameraParams.from_dict(c) for c in meta["cameras"]]
        H, W = meta["image_size"]
        render = RenderConfig(**meta.get("render", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"rig.json: {exc}") from exc
    images = np.empty((F, V, 3, H, W), dtype=np.float32)
    heatmaps = np.empty((F, V, k, H // HM_STRIDE, W // HM_STRIDE), dtype=np.float32)
    for f in range(F):
        for v in range(V):
            img = _read_array(path / "views" / f"{f:06d}_{v}.img")
            hm = _read_array(path / "views" / f"{f:06d}_{v}.hm")
            if img.shape != images.shape[2:] or hm.shape != heatmaps.shape[2:]:
                raise FormatError(f"frame {f} view {v}: unexpected array shape")
            images[f, v] = img
            heatmaps[f, v] = hm
    return SceneDataset(Rig(cams, H, W), joints3d, joints2d, visible, images, heatmaps, sequence, frame_id, render)
