"""Training loop, prediction, evaluation reports and attention dumps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .epipolar import FeatureGrid, epipolar_field, field_target, write_field
from .encoding import grid_rays
from .exceptions import NonFinite
from .geometry import triangulate_points
from .metrics import decode_heatmap, head_thresholds, jdr, per_joint_error
from .model import TrainConfig, TransFusionNet, grad_all, total_loss
from .synthetic import JOINT_NAMES, SceneDataset

log = logging.getLogger(__name__)

CSV_SCHEMA = "v1"
EPOCH_COLUMNS = ("schema", "epoch", "lr", "train_loss", "train_mse", "train_lpos", "probe_loss")


class PairCache:
    """Rays and field targets for each fused camera pair of a rig."""

    def __init__(self, rig, config: TrainConfig, dtype=torch.float32):
        self.grid = FeatureGrid.for_image(config.image_size, config.image_size, config.patch)
        self.pairs = rig.pairs()
        self.rays = [torch.tensor(grid_rays(c, self.grid), dtype=dtype) for c in rig.cameras]
        self.targets = {}
        if config.effective_lpos_weight:
            for i, j in self.pairs:
                self.targets[(i, j)] = torch.tensor(field_target(rig.cameras[i], rig.cameras[j], self.grid, config.gamma), dtype=dtype)
                self.targets[(j, i)] = torch.tensor(field_target(rig.cameras[j], rig.cameras[i], self.grid, config.gamma), dtype=dtype)


def _samples(ds: SceneDataset, pairs):
    return [(f, p) for f in range(len(ds)) for p in range(len(pairs))]


def _batch(ds, cache, samples, dtype=torch.float32):
    frames = np.array([f for f, _ in samples])
    pairs = [cache.pairs[p] for _, p in samples]
    i_idx = np.array([i for i, _ in pairs])
    j_idx = np.array([j for _, j in pairs])
    img1 = torch.from_numpy(ds.images[frames, i_idx]).to(dtype)
    img2 = torch.from_numpy(ds.images[frames, j_idx]).to(dtype)
    hm1 = torch.from_numpy(ds.heatmaps[frames, i_idx]).to(dtype)
    hm2 = torch.from_numpy(ds.heatmaps[frames, j_idx]).to(dtype)
    rays1 = torch.stack([cache.rays[i] for i in i_idx]).to(dtype)
    rays2 = torch.stack([cache.rays[j] for j in j_idx]).to(dtype)
    t12 = t21 = None
    if cache.targets:
        t12 = torch.stack([cache.targets[(i, j)] for i, j in pairs]).to(dtype)
        t21 = torch.stack([cache.targets[(j, i)] for i, j in pairs]).to(dtype)
    return img1, img2, hm1, hm2, rays1, rays2, t12, t21


def batch_loss(model, ds, cache, samples, lpos_weight, return_output=False):
    img1, img2, hm1, hm2, r1, r2, t12, t21 = _batch(ds, cache, samples, next(model.parameters()).dtype)
    out = model(img1, img2, r1, r2)
    loss, parts = total_loss(out, hm1, hm2, t12, t21, lpos_weight)
    return (loss, parts, out) if return_output else (loss, parts)


def build_model(config: TrainConfig) -> TransFusionNet:
    model = TransFusionNet(config)
    model.reset_parameters(config.seed)
    return model


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a zero-based epoch index."""
    return config.lr * config.lr_decay ** sum(epoch >= m for m in config.milestones)


def train(config: TrainConfig, dataset: SceneDataset, model=None, csv_path=None, probe_size=128):
    """Train a fusion model with Adam and a step learning-rate schedule.

    Returns ``(model, history)``; ``history`` is a list of per-epoch dicts
    with the keys of ``EPOCH_COLUMNS``. Row 0 holds the probe loss of the
    initial parameters.

    Raises
    ------
    NonFinite
        With ``.step`` set to the offending optimizer step.
    """
    torch.set_num_threads(1)
    model = build_model(config) if model is None else model
    cache = PairCache(dataset.rig, config)
    samples = _samples(dataset, cache.pairs)
    rng = np.random.default_rng(config.seed)
    probe = [samples[i] for i in np.sort(rng.permutation(len(samples))[:probe_size])]
    lw = config.effective_lpos_weight
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)

    def probe_loss():
        model.eval()
        with torch.no_grad():
            total = 0.0
            for s in range(0, len(probe), config.batch_size):
                chunk = probe[s: s + config.batch_size]
                total += float(batch_loss(model, dataset, cache, chunk, lw)[0]) * len(chunk)
        model.train()
        return total / max(len(probe), 1)

    history = [dict(schema=CSV_SCHEMA, epoch=0, lr=config.lr, train_loss="", train_mse="", train_lpos="", probe_loss=probe_loss())]
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(samples))
        sums = np.zeros(3)
        n = 0
        for s in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[s: s + config.batch_size]]
            loss, parts = batch_loss(model, dataset, cache, chunk, lw)
            if not torch.isfinite(loss):
                raise NonFinite(f"non-finite loss at step {step}", step=step)
            grads = grad_all(model, loss, step=step)
            for name, p in model.named_parameters():
                p.grad = grads[name]
            opt.step()
            step += 1
            sums += (float(loss.detach()), parts["mse"], parts["lpos"])
            n += 1
        mean = sums / max(n, 1)
        row = dict(
            schema=CSV_SCHEMA,
            epoch=epoch + 1,
            lr=float(lr),
            train_loss=float(mean[0]),
            train_mse=float(mean[1]),
            train_lpos=float(mean[2]),
            probe_loss=probe_loss(),
        )
        history.append(row)
        log.info("epoch %d lr %.2e loss %.5f probe %.5f", epoch + 1, lr, mean[0], row["probe_loss"])
    if csv_path is not None:
        write_history(csv_path, history)
    return model, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EPOCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def predict_heatmaps(model: TransFusionNet, dataset: SceneDataset, batch_size=16) -> np.ndarray:
    """Heatmaps for every frame and view, shape (F, V, k, Hh, Wh).

    A view fused in several camera pairs receives the mean of its heatmaps.
    """
    cache = PairCache(dataset.rig, model.config)
    F_, V = len(dataset), dataset.rig.n_views
    k = model.config.joints
    side = 2 * model.H
    acc = np.zeros((F_, V, k, side, side))
    count = np.zeros(V)
    for i, j in cache.pairs:
        count[i] += 1
        count[j] += 1
    samples = _samples(dataset, cache.pairs)
    model.eval()
    with torch.no_grad():
        for s in range(0, len(samples), batch_size):
            chunk = samples[s: s + batch_size]
            img1, img2, _, _, r1, r2, _, _ = _batch(dataset, cache, chunk, next(model.parameters()).dtype)
            hm1, hm2 = model(img1, img2, r1, r2).heatmaps
            for b, (f, p) in enumerate(chunk):
                i, j = cache.pairs[p]
                acc[f, i] += hm1[b].double().numpy()
                acc[f, j] += hm2[b].double().numpy()
    return acc / count[None, :, None, None, None]


def decode_all(heatmaps: np.ndarray, method="gaussian") -> np.ndarray:
    F_, V = heatmaps.shape[:2]
    out = np.empty((F_, V, heatmaps.shape[2], 2))
    for f in range(F_):
        for v in range(V):
            out[f, v] = decode_heatmap(heatmaps[f, v], method)[0]
    return out


def triangulate_all(cams, joints2d: np.ndarray) -> np.ndarray:
    """Per-frame DLT over every view: (F, V, k, 2) -> (F, k, 3)."""
    return np.stack([triangulate_points(cams, joints2d[f]) for f in range(joints2d.shape[0])])


@dataclass
class EvalReport:
    jdr_per_joint: list
    jdr_mean: float
    mpjpe_per_joint: list
    mpjpe_mean: float
    mpjpe_occluded: float
    mpjpe_visible: float
    per_sequence: dict
    joint_names: list
    threshold: str
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())

    def write_tables(self, prefix) -> None:
        """``<prefix>_summary.csv`` (per joint) and ``<prefix>_sequences.csv`` (per sequence)."""
        prefix = str(prefix)
        with open(prefix + "_summary.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["schema", "joint", "jdr_percent", "mpjpe_mm"])
            for name, a, b in zip(self.joint_names, self.jdr_per_joint, self.mpjpe_per_joint):
                w.writerow([CSV_SCHEMA, name, repr(a), repr(b)])
            w.writerow([CSV_SCHEMA, "mean", repr(self.jdr_mean), repr(self.mpjpe_mean)])
        seqs = sorted(self.per_sequence, key=int)
        with open(prefix + "_sequences.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["schema", "metric"] + [f"seq{s}" for s in seqs] + ["average"])
            w.writerow([CSV_SCHEMA, "mpjpe_mm"] + [repr(self.per_sequence[s]) for s in seqs] + [repr(self.mpjpe_mean)])


def report_from_predictions(dataset: SceneDataset, pred2d: np.ndarray, pred3d: np.ndarray, config=None) -> EvalReport:
    """Metrics for predicted (F, V, k, 2) joints and their (F, k, 3) triangulations."""
    thr = head_thresholds(dataset.joints3d, dataset.rig.cameras)[:, :, None]
    dist = np.linalg.norm(pred2d - dataset.joints2d, axis=-1)
    jdr_joint = 100.0 * np.mean(dist <= thr, axis=(0, 1))
    err = per_joint_error(pred3d, dataset.joints3d)
    occluded = ~dataset.visible.all(axis=1)
    per_seq = {str(int(s)): float(err[dataset.sequence == s].mean()) for s in np.unique(dataset.sequence)}
    return EvalReport(
        jdr_per_joint=[float(x) for x in jdr_joint],
        jdr_mean=jdr(pred2d, dataset.joints2d, np.broadcast_to(thr, dist.shape)),
        mpjpe_per_joint=[float(x) for x in err.mean(axis=0)],
        mpjpe_mean=float(err.mean()),
        mpjpe_occluded=float(err[occluded].mean()) if occluded.any() else float("nan"),
        mpjpe_visible=float(err[~occluded].mean()),
        per_sequence=per_seq,
        joint_names=list(JOINT_NAMES[: dataset.n_joints]),
        threshold="half head-neck bone length at head depth, per frame and view",
        config=config or {},
    )


def evaluate_heatmaps(dataset: SceneDataset, heatmaps: np.ndarray, method="gaussian", config=None) -> EvalReport:
    pred2d = decode_all(heatmaps, method)
    pred3d = triangulate_all(dataset.rig.cameras, pred2d)
    return report_from_predictions(dataset, pred2d, pred3d, config)


def evaluate(model: TransFusionNet, dataset: SceneDataset, method="gaussian") -> EvalReport:
    """Forward every pair, decode, triangulate over all views and score."""
    hm = predict_heatmaps(model, dataset)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(model.config).items()}
    return evaluate_heatmaps(dataset, hm, method, cfg)


def attention_grids(model: TransFusionNet, dataset: SceneDataset, frame: int, view: int, query):
    """Cross-view attention rows for one query token, per layer and head.

    ``view`` selects which camera of the first fused pair holds the query
    (0 or 1); ``query`` is a (u, v) pixel snapped to its feature cell.

    Returns
    -------
    attn : ndarray, shape (layers, heads, H, W)
        Attention from the query token to every token of the other view,
        renormalized within that view.
    field : EpipolarFieldGrid
        Analytic field of the snapped query over the other view.
    """
    if not 0 <= frame < len(dataset):
        raise IndexError(f"frame {frame} out of range")
    if view not in (0, 1):
        raise IndexError("view must be 0 or 1")
    cache = PairCache(dataset.rig, model.config)
    grid = cache.grid
    r, c = (int(round(x)) for x in grid.cell_of(query))
    if not (0 <= r < grid.H and 0 <= c < grid.W):
        raise IndexError(f"query {tuple(query)} outside the feature grid")
    pair = cache.pairs[0]
    img1, img2, _, _, r1, r2, _, _ = _batch(dataset, cache, [(frame, 0)], next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        maps = model(img1, img2, r1, r2, return_attention=True).attention
    L = grid.L
    q = r * grid.W + c + (L if view == 1 else 0)
    other = slice(0, L) if view == 1 else slice(L, 2 * L)
    rows = np.stack([m[0, :, q, other].double().numpy() for m in maps])
    sums = rows.sum(axis=-1, keepdims=True)
    rows = rows / np.where(sums > 0, sums, 1.0)
    cams = dataset.rig.cameras
    src, dst = (pair[0], pair[1]) if view == 0 else (pair[1], pair[0])
    snapped = grid.centers()[r * grid.W + c]
    fld = epipolar_field(cams[src], cams[dst], snapped, grid, model.config.gamma)
    return rows.reshape(len(maps), -1, grid.H, grid.W), fld


def dump_attention(model, dataset, frame, view, query, out_dir) -> list:
    """Write attention rows and the matching epipolar field as EPIFIELD files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    attn, fld = attention_grids(model, dataset, frame, view, query)
    written = []
    for layer in range(attn.shape[0]):
        for head in range(attn.shape[1]):
            p = out_dir / f"attn_l{layer}_h{head}.epifield"
            write_field(p, attn[layer, head], fld.gamma, fld.query)
            written.append(p)
    p = out_dir / "field.epifield"
    write_field(p, fld.scores, fld.gamma, fld.query)
    written.append(p)
    return written
