"""Two-view fusion transformer and its losses.

Both views are embedded by a patch-pooling stub, flattened into tokens and
concatenated so that self-attention spans the two views. Positional
encodings (2D sine plus an optional 3D term) are added to the queries and
keys only. Each view's output tokens are decoded to joint heatmaps by one
transposed convolution and a 1x1 convolution.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoding import init_we, sine_pe
from .exceptions import FormatError, NonFinite, ShapeMismatch

PE_MODES = ("full", "gpe-no-lpos", "learnable-3d-pe", "no-3d-pe")


@dataclass
class TrainConfig:
    """Every hyperparameter of a model and its training run.

    Serialized as ``key = value`` lines; see :meth:`to_text`.
    """

    d: int = 32
    heads: int = 4
    layers: int = 3
    d_ff: int = 64
    d_head: int = 32
    joints: int = 8
    channels: int = 3
    image_size: int = 128
    patch: int = 8
    epochs: int = 6
    lr: float = 1e-3
    milestones: tuple = (4, 5)
    lr_decay: float = 0.1
    batch_size: int = 8
    gamma: float = 10.0
    seed: int = 0
    pe_mode: str = "full"
    cross_view: bool = True
    lpos_weight: float = 1.0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.d % 4:
            raise ValueError("d must be divisible by 4")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch

    @property
    def effective_lpos_weight(self) -> float:
        return self.lpos_weight if self.pe_mode == "full" else 0.0

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {f.name: f for f in fields(cls)}
        kwargs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"line {n}: unknown key {key!r}")
            default = kinds[key].default
            if key == "milestones":
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"line {n}: bad boolean {value!r}")
                kwargs[key] = value.lower() in ("true", "1")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


class BackboneStub(nn.Module):
    """Average-pool non-overlapping patches per channel, then a linear map to ``d``."""

    def __init__(self, channels: int, d: int, patch: int = 8):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(channels, d)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[2] % self.patch or images.shape[3] % self.patch:
            raise ShapeMismatch(f"expected (B, C, H, W) with H, W divisible by {self.patch}, got {tuple(images.shape)}")
        pooled = F.avg_pool2d(images, self.patch)
        return self.proj(pooled.flatten(2).transpose(1, 2))


class FusionLayer(nn.Module):
    """Post-norm multi-head self-attention block with PE added to queries and keys."""

    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.d, self.heads = d, heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.norm2 = nn.LayerNorm(d)

    def _project(self, x, pe):
        B, n, d = x.shape
        h, dh = self.heads, d // self.heads
        xp = x + pe
        q = self.q(xp).view(B, n, h, dh).transpose(1, 2)
        k = self.k(xp).view(B, n, h, dh).transpose(1, 2)
        v = self.v(x).view(B, n, h, dh).transpose(1, 2)
        return q, k, v

    def attention(self, x, pe, mask=None):
        """Attention weights of shape (B, heads, n, n) and per-head values."""
        q, k, v = self._project(x, pe)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        return torch.softmax(logits, dim=-1), v

    def forward(self, x, pe, mask=None, need_weights=True):
        if not torch.isfinite(x).all() or not torch.isfinite(pe).all():
            raise NonFinite("non-finite input to attention layer")
        B, n, d = x.shape
        if need_weights:
            attn, v = self.attention(x, pe, mask)
            a = attn @ v
        else:
            # fused kernel, same math without materializing the weights
            attn = None
            q, k, v = self._project(x, pe)
            a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        a = a.transpose(1, 2).reshape(B, n, d)
        x = self.norm1(x + self.out(a))
        x = self.norm2(x + self.ff2(F.relu(self.ff1(x))))
        return x, attn


def mhsa(x, pe, layer: FusionLayer, mask=None):
    """One attention block; returns only the output tokens."""
    return layer(x, pe, mask)[0]


class FusionEncoder(nn.Module):
    def __init__(self, d: int, heads: int, layers: int, d_ff: int):
        super().__init__()
        self.layers = nn.ModuleList(FusionLayer(d, heads, d_ff) for _ in range(layers))

    def forward(self, x, pe, mask=None, return_attention=False):
        maps = []
        for layer in self.layers:
            x, attn = layer(x, pe, mask, need_weights=return_attention)
            if return_attention:
                maps.append(attn)
        return (x, maps) if return_attention else x


class HeatmapHead(nn.Module):
    """Stride-2 4x4 transposed convolution, ReLU, then 1x1 convolution to ``k`` maps."""

    def __init__(self, d: int, d_head: int, joints: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(d, d_head, kernel_size=4, stride=2, padding=1)
        self.final = nn.Conv2d(d_head, joints, kernel_size=1)

    def forward(self, tokens: torch.Tensor, H: int, W: int) -> torch.Tensor:
        B, L, d = tokens.shape
        if L != H * W:
            raise ShapeMismatch(f"{L} tokens cannot form a {H}x{W} grid")
        x = tokens.transpose(1, 2).reshape(B, d, H, W)
        return self.final(F.relu(self.deconv(x)))


def cross_view_mask(L: int, device=None) -> torch.Tensor:
    """Boolean (2L, 2L) mask allowing attention only within each view."""
    view = torch.arange(2 * L, device=device) >= L
    return view[:, None] == view[None, :]


@dataclass
class FusionOutput:
    heatmaps: tuple
    tokens: torch.Tensor
    geo: tuple = (None, None)
    attention: list = field(default_factory=list)


class TransFusionNet(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        c = config
        g = c.grid_size
        self.H = self.W = g
        self.L = g * g
        self.backbone = BackboneStub(c.channels, c.d, c.patch)
        self.encoder = FusionEncoder(c.d, c.heads, c.layers, c.d_ff)
        self.head = HeatmapHead(c.d, c.d_head, c.joints)
        self.register_buffer("sine", torch.tensor(sine_pe(g, g, c.d), dtype=torch.float32))
        if c.pe_mode in ("full", "gpe-no-lpos"):
            self.W_e = nn.Parameter(torch.empty(c.d, 3))
        elif c.pe_mode == "learnable-3d-pe":
            self.view_pe = nn.Parameter(torch.empty(2, self.L, c.d))
        self.mask = None if c.cross_view else cross_view_mask(self.L)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic initialization from a single integer seed."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name == "W_e":
                    p.copy_(torch.from_numpy(init_we(p.shape[0], seed)).to(p.dtype))
                elif name == "view_pe":
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.1)
                elif name.endswith("bias"):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                else:
                    fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                    bound = 1.0 / math.sqrt(fan_in)
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound)

    def geometry_encoding(self, rays: torch.Tensor):
        """E_G for rays of shape (..., L, 3), or None when the mode has no GPE."""
        if hasattr(self, "W_e"):
            return rays @ self.W_e.T
        return None

    def forward(self, img1, img2, rays1=None, rays2=None, return_attention=False) -> FusionOutput:
        t1, t2 = self.backbone(img1), self.backbone(img2)
        B, L, d = t1.shape
        if L != self.L:
            raise ShapeMismatch(f"expected {self.L} tokens per view, got {L}")
        pe1 = self.sine.to(t1.dtype).expand(B, L, d)
        pe2 = pe1
        g1 = g2 = None
        if hasattr(self, "W_e"):
            if rays1 is None or rays2 is None:
                raise ValueError("geometry encoding needs rays for both views")
            g1, g2 = self.geometry_encoding(rays1.to(t1.dtype)), self.geometry_encoding(rays2.to(t1.dtype))
            pe1, pe2 = pe1 + g1, pe2 + g2
        elif hasattr(self, "view_pe"):
            pe1, pe2 = pe1 + self.view_pe[0], pe2 + self.view_pe[1]
        x = torch.cat([t1, t2], dim=1)
        pe = torch.cat([pe1, pe2], dim=1)
        out = self.encoder(x, pe, self.mask, return_attention=return_attention)
        tokens, maps = out if return_attention else (out, [])
        hm1 = self.head(tokens[:, :L], self.H, self.W)
        hm2 = self.head(tokens[:, L:], self.H, self.W)
        return FusionOutput((hm1, hm2), tokens, (g1, g2), maps)


def heatmap_mse(pred, gt):
    """Squared Frobenius error per sample divided by the heatmap area, summed over joints, batch-averaged."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"heatmap shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() == 3:
        pred, gt = pred[None], gt[None]
    Hh, Wh = pred.shape[-2:]
    return ((pred - gt) ** 2).sum(dim=(1, 2, 3)).mean() / (Hh * Wh)


def lpos_torch(E1, E2, target):
    """Batched mean squared gap between ``E1 @ E2^T`` and the field target."""
    return ((E1 @ E2.transpose(-1, -2) - target) ** 2).mean()


def total_loss(out: FusionOutput, gt1, gt2, target12=None, target21=None, lpos_weight=1.0):
    """Heatmap MSE of both views plus the (symmetrized) epipolar matching loss.

    Returns ``(loss, parts)`` where ``parts`` holds the detached components.
    """
    hm1, hm2 = out.heatmaps
    mse = heatmap_mse(hm1, gt1) + heatmap_mse(hm2, gt2)
    g1, g2 = out.geo
    if g1 is not None and target12 is not None and lpos_weight:
        lpos = 0.5 * (lpos_torch(g1, g2, target12) + lpos_torch(g2, g1, target21))
    else:
        lpos = mse.new_zeros(())
    loss = mse + lpos_weight * lpos
    return loss, {"mse": float(mse.detach()), "lpos": float(lpos.detach())}


def grad_all(model: nn.Module, loss: torch.Tensor, step=None) -> dict:
    """Backpropagate ``loss`` and return ``{name: grad}`` for every parameter.

    Raises
    ------
    NonFinite
        If any gradient contains NaN or Inf.
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    out = {}
    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFinite(f"non-finite gradient for {name}", step=step)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# Checkpoints

_TFZ_MAGIC = b"TFZ v1\n"


def save_checkpoint(path, model: TransFusionNet) -> None:
    """Write the config text and every named tensor as float32 LE records."""
    buf = io.BytesIO()
    buf.write(_TFZ_MAGIC)
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TransFusionNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"TFZ "):
        raise FormatError("not a TFZ checkpoint")
    if not raw.startswith(_TFZ_MAGIC):
        raise FormatError("unsupported TFZ version")
    pos = len(_TFZ_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint")
        chunk = raw[pos: pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        config = TrainConfig.from_text(take(cfg_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    if pos != len(raw):
        raise FormatError("trailing bytes in checkpoint")
    model = TransFusionNet(config)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint does not match its config: {exc}") from exc
    return model


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
