"""Small query-based detector: strided conv backbone, attention encoder/decoder, heads.

The classifier has ``num_known_classes + 1`` columns; the final column is
always UNKNOWN.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ParameterError, ProtocolError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class DetectorConfig:
    num_queries: int = 250
    embed_dim: int = 64
    num_scales: int = 3
    num_known_classes: int = 1
    oriented: bool = False
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    input_size: int = 128
    backbone_width: int = 32

    def __post_init__(self):
        if self.num_queries < 1:
            raise ParameterError("num_queries must be >= 1")
        if self.embed_dim < 8 or self.embed_dim % 8:
            raise ParameterError("embed_dim must be a positive multiple of 8")
        if self.num_scales < 1:
            raise ParameterError("num_scales must be >= 1")
        if self.num_known_classes < 1:
            raise ParameterError("num_known_classes must be >= 1")
        if self.backbone_width < 16 or self.backbone_width % 16:
            raise ParameterError("backbone_width must be a positive multiple of 16 (group norm uses 8 groups)")
        if self.embed_dim % self.num_heads:
            raise ParameterError("embed_dim must be divisible by num_heads")
        if self.input_size % (2 ** (self.num_scales + 1)):
            raise ParameterError(f"input_size must be divisible by {2 ** (self.num_scales + 1)}")

    def feature_sizes(self) -> list[int]:
        """Side length of each encoder scale (strides 4, 8, 16, ...)."""
        return [self.input_size // 2 ** (i + 2) for i in range(self.num_scales)]


@dataclass
class ForwardOutput:
    """Batched outputs; every per-query tensor has leading dims ``(B, M)``."""

    encoder_features: list[torch.Tensor]  # per scale (B, H_i, W_i, D)
    backbone_features: list[torch.Tensor]  # per scale (B, C_i, H_i, W_i)
    query_embeddings: torch.Tensor  # (B, M, D)
    class_logits: torch.Tensor  # (B, M, K + 1)
    objectness_logits: torch.Tensor  # (B, M)
    boxes: torch.Tensor  # (B, M, 4) cxcywh, or (B, M, 5) with theta

    def select(self, b: int) -> "ForwardOutput":
        return ForwardOutput(
            [e[b] for e in self.encoder_features],
            [f[b] for f in self.backbone_features],
            self.query_embeddings[b],
            self.class_logits[b],
            self.objectness_logits[b],
            self.boxes[b],
        )


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(8, cout), nn.ReLU())


class Backbone(nn.Module):
    def __init__(self, width: int, num_scales: int):
        super().__init__()
        self.stem = nn.Sequential(_conv(3, width // 2, 2), _conv(width // 2, width, 2), _conv(width, width, 1))
        chans = [width * 2**i for i in range(num_scales)]
        self.stages = nn.ModuleList(
            [_conv(width, chans[0], 1)]
            + [nn.Sequential(_conv(chans[i - 1], chans[i], 2), _conv(chans[i], chans[i], 1)) for i in range(1, num_scales)]
        )
        self.channels = chans

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class MLP(nn.Module):
    def __init__(self, din, dhidden, dout, layers=3):
        super().__init__()
        dims = [din] + [dhidden] * (layers - 1) + [dout]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def sine_embed(xy: torch.Tensor, dim: int, temperature: float = 100.0) -> torch.Tensor:
    """Sinusoidal embedding of normalized ``(..., 2)`` coordinates into ``dim`` channels."""
    half = dim // 2
    freqs = temperature ** (2 * (torch.arange(half // 2, dtype=xy.dtype, device=xy.device)) / half)
    parts = []
    for c in range(2):
        v = xy[..., c : c + 1] * 2 * math.pi / freqs
        parts += [v.sin(), v.cos()]
    return torch.cat(parts, dim=-1)


def grid_centers(h: int, w: int) -> torch.Tensor:
    """``(h * w, 2)`` normalized ``(x, y)`` cell centers in row-major order."""
    ys, xs = torch.meshgrid((torch.arange(h) + 0.5) / h, (torch.arange(w) + 0.5) / w, indexing="ij")
    return torch.stack([xs.flatten(), ys.flatten()], dim=-1)


class DecoderLayer(nn.Module):
    """Self-attention over queries, then cross-attention to the encoder memory.

    Positional embeddings are added to queries/keys only (never to values),
    so each query attends near its reference point from the first step.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(3))

    def forward(self, tgt, query_pos, memory, memory_pos):
        q = tgt + query_pos
        tgt = self.norms[0](tgt + self.self_attn(q, q, tgt, need_weights=False)[0])
        tgt = self.norms[1](tgt + self.cross_attn(tgt + query_pos, memory + memory_pos, memory, need_weights=False)[0])
        return self.norms[2](tgt + self.ffn(tgt))


class Detector(nn.Module):
    """The detector; also the "state" passed around by the training code."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.frozen = False
        self.class_names: list[str] = []
        self.task = 0
        D = config.embed_dim
        self.backbone = Backbone(config.backbone_width, config.num_scales)
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, D, 1), nn.GroupNorm(8, D)) for c in self.backbone.channels
        )
        self.level_embed = nn.Parameter(torch.randn(config.num_scales, D) * 0.02)
        for i, s in enumerate(config.feature_sizes()):
            self.register_buffer(f"grid_pos_{i}", sine_embed(grid_centers(s, s), D), persistent=False)
        enc = nn.TransformerEncoderLayer(D, config.num_heads, 2 * D, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc, config.enc_layers, enable_nested_tensor=False)
        self.decoder = nn.ModuleList(DecoderLayer(D, config.num_heads) for _ in range(config.dec_layers))
        self.query_embed = nn.Embedding(config.num_queries, D)
        self.reference_points = nn.Parameter(torch.rand(config.num_queries, 2) * 0.9 + 0.05)
        self.query_pos = MLP(D, D, D, layers=2)
        self.class_head = nn.Linear(D, config.num_known_classes + 1)
        self.objectness_head = nn.Linear(D, 1)
        self.box_head = MLP(D, D, 4)
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.constant_(self.box_head.layers[-1].bias, 0.0)
        with torch.no_grad():
            self.box_head.layers[-1].bias[2:] = -1.0  # start from boxes ~0.27 wide
        self.angle_head = nn.Linear(D, 1) if config.oriented else None

    @property
    def num_classes(self) -> int:
        """Classifier width, UNKNOWN column included."""
        return self.class_head.out_features

    def encode(self, x: torch.Tensor):
        feats = self.backbone(x)
        tokens, pos, shapes = [], [], []
        for i, f in enumerate(feats):
            src = self.input_proj[i](f)
            B, D, H, W = src.shape
            shapes.append((H, W))
            p = getattr(self, f"grid_pos_{i}").to(src.dtype) + self.level_embed[i]
            tokens.append(src.flatten(2).transpose(1, 2) + p)
            pos.append(p)
        memory = self.encoder(torch.cat(tokens, dim=1))
        maps, start = [], 0
        for H, W in shapes:
            maps.append(memory[:, start : start + H * W].reshape(-1, H, W, memory.shape[-1]))
            start += H * W
        return feats, memory, torch.cat(pos, dim=0), maps

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        feats, memory, memory_pos, maps = self.encode(x)
        B = x.shape[0]
        ref_xy = self.reference_points.clamp(1e-4, 1 - 1e-4)
        query_pos = self.query_pos(sine_embed(ref_xy, self.config.embed_dim)).unsqueeze(0)
        z = self.query_embed.weight.unsqueeze(0).expand(B, -1, -1)
        for layer in self.decoder:
            z = layer(z, query_pos, memory, memory_pos)
        delta = self.box_head(z)
        ref = torch.logit(ref_xy)
        centers = torch.sigmoid(ref + delta[..., :2])
        sizes = torch.sigmoid(delta[..., 2:])
        boxes = [centers, sizes]
        if self.angle_head is not None:
            boxes.append(math.pi * (torch.sigmoid(self.angle_head(z)) - 0.5))
        return ForwardOutput(
            encoder_features=maps,
            backbone_features=feats,
            query_embeddings=z,
            class_logits=self.class_head(z),
            objectness_logits=self.objectness_head(z).squeeze(-1),
            boxes=torch.cat(boxes, dim=-1),
        )


def init_detector(config: DetectorConfig, seed: int = 0, class_names: Optional[list[str]] = None) -> Detector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        det = Detector(config)
    if class_names is not None:
        if len(class_names) != config.num_known_classes:
            raise ParameterError("class_names length must equal num_known_classes")
        det.class_names = list(class_names)
    return det


def to_batch(images, input_size: int, dtype=torch.float32) -> torch.Tensor:
    """Accept ``(H, W, 3)``/``(B, H, W, 3)`` arrays or ``(B, 3, H, W)`` tensors."""
    if isinstance(images, torch.Tensor) and images.ndim == 4 and images.shape[1] == 3:
        x = images.to(dtype)
    else:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeError(f"expected (H, W, 3) or (B, H, W, 3) images, got {arr.shape}")
        x = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    if x.shape[-2:] != (input_size, input_size):
        raise ShapeError(f"image size {tuple(x.shape[-2:])} != configured {input_size}x{input_size}")
    return x


def forward(state: Detector, images) -> ForwardOutput:
    dtype = next(state.parameters()).dtype
    return state(to_batch(images, state.config.input_size, dtype))


def clone_detached(state: Detector) -> Detector:
    """Frozen deep copy: no gradients, eval mode, rejected by every trainer."""
    clone = copy.deepcopy(state)
    clone.requires_grad_(False)
    clone.eval()
    clone.frozen = True
    return clone


def extend_known_classes(state: Detector, new_class_count: int, names: Optional[list[str]] = None, seed: int = 0) -> Detector:
    """Copy of ``state`` whose classifier has ``new_class_count`` more known columns.

    Old known rows keep their index, the UNKNOWN row moves to the end and new
    rows get small random weights.
    """
    if new_class_count < 1:
        raise ParameterError("new_class_count must be >= 1")
    if state.frozen:
        raise ProtocolError("cannot extend a frozen model")
    new = copy.deepcopy(state)
    old = new.class_head
    K = old.out_features - 1
    head = nn.Linear(old.in_features, K + new_class_count + 1).to(old.weight.dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
        head.weight[:K] = old.weight[:K]
        head.bias[:K] = old.bias[:K]
        head.weight[-1] = old.weight[K]
        head.bias[-1] = old.bias[K]
    new.class_head = head
    new.config = _replace(new.config, K + new_class_count)
    if names is not None:
        if len(names) != new_class_count:
            raise ParameterError("names must have new_class_count entries")
        new.class_names = list(state.class_names) + list(names)
    return new


def _replace(cfg: DetectorConfig, k: int) -> DetectorConfig:
    d = asdict(cfg)
    d["num_known_classes"] = k
    return DetectorConfig(**d)


def parameter_hash(state: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(state.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, state: Detector, extra: Optional[dict] = None) -> None:
    """Write a versioned checkpoint (see README, "Checkpoint layout")."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "state_dict": state.state_dict(),
        "task": state.task,
        "class_names": list(state.class_names),
        "dtype": str(next(state.parameters()).dtype),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    path = Path(path)
    if not path.exists():
        raise ProtocolError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ProtocolError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    det = Detector(DetectorConfig(**payload["config"]))
    if payload.get("dtype") == "torch.float64":
        det = det.double()
    det.load_state_dict(payload["state_dict"])
    det.task = payload["task"]
    det.class_names = payload["class_names"]
    return det, payload.get("extra", {})
