"""Gaze-guided cross-attention fusion, the regression head and its training loop.

The semantic embedding is the single query; the gaze tower's patch tokens
are keys and values.  The attended vector is added back onto the query and
layer-normalized, so a zeroed gaze stream reduces the network to a regressor
on the semantic embedding alone.
"""
from __future__ import annotations

import copy
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataio import ImageRecord, images_array
from .encoders import (
    EncoderConfig,
    GazeImageEncoder,
    SemanticConfig,
    SemanticEncoder,
    init_fan_in_,
    load_module_state,
    load_weights,
    save_weights,
)
from .evalstats import pearson
from .objectives import HybridLossConfig, check_finite, hybrid_loss_torch

log = logging.getLogger(__name__)


class MaskMode(str, enum.Enum):
    FULL = "full"
    S_ONLY = "s_only"
    G_ONLY = "g_only"

    @classmethod
    def parse(cls, value) -> "MaskMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_").lower())


class CrossAttention(nn.Module):
    """Multi-head attention of one query vector over a token sequence.

    ``w_q, w_k, w_v`` have shape ``(n_heads, d, d_k)`` and ``w_o`` has shape
    ``(n_heads * d_k, d)``.  ``residual`` and ``layer_norm`` can be switched
    off to expose the bare attention read-out.
    """

    fan_in_axis = -2

    def __init__(self, d: int, n_heads: int = 4, d_k: int | None = None,
                 residual: bool = True, layer_norm: bool = True, seed: int = 0):
        super().__init__()
        d_k = d_k or d // n_heads
        self.d, self.n_heads, self.d_k = d, n_heads, d_k
        self.w_q = nn.Parameter(torch.empty(n_heads, d, d_k))
        self.w_k = nn.Parameter(torch.empty(n_heads, d, d_k))
        self.w_v = nn.Parameter(torch.empty(n_heads, d, d_k))
        self.w_o = nn.Parameter(torch.empty(n_heads * d_k, d))
        self.residual = residual
        self.norm = nn.LayerNorm(d) if layer_norm else None
        init_fan_in_(self, seed)

    def weights(self, h_c: torch.Tensor, h_f: torch.Tensor) -> torch.Tensor:
        """Attention weights ``(B, n_heads, T)``."""
        q = torch.einsum("bd,hdk->bhk", h_c, self.w_q)
        k = torch.einsum("btd,hdk->bhtk", h_f, self.w_k)
        scores = torch.einsum("bhk,bhtk->bht", q, k) / math.sqrt(self.d_k)
        return scores.softmax(dim=-1)

    def forward(self, h_c: torch.Tensor, h_f: torch.Tensor) -> torch.Tensor:
        if h_c.shape[-1] != self.d or h_f.shape[-1] != self.d:
            raise ValueError(f"cross-attention expects width {self.d}, got {h_c.shape[-1]} and {h_f.shape[-1]}")
        attn = self.weights(h_c, h_f)
        v = torch.einsum("btd,hdk->bhtk", h_f, self.w_v)
        heads = torch.einsum("bht,bhtk->bhk", attn, v)
        out = heads.reshape(heads.shape[0], -1) @ self.w_o
        if self.residual:
            out = out + h_c
        return self.norm(out) if self.norm is not None else out


def cross_attend(h_c, h_f, params: CrossAttention) -> torch.Tensor:
    """Attend from ``h_c`` (``(d,)`` or ``(B, d)``) over ``h_f`` (``(T, d)`` or ``(B, T, d)``)."""
    single = h_c.dim() == 1
    if single:
        h_c, h_f = h_c[None], h_f[None]
    out = params(h_c, h_f)
    return out[0] if single else out


class RegressionHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, 1))

    def forward(self, x):
        return self.net(x).squeeze(-1)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 50
    lr: float = 1e-3
    encoder_lr: float = 1e-4
    weight_decay: float = 0.01
    lam: float = 0.5
    eps: float = 1e-8
    train_gave: bool = True
    seed: int = 0
    mode: str = "full"
    head_hidden: int = 64
    fusion_heads: int = 4


class FusionModel(nn.Module):
    """Frozen semantic encoder + gaze tower + cross-attention + regression head.

    ``forward`` takes precomputed semantic embeddings (the semantic encoder is
    frozen, so callers cache them) together with the raw images.
    """

    def __init__(self, gaze_config: EncoderConfig = EncoderConfig(),
                 semantic_config: SemanticConfig | None = None, fusion_heads: int = 4,
                 head_hidden: int = 64, seed: int = 0):
        super().__init__()
        d = gaze_config.d
        self.semantic = SemanticEncoder(semantic_config or SemanticConfig(d=d, image_size=gaze_config.image_size))
        if self.semantic.config.d != d:
            raise ValueError("semantic and gaze widths must match")
        self.gaze = GazeImageEncoder(gaze_config)
        self.attention = CrossAttention(d, fusion_heads, seed=seed + 101)
        self.head = RegressionHead(2 * d, head_hidden)
        init_fan_in_(self.head, seed + 202)
        self.register_buffer("target_mean", torch.zeros((), dtype=torch.float64))
        self.register_buffer("target_std", torch.ones((), dtype=torch.float64))

    @property
    def d(self) -> int:
        return self.gaze.config.d

    def semantic_embed(self, pixels: np.ndarray) -> torch.Tensor:
        dtype = self.head.net[0].weight.dtype
        return torch.as_tensor(self.semantic.encode(pixels), dtype=dtype)

    def forward(self, h_c: torch.Tensor, images: torch.Tensor | None, mode=MaskMode.FULL) -> torch.Tensor:
        """Normalized-score predictions ``(B,)``."""
        mode = MaskMode.parse(mode)
        b = h_c.shape[0]
        if mode is MaskMode.S_ONLY:
            h_f = h_c.new_zeros(b, self.gaze.config.n_tokens, self.d)
        else:
            h_f = self.gaze(images)
        if mode is MaskMode.G_ONLY:
            h_c = torch.zeros_like(h_c)
        h_attn = self.attention(h_c, h_f)
        return self.head(torch.cat([h_attn, h_c], dim=-1))

    def semantic_only(self, h_c: torch.Tensor) -> torch.Tensor:
        """Closed-form reduction of the ``s_only`` path: ``head([LN(h_c), h_c])``."""
        return self.head(torch.cat([self.attention.norm(h_c), h_c], dim=-1))

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.target_std.to(z.dtype) + self.target_mean.to(z.dtype)

    @torch.no_grad()
    def predict(self, h_c: torch.Tensor, images: torch.Tensor, mode=MaskMode.FULL,
                batch_size: int = 256) -> np.ndarray:
        """Predictions in score units."""
        out = []
        for i in range(0, h_c.shape[0], batch_size):
            imgs = images[i: i + batch_size] if images is not None else None
            out.append(self.denormalize(self(h_c[i: i + batch_size], imgs, mode)))
        return torch.cat(out).double().numpy() if out else np.zeros(0)

    def trainable_parameters(self, include_gave: bool = True) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters()
                if p.requires_grad and (include_gave or not n.startswith("gaze."))]


def forward(record: ImageRecord, model: FusionModel, mode=MaskMode.FULL) -> float:
    """Score one image (in score units)."""
    dtype = model.head.net[0].weight.dtype
    h_c = model.semantic_embed(record.pixels)[None]
    img = torch.tensor(record.pixels, dtype=dtype)[None]
    return float(model.predict(h_c, img, mode)[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class ScoredSet:
    """Images with cached semantic embeddings and targets."""

    ids: list[str]
    images: torch.Tensor
    h_c: torch.Tensor
    scores: np.ndarray
    categories: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], semantic: SemanticEncoder,
                     dtype=torch.float32) -> "ScoredSet":
        pixels = images_array(records)
        h_c = semantic.encode(pixels) if len(records) else np.zeros((0, semantic.config.d))
        return cls([r.id for r in records], torch.as_tensor(pixels, dtype=dtype),
                   torch.as_tensor(h_c, dtype=dtype), np.array([r.score for r in records], dtype=np.float64),
                   [r.category for r in records])


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_plcc: float = -math.inf
    stopped_epoch: int = 0

    def to_lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.epochs]


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        idx = perm[i: i + batch_size]
        if len(idx) >= 2:
            yield idx


def train(model: FusionModel, train_set: ScoredSet, val_set: ScoredSet,
          config: TrainConfig = TrainConfig()) -> tuple[FusionModel, TrainLog]:
    """Optimize the hybrid loss with AdamW and a cosine schedule.

    Validation PLCC drives early stopping: training ends once ``patience``
    further epochs pass without improvement, and the best weights are
    restored.  The gaze tower is fine-tuned unless ``train_gave`` is false
    or the mode never evaluates it.
    """
    if len(train_set) < 2 or len(val_set) < 2:
        raise ValueError("train and validation sets need at least 2 samples each")
    if set(train_set.ids) & set(val_set.ids):
        raise ValueError("train and validation sets overlap")
    mode = MaskMode.parse(config.mode)
    loss_cfg = HybridLossConfig(config.lam, config.eps)
    dtype = model.head.net[0].weight.dtype

    mean = float(train_set.scores.mean())
    std = float(train_set.scores.std()) or 1.0
    model.target_mean.fill_(mean)
    model.target_std.fill_(std)
    targets = torch.as_tensor((train_set.scores - mean) / std, dtype=dtype)

    use_gave = config.train_gave and mode is not MaskMode.S_ONLY
    model.gaze.requires_grad_(use_gave)
    groups = [{"params": [p for n, p in model.named_parameters() if not n.startswith("gaze.")],
               "lr": config.lr, "base_lr": config.lr}]
    if use_gave:
        groups.append({"params": list(model.gaze.parameters()), "lr": config.encoder_lr,
                       "base_lr": config.encoder_lr})
    opt = torch.optim.AdamW(groups, weight_decay=config.weight_decay)

    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = max(1, sum(1 for _ in range(0, len(train_set), config.batch_size)))
    total = config.max_epochs * steps_per_epoch
    step = 0
    log_ = TrainLog()
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        losses = []
        for idx in _batches(len(train_set), config.batch_size, gen):
            for g in opt.param_groups:
                g["lr"] = cosine_lr(g["base_lr"], step, total)
            images = train_set.images[idx] if mode is not MaskMode.S_ONLY else None
            pred = model(train_set.h_c[idx], images, mode)
            loss = check_finite(hybrid_loss_torch(pred, targets[idx], loss_cfg), f"fusion epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        model.eval()
        val_pred = model.predict(val_set.h_c, val_set.images if mode is not MaskMode.S_ONLY else None, mode)
        val_plcc = pearson(val_pred, val_set.scores)
        val_mse = float(np.mean(((val_pred - val_set.scores) / std) ** 2))
        log_.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                            "val_plcc": val_plcc, "val_mse_norm": val_mse})
        log_.stopped_epoch = epoch
        if val_plcc > log_.best_val_plcc:
            log_.best_val_plcc, log_.best_epoch = val_plcc, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    model.load_state_dict(best_state)
    model.gaze.requires_grad_(model.gaze.config.trainable)
    model.eval()
    log.info("fusion training stopped at epoch %d (best %d, val PLCC %.4f)",
             log_.stopped_epoch, log_.best_epoch, log_.best_val_plcc)
    return model, log_


# ---------------------------------------------------------------------------
# checkpoints and predictions


def save_checkpoint(path, model: FusionModel, train_config: TrainConfig | None = None, extra: dict | None = None):
    config = {
        "format": "fusion-checkpoint",
        "gaze": asdict(model.gaze.config),
        "semantic": asdict(model.semantic.config),
        "fusion_heads": model.attention.n_heads,
        "head_hidden": model.head.net[0].out_features,
        "target_mean": float(model.target_mean),
        "target_std": float(model.target_std),
        "train": asdict(train_config) if train_config else None,
    }
    if extra:
        config.update(extra)
    tensors = {k: v for k, v in model.state_dict().items() if k not in ("target_mean", "target_std")}
    save_weights(path, tensors, config)


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    arrays, config = load_weights(path)
    model = FusionModel(EncoderConfig(**config["gaze"]), SemanticConfig(**config["semantic"]),
                        config["fusion_heads"], config["head_hidden"])
    arrays = dict(arrays)
    arrays["target_mean"] = np.array(config["target_mean"])
    arrays["target_std"] = np.array(config["target_std"])
    load_module_state(model, arrays)
    # float32 round trip of the normalization constants would lose precision
    model.target_mean.fill_(config["target_mean"])
    model.target_std.fill_(config["target_std"])
    model.eval()
    return model, config


def write_predictions(path, ids, preds, targets, categories=None) -> None:
    categories = categories or [""] * len(ids)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, p, y, c in zip(ids, preds, targets, categories):
            fh.write(json.dumps({"id": i, "pred": float(p), "score": float(y), "category": c}) + "\n")
