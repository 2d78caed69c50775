"""Contrastive alignment of the image tower with the scanpath tower.

Both towers map their inputs to unit vectors; a batch of N matched pairs
gives an N x N cosine-similarity matrix whose diagonal holds the positives.
The loss is the symmetric InfoNCE: the mean of the row-wise (image to gaze)
and column-wise (gaze to image) cross-entropies over ``s / tau``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.special import logsumexp

from .dataio import DataValidationError, ImageRecord, Scanpath, group_by_image, images_array
from .encoders import GazeImageEncoder, ScanpathEncoder, fixation_features, l2_normalize
from .fusion import cosine_lr
from .objectives import check_finite

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CgaConfig:
    tau: float = 0.05
    batch_size: int = 32
    max_epochs: int = 150
    lr: float = 1e-3
    weight_decay: float = 0.01
    aggregation: str = "per-image-mean"
    eval_interval: int = 10
    seed: int = 0
    train_image_tower: bool = True
    train_gaze_tower: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.aggregation not in ("per-image-mean", "per-path"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def similarity(v_i, v_g) -> np.ndarray:
    """``s[i, j] = <v_i[i], v_g[j]>`` for row-normalized batches."""
    v_i = np.asarray(v_i, dtype=np.float64)
    v_g = np.asarray(v_g, dtype=np.float64)
    if v_i.ndim != 2 or v_i.shape != v_g.shape:
        raise ValueError(f"similarity needs equal (N, d) batches, got {v_i.shape} and {v_g.shape}")
    return v_i @ v_g.T


def _neg_log_softmax_diag(logits: np.ndarray) -> np.ndarray:
    """``lse(row) - diag`` per row; uses log1p when the positive dominates to keep tiny losses exact."""
    d = logits - np.diag(logits)[:, None]
    off = d + np.diag(np.full(len(d), -np.inf))
    m = np.maximum(off.max(axis=1), 0.0)
    return np.where(m > 0, m + np.log(np.exp(d - m[:, None]).sum(axis=1)),
                    np.log1p(np.exp(np.minimum(off, 0.0)).sum(axis=1)))


def cga_loss(s, tau: float = 0.05) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE loss on a similarity matrix and its gradient w.r.t. ``s``.

    Row and column log-softmaxes are computed with max subtraction.  With
    ``P`` the row softmax and ``Q`` the column softmax of ``s / tau``,
    ``dL/ds = (P + Q - 2 I) / (2 N tau)``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    n = s.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs N >= 2 (no negatives otherwise)")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    logits = s / tau
    row_lse = logsumexp(logits, axis=1)
    col_lse = logsumexp(logits, axis=0)
    loss = float(np.sum(_neg_log_softmax_diag(logits)) + np.sum(_neg_log_softmax_diag(logits.T))) / (2 * n)
    p = np.exp(logits - row_lse[:, None])
    q = np.exp(logits - col_lse[None, :])
    grad = (p + q - 2.0 * np.eye(n)) / (2.0 * n * tau)
    return loss, grad


def cga_loss_torch(s: torch.Tensor, tau: float = 0.05) -> torch.Tensor:
    n = s.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs N >= 2 (no negatives otherwise)")
    logits = s / tau
    target = torch.arange(n)
    row = torch.nn.functional.cross_entropy(logits, target)
    col = torch.nn.functional.cross_entropy(logits.T, target)
    return 0.5 * (row + col)


def retrieval_metrics(s) -> dict[str, float]:
    """Image-to-gaze retrieval over rows of ``s``.

    The rank of row ``i``'s positive counts entries strictly greater than
    ``s[i, i]`` plus tied entries at smaller column index, so a tie never
    favours the positive unless it comes first.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("retrieval needs a square matrix")
    n = s.shape[0]
    diag = np.diag(s)[:, None]
    cols = np.arange(n)[None, :]
    ahead = (s > diag) | ((s == diag) & (cols < np.arange(n)[:, None]))
    rank = ahead.sum(axis=1) + 1
    return {"recall@1": float(np.mean(rank <= 1)), "recall@5": float(np.mean(rank <= 5)),
            "mean_rank": float(np.mean(rank))}


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class CgaLog:
    records: list[dict] = field(default_factory=list)

    def to_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]


class PairedGazeData:
    """Images aligned with their scanpaths, pre-tensorized for fast epochs."""

    def __init__(self, records: Sequence[ImageRecord], scanpaths: Sequence[Scanpath], dtype=torch.float32):
        groups = group_by_image(scanpaths)
        missing = [r.id for r in records if r.id not in groups]
        if missing:
            raise DataValidationError(f"{len(missing)} image(s) have no scanpath, e.g. {missing[0]!r}")
        self.ids = [r.id for r in records]
        self.images = torch.as_tensor(images_array(records), dtype=dtype)
        flat, owner = [], []
        for i, r in enumerate(records):
            for sp in groups[r.id]:
                flat.append(sp)
                owner.append(i)
        self.paths = flat
        self.feats, self.mask = fixation_features(flat, dtype)
        self.owner = torch.as_tensor(owner)
        self.counts = torch.bincount(self.owner, minlength=len(records))

    def __len__(self):
        return len(self.ids)


def embed_gaze(gaze_tower: ScanpathEncoder, data: PairedGazeData, image_idx: torch.Tensor,
               aggregation: str, gen: torch.Generator | None = None) -> torch.Tensor:
    """Unit gaze embeddings for the images ``image_idx``."""
    if aggregation == "per-path":
        picks = []
        for i in image_idx.tolist():
            rows = torch.nonzero(data.owner == i).flatten()
            j = torch.randint(len(rows), (1,), generator=gen).item() if gen is not None else 0
            picks.append(rows[j])
        sel = torch.stack(picks)
        return l2_normalize(gaze_tower(data.feats[sel], data.mask[sel]))
    sel_mask = torch.isin(data.owner, image_idx)
    rows = torch.nonzero(sel_mask).flatten()
    pooled = gaze_tower(data.feats[rows], data.mask[rows])
    pos = {int(i): k for k, i in enumerate(image_idx.tolist())}
    slot = torch.as_tensor([pos[int(o)] for o in data.owner[rows]])
    summed = torch.zeros(len(image_idx), pooled.shape[1], dtype=pooled.dtype).index_add_(0, slot, pooled)
    return l2_normalize(summed / data.counts[image_idx][:, None].to(pooled.dtype))


@torch.no_grad()
def evaluate_retrieval(image_tower: GazeImageEncoder, gaze_tower: ScanpathEncoder, data: PairedGazeData,
                       aggregation: str = "per-image-mean") -> dict[str, float]:
    idx = torch.arange(len(data))
    v_i = image_tower.pooled(data.images, normalize=True)
    agg = "per-image-mean" if aggregation == "per-path" else aggregation
    v_g = embed_gaze(gaze_tower, data, idx, agg)
    return retrieval_metrics(similarity(v_i.double().numpy(), v_g.double().numpy()))


def pretrain(image_tower: GazeImageEncoder, gaze_tower: ScanpathEncoder, train: PairedGazeData,
             config: CgaConfig = CgaConfig(), held_out: PairedGazeData | None = None) -> CgaLog:
    """Align the two towers in place with the symmetric contrastive loss.

    Returns a log whose epoch-0 record holds the loss and retrieval metrics
    at initialization, followed by the mean loss of every epoch and retrieval
    metrics every ``eval_interval`` epochs (on ``held_out`` when given).
    """
    if len(train) < 2:
        raise DataValidationError("contrastive pretraining needs at least 2 images")
    log_ = CgaLog()
    image_tower.eval()
    gaze_tower.eval()
    init = {"epoch": 0, "loss": initial_loss(image_tower, gaze_tower, train, config)}
    init.update(evaluate_retrieval(image_tower, gaze_tower, held_out or train))
    log_.records.append(init)
    image_tower.requires_grad_(config.train_image_tower)
    gaze_tower.requires_grad_(config.train_gaze_tower)
    params = [p for p in list(image_tower.parameters()) + list(gaze_tower.parameters()) if p.requires_grad]
    if config.max_epochs <= 0 or not params:
        return log_
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(train)
    bs = min(n, config.batch_size)
    steps_per_epoch = math.ceil(n / bs)
    total = config.max_epochs * steps_per_epoch
    step = 0
    start = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        image_tower.train()
        gaze_tower.train()
        perm = torch.randperm(n, generator=gen) if bs < n else torch.arange(n)
        losses = []
        for b in range(0, n, bs):
            idx = perm[b: b + bs]
            if len(idx) < 2:
                continue
            for g in opt.param_groups:
                g["lr"] = cosine_lr(config.lr, step, total)
            v_i = image_tower.pooled(train.images[idx], normalize=True)
            v_g = embed_gaze(gaze_tower, train, idx, config.aggregation, gen)
            loss = check_finite(cga_loss_torch(v_i @ v_g.T, config.tau), f"cga epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if epoch % config.eval_interval == 0 or epoch == config.max_epochs:
            image_tower.eval()
            gaze_tower.eval()
            rec.update(evaluate_retrieval(image_tower, gaze_tower, held_out or train))
        rec["wall_time"] = round(time.perf_counter() - start, 3)
        log_.records.append(rec)
    image_tower.eval()
    gaze_tower.eval()
    return log_


@torch.no_grad()
def initial_loss(image_tower, gaze_tower, data: PairedGazeData, config: CgaConfig = CgaConfig(),
                 batch_size: int | None = None) -> float:
    """Mean batch loss over consecutive ``batch_size`` chunks (default ``config.batch_size``)."""
    bs = min(len(data), batch_size or config.batch_size)
    losses = []
    for b in range(0, len(data), bs):
        idx = torch.arange(b, min(b + bs, len(data)))
        if len(idx) < 2:
            continue
        v_i = image_tower.pooled(data.images[idx], normalize=True)
        v_g = embed_gaze(gaze_tower, data, idx, "per-image-mean")
        losses.append(cga_loss_torch(v_i @ v_g.T, config.tau).item())
    return float(np.mean(losses))
