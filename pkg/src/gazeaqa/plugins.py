"""Plug-in gaze augmentation for existing quality models ("hosts").

Two routes, depending on what the host exposes:

* feature level: the host's penultimate features are concatenated with the
  frozen gaze embedding (host first, gaze second) and a fresh regression
  head is trained on the result;
* score level: the host's scores receive a residual correction
  ``S_final = S_host + lam * S_gaze`` from a gaze-only regressor, with
  ``lam`` fixed or fitted in closed form on a calibration split.

The synthetic hosts at the bottom exist so both routes can be exercised
without any external model.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .encoders import GazeImageEncoder, SemanticEncoder, init_fan_in_
from .evalstats import pearson
from .fusion import cosine_lr
from .objectives import HybridLossConfig, check_finite, hybrid_loss_torch


def feature_fuse(f_host, f_gaze) -> np.ndarray:
    """Concatenate host then gaze features along the last axis."""
    f_host = np.asarray(f_host, dtype=np.float64)
    f_gaze = np.asarray(f_gaze, dtype=np.float64)
    if f_gaze.size == 0:
        f_gaze = np.zeros(f_host.shape[:-1] + (0,))
    if not (np.all(np.isfinite(f_host)) and np.all(np.isfinite(f_gaze))):
        raise ValueError("feature_fuse needs finite inputs")
    return np.concatenate([f_host, f_gaze], axis=-1)


def unfuse(f_fused, host_width: int) -> tuple[np.ndarray, np.ndarray]:
    f_fused = np.asarray(f_fused)
    return f_fused[..., :host_width], f_fused[..., host_width:]


# ---------------------------------------------------------------------------
# fused regression head


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 64
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 30
    lr: float = 3e-3
    weight_decay: float = 0.01
    lam: float = 0.5
    eps: float = 1e-8
    seed: int = 0


class FusedHead(nn.Module):
    """Standardize inputs, then a linear map (``hidden=0``) or a one-hidden-layer MLP."""

    def __init__(self, in_dim: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.register_buffer("mu", torch.zeros(in_dim))
        self.register_buffer("sigma", torch.ones(in_dim))
        self.register_buffer("target_mean", torch.zeros((), dtype=torch.float64))
        self.register_buffer("target_std", torch.ones((), dtype=torch.float64))
        if hidden:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, 1))
        else:
            self.net = nn.Linear(in_dim, 1)
        init_fan_in_(self, seed)

    def forward(self, x):
        return self.net((x - self.mu) / self.sigma).squeeze(-1)

    @torch.no_grad()
    def predict(self, x) -> np.ndarray:
        x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
        return (self(x).double() * self.target_std + self.target_mean).numpy()


@dataclass
class FusedResult:
    head: FusedHead
    host_width: int
    gaze_width: int
    predictions: dict[str, float]
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def fit_head(x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
             config: HeadConfig = HeadConfig()) -> tuple[FusedHead, list[dict], int]:
    """Train a :class:`FusedHead` with the hybrid loss and early stopping on validation PLCC."""
    x_train = torch.as_tensor(np.asarray(x_train), dtype=torch.float32)
    x_val = torch.as_tensor(np.asarray(x_val), dtype=torch.float32)
    y_train = np.asarray(y_train, dtype=np.float64)
    head = FusedHead(x_train.shape[1], config.hidden, config.seed)
    with torch.no_grad():
        head.mu.copy_(x_train.mean(dim=0))
        head.sigma.copy_(x_train.std(dim=0, unbiased=False).clamp_min(1e-6))
        head.target_mean.fill_(float(y_train.mean()))
        head.target_std.fill_(float(y_train.std()) or 1.0)
    target = torch.as_tensor((y_train - float(head.target_mean)) / float(head.target_std), dtype=torch.float32)
    loss_cfg = HybridLossConfig(config.lam, config.eps)
    opt = torch.optim.AdamW(head.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(x_train)
    steps = max(1, math.ceil(n / config.batch_size)) * config.max_epochs
    step, stale, best, best_epoch = 0, 0, -math.inf, 0
    best_state = copy.deepcopy(head.state_dict())
    log = []
    for epoch in range(1, config.max_epochs + 1):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, config.batch_size):
            idx = perm[i: i + config.batch_size]
            if len(idx) < 2:
                continue
            for g in opt.param_groups:
                g["lr"] = cosine_lr(config.lr, step, steps)
            loss = check_finite(hybrid_loss_torch(head(x_train[idx]), target[idx], loss_cfg), "fused head")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        val = pearson(head.predict(x_val), y_val) if np.ptp(head.predict(x_val)) > 0 else 0.0
        log.append({"epoch": epoch, "val_plcc": val})
        if val > best:
            best, best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(head.state_dict())
        else:
            stale += 1
            if stale > config.patience:
                break
    head.load_state_dict(best_state)
    return head, log, best_epoch


def _lookup(table, ids):
    if hasattr(table, "lookup"):
        return np.asarray(table.lookup(ids), dtype=np.float64)
    missing = [i for i in ids if i not in table]
    if missing:
        raise KeyError(f"{len(missing)} id(s) missing from feature table, e.g. {missing[0]!r}")
    return np.stack([np.asarray(table[i], dtype=np.float64) for i in ids])


def train_fused_head(host_features, gaze_features, scores: Mapping[str, float],
                     train_ids: Sequence[str], val_ids: Sequence[str], predict_ids: Sequence[str] | None = None,
                     config: HeadConfig = HeadConfig()) -> FusedResult:
    """Train a new head on ``host ⊕ gaze`` features.

    ``host_features`` and ``gaze_features`` map id to vector (dicts or
    embedding tables).  Pass ``gaze_features=None`` (zero gaze width) for
    the host-only baseline and ``host_features=None`` for a gaze-only head.
    """
    all_ids = list(train_ids) + list(val_ids) + list(predict_ids or [])

    def fused(ids):
        parts = []
        parts.append(_lookup(host_features, ids) if host_features is not None else np.zeros((len(ids), 0)))
        g = _lookup(gaze_features, ids) if gaze_features is not None else np.zeros((len(ids), 0))
        return feature_fuse(parts[0], g), parts[0].shape[1], g.shape[1]

    x_tr, hw, gw = fused(list(train_ids))
    if hw + gw == 0:
        raise ValueError("fused head needs at least one feature")
    x_va, _, _ = fused(list(val_ids))
    y = lambda ids: np.array([scores[i] for i in ids], dtype=np.float64)
    head, log, best = fit_head(x_tr, y(train_ids), x_va, y(val_ids), config)
    pred_ids = list(dict.fromkeys(all_ids))
    preds = head.predict(fused(pred_ids)[0])
    return FusedResult(head, hw, gw, dict(zip(pred_ids, map(float, preds))), log, best)


@torch.no_grad()
def gaze_embeddings(encoder: GazeImageEncoder, ids: Sequence[str], images, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Pooled (un-normalized) embeddings of a frozen gaze tower, keyed by id."""
    images = torch.as_tensor(np.asarray(images), dtype=next(encoder.parameters()).dtype)
    out = [encoder.pooled(images[i: i + batch_size]) for i in range(0, len(images), batch_size)]
    arr = torch.cat(out).double().numpy() if out else np.zeros((0, encoder.config.d))
    return dict(zip(ids, arr))


# ---------------------------------------------------------------------------
# score-level correction


@dataclass(frozen=True)
class CorrectionConfig:
    lam: float = 0.5
    fit_lambda: bool = False


@dataclass(frozen=True)
class Correction:
    scores: dict[str, float]
    lam: float
    offset: float


def fit_lambda(residual, gaze) -> float:
    """Least-squares ``lam`` minimizing ``|residual - lam * gaze|^2``."""
    residual = np.asarray(residual, dtype=np.float64)
    gaze = np.asarray(gaze, dtype=np.float64)
    denom = float(gaze @ gaze)
    return float(residual @ gaze) / denom if denom > 0 else 0.0


def score_correct(s_host: Mapping[str, float], s_gaze: Mapping[str, float],
                  config: CorrectionConfig = CorrectionConfig(),
                  calibration: Mapping[str, float] | None = None) -> Correction:
    """``S_final = S_host + lam * (S_gaze - offset)`` per id.

    ``calibration`` maps calibration ids to ground truth.  When given, the
    gaze scores are centred on their calibration mean (``offset``), and with
    ``fit_lambda`` the weight is the closed-form least-squares fit of the
    calibration residuals ``y - S_host`` on the centred gaze scores.
    """
    if set(s_host) != set(s_gaze):
        raise ValueError("host and gaze score files cover different ids")
    if config.fit_lambda and not calibration:
        raise ValueError("fit_lambda needs a calibration split")
    offset, lam = 0.0, config.lam
    if calibration:
        cal = list(calibration)
        missing = [i for i in cal if i not in s_host]
        if missing:
            raise ValueError(f"calibration id {missing[0]!r} has no host score")
        g = np.array([s_gaze[i] for i in cal], dtype=np.float64)
        offset = float(g.mean())
        if config.fit_lambda:
            resid = np.array([calibration[i] - s_host[i] for i in cal], dtype=np.float64)
            lam = fit_lambda(resid, g - offset)
    out = {k: float(s_host[k]) + lam * (float(s_gaze[k]) - offset) for k in s_host}
    return Correction(out, lam, offset)


def load_host_scores(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                val = float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad host score record ({exc})") from None
            if not math.isfinite(val):
                raise ValueError(f"{path}:{lineno}: non-finite host score")
            out[str(obj["id"])] = val
    return out


def write_host_scores(path, scores: Mapping[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in scores.items():
            fh.write(json.dumps({"id": k, "score": float(v)}) + "\n")


# ---------------------------------------------------------------------------
# synthetic hosts


def semantic_host_features(encoder: SemanticEncoder, ids: Sequence[str], images) -> dict[str, np.ndarray]:
    """The hand-crafted content features (before projection) as a host's penultimate layer."""
    return dict(zip(ids, encoder.features(np.asarray(images))))


class PatchPoolNet(nn.Module):
    """Small convolutional host: patch conv, 1x1 conv, global average pooling, linear read-out."""

    def __init__(self, channels: int = 3, patch: int = 8, width: int = 32, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, width, kernel_size=patch, stride=patch)
        self.conv2 = nn.Conv2d(width, width, kernel_size=1)
        self.out = nn.Linear(width, 1)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in (self.conv1, self.conv2, self.out):
                fan_in = m.weight[0].numel()
                b = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * b - b)
                m.bias.zero_()

    def features(self, images: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2) - 0.5
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        return x.mean(dim=(2, 3))

    def forward(self, images):
        return self.out(self.features(images)).squeeze(-1)


def train_patch_pool_host(images_train, y_train, images_val, y_val, epochs: int = 40, seed: int = 0,
                          lr: float = 3e-3, batch_size: int = 64, patience: int = 10) -> PatchPoolNet:
    """Fit a :class:`PatchPoolNet` host on normalized targets with the hybrid loss."""
    xt = torch.as_tensor(np.asarray(images_train), dtype=torch.float32)
    xv = torch.as_tensor(np.asarray(images_val), dtype=torch.float32)
    y_train = np.asarray(y_train, dtype=np.float64)
    mu, sd = float(y_train.mean()), float(y_train.std()) or 1.0
    yt = torch.as_tensor((y_train - mu) / sd, dtype=torch.float32)
    net = PatchPoolNet(xt.shape[-1], seed=seed)
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.01)
    gen = torch.Generator().manual_seed(seed)
    best, stale, state = -math.inf, 0, copy.deepcopy(net.state_dict())
    total = epochs * math.ceil(len(xt) / batch_size)
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), batch_size):
            idx = perm[i: i + batch_size]
            if len(idx) < 2:
                continue
            for g in opt.param_groups:
                g["lr"] = cosine_lr(lr, step, total)
            loss = check_finite(hybrid_loss_torch(net(xt[idx]), yt[idx]), "patch-pool host")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        with torch.no_grad():
            pv = net(xv).double().numpy()
        val = pearson(pv, y_val) if np.ptp(pv) > 0 else 0.0
        if val > best:
            best, stale, state = val, 0, copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale > patience:
                break
    net.load_state_dict(state)
    net.eval()
    return net


@torch.no_grad()
def patch_pool_features(net: PatchPoolNet, ids: Sequence[str], images) -> dict[str, np.ndarray]:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return dict(zip(ids, net.features(x).double().numpy()))
