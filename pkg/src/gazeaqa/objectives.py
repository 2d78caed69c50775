"""Regression objectives: MSE, differentiable Pearson correlation and their hybrid.

The numpy functions return values together with closed-form gradients with
respect to the predictions; the ``*_torch`` twins compute the same
quantities on tensors for use inside training loops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class NonFiniteLossError(FloatingPointError):
    """A training loss became NaN or infinite."""


def check_finite(loss: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"{where}: loss is {loss.item()}")
    return loss


@dataclass(frozen=True)
class HybridLossConfig:
    lam: float = 0.5
    eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray
    degenerate: bool = False


def _as_batch(pred, target, min_n):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"prediction/target length mismatch: {pred.size} vs {target.size}")
    if pred.size < min_n:
        raise ValueError(f"need at least {min_n} samples, got {pred.size}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite values in score batch")
    return pred, target


def mse(pred, target) -> LossValue:
    pred, target = _as_batch(pred, target, 1)
    r = pred - target
    return LossValue(float(np.mean(r * r)), 2.0 * r / r.size)


def plcc_differentiable(pred, target, eps: float = 1e-8) -> LossValue:
    """Pearson correlation with ``eps`` added under each square root.

    With centred vectors ``a`` (predictions) and ``b`` (targets),
    ``r = <a,b> / (sqrt(|a|^2 + eps) sqrt(|b|^2 + eps))`` and
    ``dr/dpred = b/(A B) - r a/A^2`` where ``A, B`` are the guarded norms;
    the centring projection is absorbed because ``a`` and ``b`` have zero mean.
    ``degenerate`` is set when either input has (numerically) zero variance.
    """
    pred, target = _as_batch(pred, target, 2)
    a = pred - pred.mean()
    b = target - target.mean()
    saa, sbb = float(a @ a), float(b @ b)
    A = np.sqrt(saa + eps)
    B = np.sqrt(sbb + eps)
    r = float(a @ b) / (A * B)
    grad = b / (A * B) - r * a / (A * A)
    degenerate = saa <= eps or sbb <= eps
    return LossValue(r, grad, degenerate)


def hybrid_loss(pred, target, config: HybridLossConfig = HybridLossConfig()) -> LossValue:
    """``mse + lam * (1 - plcc)`` and its gradient."""
    m = mse(pred, target)
    p = plcc_differentiable(pred, target, config.eps)
    return LossValue(m.value + config.lam * (1.0 - p.value), m.grad - config.lam * p.grad, p.degenerate)


def mse_torch(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean((pred - target) ** 2)


def plcc_torch(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    if pred.numel() < 2:
        raise ValueError("correlation term needs at least 2 samples")
    a = pred - pred.mean()
    b = target - target.mean()
    return (a * b).sum() / (torch.sqrt((a * a).sum() + eps) * torch.sqrt((b * b).sum() + eps))


def hybrid_loss_torch(pred: torch.Tensor, target: torch.Tensor,
                      config: HybridLossConfig = HybridLossConfig()) -> torch.Tensor:
    loss = mse_torch(pred, target)
    if config.lam:
        loss = loss + config.lam * (1.0 - plcc_torch(pred, target, config.eps))
    return loss
