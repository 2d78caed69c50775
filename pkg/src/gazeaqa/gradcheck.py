"""Central finite-difference checks for analytic and autograd gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch


def relative_error(analytic, numeric, floor: float = 1e-4) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; the floor guards near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (all coordinates, or the flat indices ``coords``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        hi = f(x)
        flat[i] = old - step
        lo = f(x)
        flat[i] = old
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def check_parameters(loss_fn: Callable[[], torch.Tensor], params: Iterable[tuple[str, torch.Tensor]],
                     coords_per_tensor: int = 32, step: float = 1e-5, seed: int = 0,
                     floor: float = 1e-4) -> dict[str, float]:
    """Worst relative error per parameter tensor between autograd and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values.  Up to ``coords_per_tensor`` flat coordinates are sampled per
    tensor (all of them for smaller tensors).
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.Generator(np.random.Philox(seed))
    worst = {}
    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        n = p.numel()
        coords = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        flat = p.data.view(-1)
        errs = []
        with torch.no_grad():
            for i in coords:
                old = flat[i].item()
                flat[i] = old + step
                hi = loss_fn().item()
                flat[i] = old - step
                lo = loss_fn().item()
                flat[i] = old
                num = (hi - lo) / (2 * step)
                errs.append(relative_error(g.reshape(-1)[i].item(), num, floor))
        worst[name] = float(np.max(errs))
    return worst
