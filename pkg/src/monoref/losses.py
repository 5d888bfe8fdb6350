"""Confidence-aware pairwise loss and iteration-weighted refinement loss.

Both compare scale-normalised pointmaps: each map is divided by its own
norm factor (mean valid-point distance to the origin) before taking the
per-pixel Euclidean distance, which is then averaged over valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .pointmap import ConfidenceMap, Pointmap
from .tensor import Tensor

__all__ = [
    "LossConfig",
    "iteration_weights",
    "normalized_residual",
    "loss_refine",
    "loss_pair",
    "total_loss",
    "confidence_from_raw",
]


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.9
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"LossConfig: gamma must be in (0, 1], got {self.gamma}")
        if self.alpha < 0.0:
            raise ValueError(f"LossConfig: alpha must be >= 0, got {self.alpha}")


def iteration_weights(n_iters: int, gamma: float = 0.9) -> list[float]:
    """Weights gamma**(N - v) for v = 1..N; the last iterate gets 1."""
    if n_iters < 1:
        raise ValueError("iteration_weights: need at least one iteration")
    return [gamma ** (n_iters - v) for v in range(1, n_iters + 1)]


def confidence_from_raw(raw):
    """Map an unconstrained score to a confidence ``1 + exp(raw)`` (always > 1)."""
    if isinstance(raw, Tensor):
        return T.add(1.0, T.exp(raw))
    return 1.0 + np.exp(raw)


def _as_grid(p) -> Tensor:
    if isinstance(p, Pointmap):
        return p.to_tensor()
    if isinstance(p, Tensor):
        return p
    return Tensor(np.asarray(p, dtype=np.float64))


def _norm_factor_t(p: Tensor, mask: Tensor, count: float) -> Tensor:
    return T.div(T.tsum(T.mul(T.channel_norm(p), mask)), count)


def normalized_residual(pred, gt: Pointmap) -> tuple[Tensor, Tensor, float]:
    """Per-pixel ``||pred / z - gt / z_gt||`` (1×1×H×W), the valid mask and the valid count."""
    if gt.n_valid == 0:
        raise ValueError("loss: ground truth has no valid pixels")
    p = _as_grid(pred)
    if p.shape != (1, 3) + gt.shape:
        raise T.ShapeError(f"loss: prediction shape {p.shape} does not match ground truth {gt.shape}")
    valid = gt.valid
    if isinstance(pred, Pointmap):
        valid = valid & pred.valid
    count = float(valid.sum())
    if count == 0:
        raise ValueError("loss: no jointly valid pixels")
    mask = Tensor(valid.astype(np.float64)[None, None])
    g = gt.to_tensor()
    z = _norm_factor_t(p, mask, count)
    if z.item() == 0.0:
        raise ValueError("loss: prediction norm factor is zero")
    z_gt = _norm_factor_t(g, mask, count)
    res = T.channel_norm(T.sub(T.div(p, z), T.div(g, z_gt)))
    return T.mul(res, mask), mask, count


def loss_refine(preds: Sequence[Sequence], gts: Sequence[Pointmap], cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over iterations v and views of gamma**(N-v) * mean valid normalised residual.

    ``preds[view]`` lists the iterates ``[P^1, ..., P^N]`` of that view.
    """
    if len(preds) != len(gts):
        raise ValueError(f"loss_refine: {len(preds)} prediction views but {len(gts)} ground-truth views")
    total = Tensor(0.0)
    for iterates, gt in zip(preds, gts):
        if len(iterates) < 1:
            raise ValueError("loss_refine: need at least one iterate per view")
        for weight, pred in zip(iteration_weights(len(iterates), cfg.gamma), iterates):
            res, _, count = normalized_residual(pred, gt)
            total = T.add(total, T.mul(weight / count, T.tsum(res)))
    return total


def loss_pair(P0s: Sequence, w0s: Sequence, gts: Sequence[Pointmap], cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over views of mean valid ``w * residual - alpha * log w``."""
    if not len(P0s) == len(w0s) == len(gts):
        raise ValueError("loss_pair: views, confidences and ground truths differ in count")
    total = Tensor(0.0)
    for p0, w0, gt in zip(P0s, w0s, gts):
        res, mask, count = normalized_residual(p0, gt)
        w = w0.to_tensor() if isinstance(w0, ConfidenceMap) else _as_grid(w0)
        if w.shape != (1, 1) + gt.shape:
            raise T.ShapeError(f"loss_pair: confidence shape {w.shape} does not match {gt.shape}")
        used = mask.data > 0
        if (w.data[used] <= 0).any():
            raise ValueError("loss_pair: confidence must be positive on valid pixels")
        w_safe = T.add(T.mul(w, mask), 1.0 - mask.data)
        per_px = T.sub(T.mul(w_safe, res), T.mul(cfg.alpha, T.mul(T.log(w_safe), mask)))
        total = T.add(total, T.div(T.tsum(per_px), count))
    return total


def total_loss(pair_term, refine_term) -> Tensor:
    return T.add(pair_term, refine_term)
