"""DICE metric, Generalized Dice loss, Focal loss and their weighted sum.

Losses are torch functions over tensors shaped ``(C, X, Y, Z)`` or
``(B, C, X, Y, Z)``; the class axis is always the fourth from the end.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .volume_io import MaskTensor

PROB_CLAMP = 1e-6
_SPATIAL = (-3, -2, -1)


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: list[float] = field(default_factory=lambda: [0.8, 0.9, 1.5])
    w_gdl: float = 1.0
    w_fl: float = 0.8
    epsilon: float = 1e-5
    reduction: str = "mean"

    def __post_init__(self):
        self.alpha = [float(a) for a in self.alpha]
        if self.gamma < 0 or min(self.alpha, default=0) < 0 or self.w_gdl < 0 or self.w_fl < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, MaskTensor) else np.asarray(m)


def dice_score(pred, target, epsilon: float = 1e-5) -> list[float]:
    """Soft DICE per class with squared terms in the denominator."""
    p = _values(pred).astype(np.float64)
    y = _values(target).astype(np.float64)
    if p.shape != y.shape or p.ndim != 4:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    if isinstance(pred, MaskTensor) and isinstance(target, MaskTensor) and pred.classes != target.classes:
        raise ValueError(f"class mismatch: {pred.classes} vs {target.classes}")
    scores = []
    # fsum is correctly rounded, so the score does not depend on voxel order
    for pc, yc in zip(p.reshape(len(p), -1), y.reshape(len(y), -1)):
        inter = math.fsum(pc * yc)
        denom = math.fsum(pc * pc) + math.fsum(yc * yc)
        scores.append((2 * inter + epsilon) / (denom + epsilon))
    return scores


def _check(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape or pred.ndim not in (4, 5):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def gdl_weights(target: torch.Tensor) -> torch.Tensor:
    """Per-class ``1 / (sum y)^2``; absent classes borrow the largest present weight."""
    volume = target.detach().sum(dim=_SPATIAL)
    present = volume > 0
    w = torch.where(present, 1.0 / volume.clamp_min(1e-12) ** 2, torch.zeros_like(volume))
    cap = w.max(dim=-1, keepdim=True).values
    return torch.where(present, w, cap.expand_as(w))


def generalized_dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """Class-weighted soft Dice loss, averaged over the batch.

    A target with no foreground in any class carries no weight at all; the
    loss is then defined as 0 for that sample.
    """
    _check(pred, target)
    if pred.ndim == 4:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    w = gdl_weights(target)
    inter = (w * (pred * target).sum(dim=_SPATIAL)).sum(dim=-1)
    denom = (w * ((pred * pred).sum(dim=_SPATIAL) + (target * target).sum(dim=_SPATIAL))).sum(dim=-1)
    loss = 1 - 2 * (inter + epsilon) / (denom + epsilon)
    empty = (w.sum(dim=-1) == 0)
    loss = torch.where(empty, torch.zeros_like(loss), loss)
    return loss.mean()


def focal_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    _check(pred, target)
    n_classes = pred.shape[-4]
    if len(cfg.alpha) != n_classes:
        raise ValueError(f"alpha has {len(cfg.alpha)} entries for {n_classes} classes")
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    alpha = torch.tensor(cfg.alpha, dtype=pred.dtype, device=pred.device).view(n_classes, 1, 1, 1)
    g = cfg.gamma
    terms = target * (1 - p) ** g * torch.log(p) + (1 - target) * p**g * torch.log1p(-p)
    terms = -alpha * terms
    return terms.mean() if cfg.reduction == "mean" else terms.sum()


def combined_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return cfg.w_gdl * generalized_dice_loss(pred, target, cfg.epsilon) + cfg.w_fl * focal_loss(pred, target, cfg)
