"""EMA teacher: parameter averaging and binarized pseudo-labels."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .augment import SpatialTransform, apply_transform
from .network import SegmentationModel, class_names, to_input
from .volume_io import MaskTensor, Volume


@dataclass
class TeacherState:
    model: SegmentationModel
    mu: float = 0.95
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 <= self.mu <= 1:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def ema_parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())


def init_teacher(m: SegmentationModel, mu: float = 0.95, threshold: float = 0.5) -> TeacherState:
    """Deep copy of the student, detached from autograd."""
    teacher = copy.deepcopy(m)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return TeacherState(teacher, mu=mu, threshold=threshold)


@torch.no_grad()
def update_teacher(t: TeacherState, m: SegmentationModel) -> None:
    """In place: ``ema <- mu * ema + (1 - mu) * student``."""
    student = dict(m.named_parameters())
    ema = dict(t.model.named_parameters())
    if student.keys() != ema.keys() or any(student[k].shape != ema[k].shape for k in ema):
        raise ValueError("teacher and student parameters are not congruent")
    for name, p in ema.items():
        p.mul_(t.mu).add_(student[name].detach(), alpha=1 - t.mu)


def binarize(x, threshold: float = 0.5):
    """Strict rule: values above ``threshold`` become 1, everything else 0."""
    return (x > threshold).to(x.dtype) if isinstance(x, torch.Tensor) else (x > threshold).astype(x.dtype)


@torch.no_grad()
def pseudo_labels(t: TeacherState, x: torch.Tensor, transforms: list[SpatialTransform]) -> torch.Tensor:
    """Batched pseudo-labels for untransformed inputs ``x`` of shape (B, 1, n, n, n)."""
    probs = t.model(x)
    out = torch.stack([apply_transform(tr, p) for tr, p in zip(transforms, probs)])
    return binarize(out, t.threshold)


def predict_pseudo_label(t: TeacherState, x_u: Volume, transform: SpatialTransform) -> MaskTensor:
    y = pseudo_labels(t, to_input([x_u]), [transform])[0].numpy()
    return MaskTensor(y, classes=class_names(y.shape[0]), binary=True)
