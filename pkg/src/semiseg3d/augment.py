"""Exact rotations and flips of cubic grids, replayable from a seed.

A transform is a signed permutation of the three spatial axes: the output is
``flip(transpose(x, perm), axes where signs)``.  The 24 proper rotations plus
their mirror images give the full 48-element group.  Voxels are relocated,
never interpolated, so binary masks stay binary.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
import torch

from .volume_io import MaskTensor, Volume


@dataclass(frozen=True)
class SpatialTransform:
    perm: tuple[int, int, int] = (0, 1, 2)
    signs: tuple[bool, bool, bool] = (False, False, False)
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "perm", tuple(int(p) for p in self.perm))
        object.__setattr__(self, "signs", tuple(bool(s) for s in self.signs))
        if sorted(self.perm) != [0, 1, 2] or len(self.signs) != 3:
            raise ValueError(f"not a signed axis permutation: {self.perm}, {self.signs}")

    @property
    def key(self) -> tuple:
        """Group element identity, ignoring the seed that produced it."""
        return self.perm, self.signs

    @property
    def is_rotation(self) -> bool:
        """True for the proper rotations (determinant +1)."""
        return np.linalg.det(self.matrix()) > 0

    def matrix(self) -> np.ndarray:
        """Signed permutation matrix mapping input axis vectors to output axes."""
        m = np.zeros((3, 3), dtype=int)
        for out_axis, in_axis in enumerate(self.perm):
            m[out_axis, in_axis] = -1 if self.signs[out_axis] else 1
        return m

    def to_json(self) -> str:
        return json.dumps(
            {"perm": list(self.perm), "signs": [int(s) for s in self.signs], "seed": self.seed},
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialTransform":
        return cls(tuple(d["perm"]), tuple(bool(s) for s in d["signs"]), d.get("seed"))


GROUP: tuple[SpatialTransform, ...] = tuple(
    SpatialTransform(perm, signs)
    for perm in itertools.permutations(range(3))
    for signs in itertools.product((False, True), repeat=3)
)
IDENTITY = GROUP[0]


def sample_transform(seed: int) -> SpatialTransform:
    """Draw one of the 48 group elements uniformly, deterministically in ``seed``."""
    idx = int(np.random.default_rng(seed).integers(len(GROUP)))
    element = GROUP[idx]
    return SpatialTransform(element.perm, element.signs, seed)


def invert(t: SpatialTransform) -> SpatialTransform:
    inv = tuple(int(i) for i in np.argsort(t.perm))
    # a flip of output axis i undoes onto input axis perm[i]
    signs = tuple(t.signs[inv[j]] for j in range(3))
    return SpatialTransform(inv, signs, t.seed)


def compose(a: SpatialTransform, b: SpatialTransform) -> SpatialTransform:
    """The transform equal to applying ``b`` first, then ``a``."""
    m = a.matrix() @ b.matrix()
    perm = tuple(int(np.flatnonzero(row)[0]) for row in m)
    signs = tuple(bool(row[p] < 0) for row, p in zip(m, perm))
    return SpatialTransform(perm, signs)


def _apply_array(t: SpatialTransform, x):
    """Transform the last three axes of a numpy array or torch tensor."""
    lead = x.ndim - 3
    if lead < 0:
        raise ValueError(f"need at least 3 spatial axes, got shape {tuple(x.shape)}")
    spatial = tuple(x.shape[lead:])
    if len(set(spatial)) != 1:
        raise ValueError(f"exact transforms require a cubic grid, got {spatial}")
    order = list(range(lead)) + [lead + p for p in t.perm]
    flips = [lead + i for i, s in enumerate(t.signs) if s]
    if isinstance(x, torch.Tensor):
        out = x.permute(*order)
        return out.flip(flips).contiguous() if flips else out.contiguous()
    out = np.transpose(x, order)
    if flips:
        out = np.flip(out, axis=flips)
    return np.ascontiguousarray(out)


def apply_transform(t: SpatialTransform, x):
    """Apply ``t`` to a Volume, MaskTensor (channel-wise), ndarray or tensor."""
    if isinstance(x, Volume):
        return Volume(_apply_array(t, x.data), spacing=x.spacing, name=x.name)
    if isinstance(x, MaskTensor):
        return MaskTensor(_apply_array(t, x.values), classes=list(x.classes), binary=x.binary)
    return _apply_array(t, x)
