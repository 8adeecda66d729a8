"""Intensity windowing, grey erosion, exponential normalization and resizing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume_io import LabelVolume, Volume


@dataclass
class PreprocessConfig:
    vmin: float = 1100.0
    vmax: float = 1600.0
    exp_coef: float = 1.3
    erosion_window: tuple[int, int, int] = (2, 2, 1)
    std_epsilon: float = 1e-6
    exp_clamp: float = 20.0
    target_dims: tuple[int, int, int] = (128, 128, 128)
    xy_resize: int = 192
    xy_border_crop: int = 32

    def __post_init__(self):
        self.erosion_window = tuple(int(w) for w in self.erosion_window)
        self.target_dims = tuple(int(d) for d in self.target_dims)
        if not self.vmin < self.vmax:
            raise ValueError("vmin must be below vmax")
        if self.exp_coef <= 0:
            raise ValueError("exp_coef must be positive")
        if min(self.erosion_window) < 1:
            raise ValueError("erosion window components must be >= 1")
        if 2 * self.xy_border_crop >= self.xy_resize:
            raise ValueError("border crop larger than the resized XY extent")
        xy = self.xy_resize - 2 * self.xy_border_crop
        if self.target_dims[:2] != (xy, xy):
            raise ValueError(
                f"xy_resize - 2*xy_border_crop = {xy} does not match target_dims {self.target_dims}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def _like(v, data: np.ndarray):
    if isinstance(v, Volume):
        return Volume(data, spacing=v.spacing, name=v.name)
    return data


def clip_window(v, vmin: float, vmax: float):
    """Zero every voxel strictly outside ``[vmin, vmax]``."""
    data = np.array(_arr(v), dtype=np.float64)
    data[(data < vmin) | (data > vmax)] = 0
    return _like(v, data)


def _window_offsets(w: int) -> tuple[int, int]:
    # even windows lean backwards: w=2 covers offsets {-1, 0}
    before = w // 2
    return before, w - 1 - before


def grey_erosion(v, window=(2, 2, 1)):
    """Moving minimum over a box window with mirror-reflected borders.

    The box minimum is separable, so the filter runs one axis at a time.
    """
    data = np.asarray(_arr(v), dtype=np.float64)
    window = tuple(int(w) for w in window)
    if len(window) != data.ndim or min(window) < 1:
        raise ValueError(f"bad erosion window {window}")
    for axis, (w, n) in enumerate(zip(window, data.shape)):
        if w > n:
            raise ValueError(f"erosion window {window} larger than volume {data.shape}")
        if w == 1:
            continue
        before, after = _window_offsets(w)
        pad = [(0, 0)] * data.ndim
        pad[axis] = (before, after)
        padded = np.pad(data, pad, mode="symmetric")
        out = None
        for k in range(w):
            piece = np.take(padded, np.arange(k, k + n), axis=axis)
            out = piece if out is None else np.minimum(out, piece)
        data = out
    return _like(v, data)


def mask_zero(v, eroded):
    """Zero the voxels of ``v`` where ``eroded`` is zero."""
    data = np.array(_arr(v), dtype=np.float64)
    mask = _arr(eroded)
    if mask.shape != data.shape:
        raise ValueError(f"shape mismatch {data.shape} vs {mask.shape}")
    data[mask == 0] = 0
    return _like(v, data)


def normalize_exp(v, exp_coef: float = 1.3, std_epsilon: float = 1e-6, exp_clamp: float = 20.0):
    """Standardize around twice the mean, exponentiate and min-max rescale to [0, 1].

    A constant input has no contrast to rescale and maps to all zeros.
    """
    data = np.array(_arr(v), dtype=np.float64)
    if data.size < 2:
        raise ValueError("normalize_exp needs more than one voxel")
    if data.max() == data.min():
        return _like(v, np.zeros_like(data))
    data -= 2 * data.mean()
    data /= data.std() + std_epsilon
    np.clip(data, -exp_clamp, exp_clamp, out=data)
    data = np.exp(exp_coef * data)
    data -= data.min()
    span = data.max()
    if span == 0:
        return _like(v, np.zeros_like(data))
    data /= span
    return _like(v, data)


def _zoom_to(data: np.ndarray, shape, order: int) -> np.ndarray:
    if tuple(shape) == data.shape:
        return data
    factors = [t / s for t, s in zip(shape, data.shape)]
    out = ndimage.zoom(data, factors, order=order, mode="nearest", grid_mode=True)
    if out.shape != tuple(shape):
        raise RuntimeError(f"zoom produced {out.shape}, wanted {tuple(shape)}")
    return out


def resize_crop(v, cfg: PreprocessConfig):
    """Resize XY to ``xy_resize``, crop the XY border and resize Z.

    Intensity volumes use trilinear interpolation; a :class:`LabelVolume`
    uses nearest neighbour so labels stay valid.
    """
    is_label = isinstance(v, LabelVolume)
    data = v.labels if is_label else _arr(v)
    order = 0 if is_label else 1
    if not is_label:
        data = np.asarray(data, dtype=np.float64)
    data = _zoom_to(data, (cfg.xy_resize, cfg.xy_resize, data.shape[2]), order)
    c = cfg.xy_border_crop
    if c:
        data = data[c:-c, c:-c, :]
    data = _zoom_to(data, (data.shape[0], data.shape[1], cfg.target_dims[2]), order)
    if is_label:
        return LabelVolume(data.astype(np.int16), name=v.name)
    return _like(v, data)


def preprocess_pipeline(v, cfg: PreprocessConfig | None = None):
    cfg = cfg or PreprocessConfig()
    out = resize_crop(v, cfg)
    out = clip_window(out, cfg.vmin, cfg.vmax)
    eroded = grey_erosion(out, cfg.erosion_window)
    out = mask_zero(out, eroded)
    return normalize_exp(out, cfg.exp_coef, cfg.std_epsilon, cfg.exp_clamp)
