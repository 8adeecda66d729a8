"""Volume and label storage, class masks and synthetic vascular phantoms.

Arrays are indexed ``[x, y, z]``.  On disk the x index varies fastest, so the
payload is written in Fortran order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

LABEL_NAMES = {0: "background", 1: "TL", 2: "FL", 3: "FLT"}
DEFAULT_CLASS_SPEC: dict[str, tuple[int, ...]] = {
    "ALL": (1, 2, 3),
    "TL": (1,),
    "FL": (2,),
}

VOL1_MAGIC = b"VOL1"
VOL1_HEADER_SIZE = 64
_VOL1_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i2")}


class VolumeFormatError(ValueError):
    """Raised for malformed or unsupported volume files."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] | None = None
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {self.labels.shape}")
        check_labels(self.labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class MaskTensor:
    """Per-class channels ``(C, nx, ny, nz)`` with values in [0, 1]."""

    values: np.ndarray
    classes: list[str] = field(default_factory=lambda: list(DEFAULT_CLASS_SPEC))
    binary: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4 or self.values.shape[0] != len(self.classes):
            raise ValueError(
                f"mask shape {self.values.shape} does not match {len(self.classes)} classes"
            )
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if self.binary and not np.isin(self.values, (0, 1)).all():
            raise ValueError("binary mask holds values other than 0 and 1")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass
class Sample:
    """One case of a dataset; ``mask`` is None for unlabeled cases."""

    name: str
    image: Volume
    mask: MaskTensor | None = None


@dataclass
class DatasetSplit:
    labeled: list[Sample]
    unlabeled: list[Sample]
    split_seed: int = 0

    def __post_init__(self):
        shared = {s.name for s in self.labeled} & {s.name for s in self.unlabeled}
        if shared:
            raise ValueError(f"samples both labeled and unlabeled: {sorted(shared)}")


def check_labels(labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() > 3 or not np.all(labels == np.round(labels))):
        bad = np.unique(labels[(labels < 0) | (labels > 3) | (labels != np.round(labels))])
        raise ValueError(f"labels outside {{0,1,2,3}}: {bad[:10].tolist()}")


# --------------------------------------------------------------------- VOL1


def _pack_vol1_header(dtype_code: int, dims, spacing) -> bytes:
    spacing = (0.0, 0.0, 0.0) if spacing is None else spacing
    head = VOL1_MAGIC + struct.pack("<B3I3f", dtype_code, *map(int, dims), *map(float, spacing))
    return head.ljust(VOL1_HEADER_SIZE, b"\0")


def _write_vol1(path, array: np.ndarray, dtype_code: int, spacing=None) -> None:
    payload = np.asarray(array, dtype=_VOL1_DTYPES[dtype_code]).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(_pack_vol1_header(dtype_code, array.shape, spacing))
        fh.write(payload)


def _read_vol1(path):
    raw = Path(path).read_bytes()
    if len(raw) < VOL1_HEADER_SIZE or raw[:4] != VOL1_MAGIC:
        raise VolumeFormatError(f"{path}: not a VOL1 file")
    code, nx, ny, nz, sx, sy, sz = struct.unpack_from("<B3I3f", raw, 4)
    if code not in _VOL1_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype code {code}")
    dtype = _VOL1_DTYPES[code]
    expected = nx * ny * nz * dtype.itemsize
    payload = raw[VOL1_HEADER_SIZE:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F").copy()
    spacing = None if (sx, sy, sz) == (0.0, 0.0, 0.0) else (sx, sy, sz)
    return data, spacing, code


# -------------------------------------------------------------------- NIfTI

_NIFTI_DTYPES = {16: np.dtype("f4"), 4: np.dtype("i2")}


def _read_nifti(path):
    raw = Path(path).read_bytes()
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: truncated NIfTI header")
    endian = "<" if struct.unpack_from("<i", raw, 0)[0] == 348 else ">"
    if struct.unpack_from(endian + "i", raw, 0)[0] != 348:
        raise VolumeFormatError(f"{path}: bad sizeof_hdr")
    if raw[344:347] != b"n+1":
        raise VolumeFormatError(f"{path}: only single-file NIfTI-1 (n+1) is supported")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    if dim[0] != 3 and not (dim[0] > 3 and all(d == 1 for d in dim[4 : dim[0] + 1])):
        raise VolumeFormatError(f"{path}: expected a 3D image, dim={dim}")
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    nx, ny, nz = dim[1:4]
    expected = nx * ny * nz * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    data = data.astype(dtype.newbyteorder("="))
    return data, tuple(float(p) for p in pixdim[1:4])


def _write_nifti(path, array: np.ndarray, spacing=None) -> None:
    if array.dtype.kind == "f":
        datatype, arr = 16, np.asarray(array, dtype="<f4")
    else:
        datatype, arr = 4, np.asarray(array, dtype="<i2")
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", header, 70, datatype, arr.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *(spacing or (1.0, 1.0, 1.0)), 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    header[344:348] = b"n+1\0"
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(arr.ravel(order="F").tobytes())


def _is_nifti(path) -> bool:
    return str(path).endswith(".nii")


def load_volume(path) -> Volume:
    """Read a VOL1 or uncompressed single-file NIfTI-1 volume."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if _is_nifti(path):
        data, spacing = _read_nifti(path)
    else:
        data, spacing, _ = _read_vol1(path)
    return Volume(data, spacing=spacing, name=path.stem)


def save_volume(v: Volume, path) -> None:
    """Write ``v`` so that :func:`load_volume` reproduces it exactly.

    Floating data is stored as float32, integer data as int16.
    """
    if _is_nifti(path):
        _write_nifti(path, v.data, v.spacing)
    else:
        code = 0 if v.data.dtype.kind == "f" else 1
        _write_vol1(path, v.data, code, v.spacing)


def load_labels(path) -> LabelVolume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if _is_nifti(path):
        data, _ = _read_nifti(path)
    else:
        data, _, _ = _read_vol1(path)
    return LabelVolume(data.astype(np.int16), name=path.stem)


def save_labels(lv: LabelVolume, path, sidecar: bool = False) -> None:
    arr = np.asarray(lv.labels, dtype=np.int16)
    if _is_nifti(path):
        _write_nifti(path, arr)
    else:
        _write_vol1(path, arr, 1)
    if sidecar:
        names = {str(k): v for k, v in LABEL_NAMES.items() if k}
        Path(str(path) + ".json").write_text(json.dumps({"labels": names}, indent=2) + "\n")


def labels_to_masks(
    lv: LabelVolume | np.ndarray, class_spec: Mapping[str, Sequence[int]] | None = None
) -> MaskTensor:
    """Binary per-class channels; channel ``c`` is 1 where the label is in ``class_spec[c]``."""
    labels = lv.labels if isinstance(lv, LabelVolume) else np.asarray(lv)
    check_labels(labels)
    class_spec = DEFAULT_CLASS_SPEC if class_spec is None else class_spec
    values = np.stack([np.isin(labels, list(members)) for members in class_spec.values()])
    return MaskTensor(values.astype(np.float32), classes=list(class_spec), binary=True)


# ------------------------------------------------------------------ phantoms


@dataclass
class PhantomParams:
    """Geometry and raw-unit intensities of the synthetic aorta phantom.

    Intensities mimic CTA scanner units so the default preprocessing window
    (1100, 1600) applies unchanged.
    """

    tl_radius: float = 3.0
    fl_radius: float = 4.0
    flt_radius: float = 3.0
    radius_jitter: float = 0.2
    flt_probability: float = 0.68
    background: float = 1000.0
    tissue: float = 1180.0
    tl_intensity: float = 1450.0
    fl_intensity: float = 1320.0
    flt_intensity: float = 1200.0
    noise_std: float = 45.0
    n_distractors: int = 3
    distractor_radius: float = 3.0
    distractor_intensity: float = 1400.0


def _tube_distance(shape, center_xy: np.ndarray) -> np.ndarray:
    """In-plane distance from each voxel to a centerline given per z slice."""
    x = np.arange(shape[0])[:, None, None]
    y = np.arange(shape[1])[None, :, None]
    return np.hypot(x - center_xy[None, None, :, 0], y - center_xy[None, None, :, 1])


def generate_phantom(seed: int, dims, params: PhantomParams | None = None):
    """Build a (Volume, LabelVolume) pair with a true/false lumen tube pair.

    Two touching-free curved tubes run along z: the true lumen (label 1) and the
    false lumen (label 2).  With probability ``flt_probability`` a thrombus blob
    (label 3) is attached to the outer wall of the false lumen.  Unlabeled bright
    blobs act as distractors.  Deterministic in ``(seed, dims, params)``.
    """
    p = params or PhantomParams()
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or len(set(dims)) != 1:
        raise ValueError(f"phantom dims must be cubic, got {dims}")
    n = dims[0]
    contrast = min(abs(p.tl_intensity - p.background), abs(p.fl_intensity - p.background))
    if contrast < 3 * p.noise_std:
        raise ValueError("tube/background contrast must be at least 3x the noise std")

    rng = np.random.default_rng(seed)
    jitter = 1 + p.radius_jitter * rng.uniform(-1, 1, size=3)
    r_tl, r_fl, r_flt = p.tl_radius * jitter[0], p.fl_radius * jitter[1], p.flt_radius * jitter[2]
    gap = 1.0
    sep = r_tl + r_fl + gap
    # both tubes must stay inside the grid while the pair wobbles; the
    # thrombus blob may be clipped by the border
    extent = max(sep * r_fl / (r_tl + r_fl) + r_fl, sep * r_tl / (r_tl + r_fl) + r_tl)
    amp_max = (n - 1) / 2 - extent - 0.5
    if amp_max <= 0:
        raise ValueError(f"radii too large for a {n}^3 phantom")

    z = np.arange(n)
    amp = rng.uniform(0.3, 1.0, size=2) * amp_max
    freq = rng.uniform(0.5, 1.5, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    mid = (n - 1) / 2
    pair_center = np.stack(
        [mid + amp[i] * np.sin(2 * np.pi * freq[i] * z / n + phase[i]) for i in range(2)], axis=1
    )
    # the pair slowly twists around its common center
    theta0 = rng.uniform(0, 2 * np.pi)
    twist = rng.uniform(-np.pi / 2, np.pi / 2)
    theta = theta0 + twist * z / n
    direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    tl_center = pair_center - direction * (sep * r_tl / (r_tl + r_fl))
    fl_center = pair_center + direction * (sep * r_fl / (r_tl + r_fl))

    labels = np.zeros(dims, dtype=np.int16)
    d_tl = _tube_distance(dims, tl_center)
    d_fl = _tube_distance(dims, fl_center)
    labels[d_fl <= r_fl] = 2
    labels[d_tl <= r_tl] = 1

    if rng.random() < p.flt_probability:
        zc = rng.uniform(0.25, 0.75) * (n - 1)
        k = int(round(zc))
        blob_center = np.array([*(fl_center[k] + direction[k] * (r_fl + 0.5 * r_flt)), zc])
        grid = np.indices(dims, dtype=float)
        d_blob = np.sqrt(sum((grid[i] - blob_center[i]) ** 2 for i in range(3)))
        labels[(d_blob <= r_flt) & (labels == 0)] = 3

    image = np.full(dims, p.background, dtype=np.float64)
    # low-contrast soft tissue ramp around the vessels
    image[(np.minimum(d_tl, d_fl) <= max(r_tl, r_fl) + 3) & (labels == 0)] = p.tissue
    grid = np.indices(dims, dtype=float)
    for _ in range(p.n_distractors):
        c = rng.uniform(p.distractor_radius, n - 1 - p.distractor_radius, size=3)
        d = np.sqrt(sum((grid[i] - c[i]) ** 2 for i in range(3)))
        image[(d <= p.distractor_radius) & (labels == 0)] = p.distractor_intensity
    image[labels == 1] = p.tl_intensity
    image[labels == 2] = p.fl_intensity
    image[labels == 3] = p.flt_intensity
    image += rng.normal(0.0, p.noise_std, size=dims) if p.noise_std > 0 else 0.0

    name = f"phantom_{seed:05d}"
    return Volume(image.astype(np.float32), spacing=(1.0, 1.0, 1.0), name=name), LabelVolume(labels, name=name)
