"""Compact multi-output 3D segmentation network and its checkpoint format.

The trunk is a strided convolutional encoder, a bottleneck with a learned
additive positional encoding, and a skip-connected decoder.  Each class gets
its own output block ending in a logistic unit, so channels never compete.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .volume_io import MaskTensor, Volume

CLASS_NAMES = ["ALL", "TL", "FL"]


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    downscale_factor: int = 2
    bottleneck_dim: int = 32
    head_channels: int = 4
    input_size: int = 32

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be a non-empty list of positive widths")
        if self.input_size % self.total_downscale:
            raise ValueError(
                f"input size {self.input_size} not divisible by {self.total_downscale}"
            )

    @property
    def total_downscale(self) -> int:
        return self.downscale_factor ** (len(self.stage_channels) - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(channels: int) -> int:
    # at least two channels per group so per-channel biases keep a gradient
    for g in (4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(_groups(cout), cout),
        nn.LeakyReLU(0.1),
    )


class OutputHead(nn.Module):
    def __init__(self, cin: int, width: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, width, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)
        self.out = nn.Conv3d(width, 1, 1)

    def forward(self, x):
        return torch.sigmoid(self.out(self.act(self.conv(x))))


class SegmentationModel(nn.Module):
    """Parameters are grouped as ``encoder.*``, ``bottleneck.*``, ``decoder.*``
    (the shared trunk) and ``heads.<c>.*`` (one group per class)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        f = cfg.downscale_factor
        self.encoder = nn.ModuleList(
            [_conv_block(cfg.in_channels, ch[0])]
            + [_conv_block(ch[i - 1], ch[i], stride=f) for i in range(1, len(ch))]
        )
        side = cfg.input_size // cfg.total_downscale
        self.bottleneck = nn.ModuleDict(
            {
                "proj": nn.Conv3d(ch[-1], cfg.bottleneck_dim, 1),
                "mix": _conv_block(cfg.bottleneck_dim, ch[-1]),
            }
        )
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.bottleneck_dim, side, side, side) * 0.02)
        self.decoder = nn.ModuleList()
        for i in range(len(ch) - 1, 0, -1):
            self.decoder.append(
                nn.ModuleDict(
                    {
                        "up": nn.ConvTranspose3d(ch[i], ch[i - 1], f, stride=f),
                        "fuse": _conv_block(2 * ch[i - 1], ch[i - 1]),
                    }
                )
            )
        self.heads = nn.ModuleList([OutputHead(ch[0], cfg.head_channels) for _ in range(cfg.num_classes)])

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        side = self.cfg.input_size
        if x.ndim != 5 or tuple(x.shape[1:]) != (self.cfg.in_channels, side, side, side):
            raise ValueError(
                f"expected input (B, {self.cfg.in_channels}, {side}, {side}, {side}), got {tuple(x.shape)}"
            )
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        x = self.bottleneck["proj"](x) + self.pos_embed
        x = self.bottleneck["mix"](x)
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            x = stage["fuse"](torch.cat([stage["up"](x), skip], dim=1))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.trunk(x)
        return torch.cat([head(features) for head in self.heads], dim=1)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"trunk": []}
        for name, _ in self.named_parameters():
            if name.startswith("heads."):
                groups.setdefault(f"head{name.split('.')[1]}", []).append(name)
            else:
                groups["trunk"].append(name)
        return groups


def build_model(cfg: NetworkConfig | None = None, init_seed: int = 0) -> SegmentationModel:
    """Deterministically initialized model; the global torch RNG is left untouched."""
    cfg = cfg or NetworkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = SegmentationModel(cfg)
    return model


def to_input(volumes) -> torch.Tensor:
    """Stack Volumes or arrays into a ``(B, 1, X, Y, Z)`` float tensor."""
    arrays = [v.data if isinstance(v, Volume) else np.asarray(v) for v in volumes]
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32))


def class_names(n: int) -> list[str]:
    return list(CLASS_NAMES) if n == len(CLASS_NAMES) else [f"c{i}" for i in range(n)]


def forward(m: SegmentationModel, batch) -> list[MaskTensor]:
    """Predict a probability MaskTensor for each volume in ``batch``."""
    classes = class_names(m.cfg.num_classes)
    with torch.no_grad():
        out = m(to_input(batch)).numpy()
    return [MaskTensor(o, classes=list(classes)) for o in out]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(m: SegmentationModel, path, ema: bool = False) -> None:
    """Zip archive: config.json, manifest.json (name -> shape) and one raw
    little-endian float32 payload per parameter under ``params/``."""
    state = m.state_dict()
    manifest = {
        "ema": ema,
        "dtype": "float32-le",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(m.cfg.to_dict(), indent=2))
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for k, v in state.items():
            arr = v.detach().cpu().numpy().astype("<f4")
            zf.writestr(f"params/{k}.bin", arr.ravel(order="C").tobytes())


def load_checkpoint(path) -> tuple[SegmentationModel, dict]:
    with zipfile.ZipFile(path) as zf:
        cfg = NetworkConfig.from_dict(json.loads(zf.read("config.json")))
        manifest = json.loads(zf.read("manifest.json"))
        model = SegmentationModel(cfg)
        state = {}
        for entry in manifest["params"]:
            raw = zf.read(f"params/{entry['name']}.bin")
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    return model, manifest
