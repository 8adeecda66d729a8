"""Shuffle&Split cross-validation over the four training settings.

Settings:

* ``full_labeled``  -- every training case labeled.
* ``half_labeled``  -- first half of the training side labeled, rest dropped.
* ``ssl_half``      -- same labeled half, the other half used without masks.
* ``ssl_half_aug``  -- as ``ssl_half`` plus rotations/flips of labeled cases.

Settings within one repeat share the validation set, the labeled subset,
the model initialization and the RNG seed, so they differ only in the
unlabeled branch and labeled augmentation.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .network import NetworkConfig, build_model
from .preprocess import PreprocessConfig, preprocess_pipeline, resize_crop
from .trainer import HISTORY_COLUMNS, TrainConfig, TrainHistory, train
from .volume_io import (
    DatasetSplit,
    PhantomParams,
    Sample,
    generate_phantom,
    labels_to_masks,
    load_labels,
    load_volume,
)

log = logging.getLogger(__name__)

SETTINGS = ("full_labeled", "half_labeled", "ssl_half", "ssl_half_aug")
CLASSES = ("ALL", "TL", "FL")


@dataclass
class DatasetSpec:
    """Where cases come from: synthetic phantoms or a directory of VOL1/NIfTI files."""

    kind: str = "phantom"
    n_samples: int = 50
    dims: int = 32
    seed: int = 0
    phantom: PhantomParams = field(default_factory=PhantomParams)
    data_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            self.phantom = PhantomParams(**self.phantom)
        if self.kind not in ("phantom", "directory"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


def _desk_preprocess() -> PreprocessConfig:
    return PreprocessConfig(target_dims=(32, 32, 32), xy_resize=32, xy_border_crop=0)


@dataclass
class ExperimentSpec:
    settings: list[str] = field(default_factory=lambda: list(SETTINGS))
    labeled_fraction: float = 0.5
    n_repeats: int = 4
    train_fraction: float = 0.8
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    preprocess: PreprocessConfig = field(default_factory=_desk_preprocess)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    start_epoch_sweep: list[int] | None = None
    sweep_setting: str = "ssl_half"

    def __post_init__(self):
        if isinstance(self.settings, str):
            self.settings = [self.settings]
        self.settings = list(self.settings)
        for s in [*self.settings, self.sweep_setting]:
            if s not in SETTINGS:
                raise ValueError(f"unknown setting {s!r}")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "setting" in d:
            d["settings"] = [d.pop("setting")]
        builders = {
            "train": TrainConfig.from_dict,
            "network": NetworkConfig.from_dict,
            "preprocess": PreprocessConfig.from_dict,
            "dataset": lambda x: DatasetSpec(**x),
        }
        for key, build in builders.items():
            if isinstance(d.get(key), dict):
                d[key] = build(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    label: str
    setting: str
    repeat: int
    config: dict
    history: TrainHistory | None = None
    final_dice: list[float] | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "setting": self.setting,
            "repeat": self.repeat,
            "config": self.config,
            "history": None if self.history is None else self.history.to_dict(),
            "final_dice": self.final_dice,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        if d.get("history") is not None:
            d["history"] = TrainHistory.from_dict(d["history"])
        return cls(**d)


@dataclass
class ExperimentReport:
    rows: list[dict]
    runs: list[RunRecord]
    spec: dict

    def row(self, label: str) -> dict:
        return next(r for r in self.rows if r["label"] == label)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "runs": [r.to_dict() for r in self.runs], "spec": self.spec}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["rows"], [RunRecord.from_dict(r) for r in d["runs"]], d["spec"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ datasets


def load_dataset(spec: DatasetSpec, pre: PreprocessConfig) -> list[Sample]:
    """Preprocessed, labeled cases in a fixed order."""
    cases = []
    if spec.kind == "phantom":
        for i in range(spec.n_samples):
            vol, lab = generate_phantom(spec.seed * 100_003 + i, spec.dims, spec.phantom)
            cases.append((vol, lab))
    else:
        root = Path(spec.data_dir)
        for img_path in sorted((root / "images").iterdir()):
            lab_path = root / "labels" / img_path.name
            cases.append((load_volume(img_path), load_labels(lab_path)))
    samples = []
    for vol, lab in cases:
        image = preprocess_pipeline(vol, pre)
        image.data = image.data.astype(np.float32)
        samples.append(Sample(vol.name, image, labels_to_masks(resize_crop(lab, pre))))
    return samples


def shuffle_split(dataset: list, train_fraction: float, repeat_index: int, base_seed: int):
    """Random permutation seeded by ``(base_seed, repeat_index)``, split at floor(n * fraction)."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two cases to split")
    n_train = math.floor(n * train_fraction)
    if n_train < 1 or n_train >= n:
        raise ValueError(f"train fraction {train_fraction} leaves an empty side for n={n}")
    perm = np.random.default_rng([base_seed, repeat_index]).permutation(n)
    return [dataset[i] for i in perm[:n_train]], [dataset[i] for i in perm[n_train:]]


def make_setting(setting: str, train_set: list[Sample], labeled_fraction: float = 0.5, split_seed: int = 0) -> DatasetSplit:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    if setting == "full_labeled":
        return DatasetSplit(list(train_set), [], split_seed)
    n_lab = max(1, math.floor(len(train_set) * labeled_fraction))
    labeled = list(train_set[:n_lab])
    if setting == "half_labeled":
        return DatasetSplit(labeled, [], split_seed)
    hidden = [Sample(s.name, s.image, None) for s in train_set[n_lab:]]
    return DatasetSplit(labeled, hidden, split_seed)


def configure_setting(setting: str, cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, augment_labeled=(setting == "ssl_half_aug"))


# ------------------------------------------------------------------ running


def _aggregate(label: str, setting: str, runs: list[RunRecord], unlab_start: int | None = None) -> dict:
    ok = [r.final_dice for r in runs if r.error is None]
    row = {"label": label, "setting": setting, "unlab_start_epoch": unlab_start,
           "n_ok": len(ok), "failed_repeats": [r.repeat for r in runs if r.error is not None]}
    values = np.asarray(ok, dtype=np.float64) if ok else np.full((0, len(CLASSES)), np.nan)
    for j, c in enumerate(CLASSES):
        col = values[:, j] if len(values) else np.array([])
        row[c] = {
            "mean": float(col.mean()) if col.size else None,
            "std": float(col.std()) if col.size else None,
        }
    return row


def _run_one(label, setting, repeat, dataset, spec: ExperimentSpec, cfg: TrainConfig) -> RunRecord:
    train_set, val_set = shuffle_split(dataset, spec.train_fraction, repeat, spec.base_seed)
    split = make_setting(setting, train_set, spec.labeled_fraction, split_seed=repeat)
    seed = spec.base_seed * 1000 + repeat
    cfg = replace(configure_setting(setting, cfg), rng_seed=seed)
    config = {"setting": setting, "repeat": repeat, "init_seed": seed, "train": cfg.to_dict(),
              "network": spec.network.to_dict(),
              "labeled": [s.name for s in split.labeled],
              "unlabeled": [s.name for s in split.unlabeled],
              "validation": [s.name for s in val_set]}
    record = RunRecord(label, setting, repeat, config)
    log.info("run %s repeat %d: %d labeled, %d unlabeled, %d validation",
             label, repeat, len(split.labeled), len(split.unlabeled), len(val_set))
    try:
        model = build_model(copy.deepcopy(spec.network), init_seed=seed)
        _, history = train(model, split, val_set, cfg)
    except Exception as exc:  # recorded in the report, other repeats go on
        log.exception("run %s repeat %d failed", label, repeat)
        record.error = f"{type(exc).__name__}: {exc}"
        return record
    history.transform_log = []
    record.history = history
    record.final_dice = history.records[-1].dice
    return record


def run_experiment(spec: ExperimentSpec, dataset: list[Sample] | None = None) -> ExperimentReport:
    """Train every setting for every repeat, then the optional start-epoch sweep."""
    if dataset is None:
        dataset = load_dataset(spec.dataset, spec.preprocess)
    rows, runs = [], []
    for setting in spec.settings:
        group = [_run_one(setting, setting, k, dataset, spec, spec.train) for k in range(spec.n_repeats)]
        rows.append(_aggregate(setting, setting, group, spec.train.unlab_start_epoch))
        runs.extend(group)
    for start in spec.start_epoch_sweep or []:
        label = f"start_{start}"
        cfg = replace(spec.train, unlab_start_epoch=start)
        group = [_run_one(label, spec.sweep_setting, k, dataset, spec, cfg) for k in range(spec.n_repeats)]
        rows.append(_aggregate(label, spec.sweep_setting, group, start))
        runs.extend(group)
    return ExperimentReport(rows, runs, spec.to_dict())


# ------------------------------------------------------------------ reports


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def emit_report(report: ExperimentReport, out_dir, figures: bool = True) -> list[Path]:
    """Write table.csv, per-run curves, summary.txt and figures under ``out_dir``."""
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    written = []

    table = out / "table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "class", "mean", "std"])
        for row in report.rows:
            for c in CLASSES:
                w.writerow([row["label"], c, _fmt(row[c]["mean"]), _fmt(row[c]["std"])])
    written.append(table)

    for run in report.runs:
        if run.history is None:
            continue
        path = out / "curves" / f"{run.label}_r{run.repeat}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in run.history.rows():
                w.writerow([r[0], *(_fmt(v) for v in r[1:])])
        written.append(path)

    lines = ["Class-wise DICE (mean +- std over repeats, x100)", ""]
    lines.append(f"{'setting':<16}" + "".join(f"{c:>18}" for c in CLASSES))
    for row in report.rows:
        cells = []
        for c in CLASSES:
            m, s = row[c]["mean"], row[c]["std"]
            cells.append("n/a" if m is None else f"{100 * m:.2f} +- {100 * s:.2f}")
        lines.append(f"{row['label']:<16}" + "".join(f"{x:>18}" for x in cells))
        if row["failed_repeats"]:
            lines.append(f"  failed repeats: {row['failed_repeats']}")
    summary = out / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)

    if figures:
        from .plotting import render_report_figures

        written.extend(render_report_figures(report, out / "figures"))
    return written
