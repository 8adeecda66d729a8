"""Semi-supervised training loop with an EMA teacher.

Each epoch runs the labeled mini-batches first.  Once the epoch index passes
``unlab_start_epoch`` the teacher is averaged toward the student once, then
the unlabeled mini-batches are trained against the teacher's binarized,
identically transformed pseudo-labels.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import apply_transform, sample_transform
from .ema import TeacherState, binarize, init_teacher, pseudo_labels, update_teacher
from .losses import LossConfig, combined_loss, dice_score
from .network import SegmentationModel, save_checkpoint
from .volume_io import DatasetSplit, Sample

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "loss_labeled", "loss_unlabeled", "dice_all", "dice_tl", "dice_fl"]
_SEED_BOUND = 2**31 - 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, sample_ids: list[str], value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch} for samples {sample_ids}")
        self.epoch = epoch
        self.sample_ids = sample_ids


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    unlab_start_epoch: int | None = None
    mu: float = 0.95
    threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    augment_labeled: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.unlab_start_epoch is None:
            self.unlab_start_epoch = round(self.epochs / 3)
        if not 0 <= self.unlab_start_epoch <= self.epochs:
            raise ValueError("unlab_start_epoch must lie in [0, epochs]")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size must be >= 1 and learning_rate > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss_labeled: float
    loss_unlabeled: float | None
    dice: list[float] | None
    wall_time: float
    n_updates: int
    transform_seeds: list[int]


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    transform_log: list[dict] = field(default_factory=list)

    def rows(self) -> list[list]:
        out = []
        for r in self.records:
            dice = r.dice or [None] * 3
            out.append([r.epoch, r.loss_labeled, r.loss_unlabeled, *dice[:3]])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                w.writerow(["" if v is None else (v if isinstance(v, int) else repr(float(v))) for v in row])

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls([EpochRecord(**r) for r in d["records"]])


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays), dtype=np.float32))


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


class Trainer:
    """Holds the student, its optimizer, the EMA teacher and the RNG streams.

    Labeled and unlabeled phases draw from separate streams, so adding or
    removing unlabeled data never perturbs the labeled trajectory.
    """

    def __init__(self, model: SegmentationModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        self.teacher: TeacherState = init_teacher(model, mu=cfg.mu, threshold=cfg.threshold)
        lab, unlab = np.random.SeedSequence(cfg.rng_seed).spawn(2)
        self.rng_labeled = np.random.default_rng(lab)
        self.rng_unlabeled = np.random.default_rng(unlab)
        self.epoch = 0
        self.n_updates = 0
        self.transform_log: list[dict] = []
        self._last_seeds: list[int] = []

    def _seed(self, rng) -> int:
        return int(rng.integers(_SEED_BOUND))

    def _log_transform(self, phase: str, branch: str, name: str, t) -> None:
        self.transform_log.append(
            {"epoch": self.epoch, "phase": phase, "sample": name, "branch": branch,
             "perm": list(t.perm), "signs": [int(s) for s in t.signs], "seed": t.seed}
        )

    def _optimize(self, pred: torch.Tensor, target: torch.Tensor, ids: list[str]) -> float:
        loss = combined_loss(pred, target, self.cfg.loss)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(self.epoch, ids, value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.n_updates += 1
        return value

    def supervised_step(self, batch: list[Sample]) -> float:
        """One optimizer update on labeled samples; returns the pre-update loss."""
        if not batch:
            raise ValueError("empty labeled batch")
        images, masks, seeds = [], [], []
        for s in batch:
            x, y = s.image.data, s.mask.values
            if self.cfg.augment_labeled:
                seed = self._seed(self.rng_labeled)
                t = sample_transform(seed)
                x, y = apply_transform(t, x), apply_transform(t, y)
                seeds.append(seed)
                self._log_transform("labeled", "input", s.name, t)
                self._log_transform("labeled", "mask", s.name, sample_transform(seed))
            images.append(x)
            masks.append(y)
        self._last_seeds = seeds
        self.model.train()
        pred = self.model(_stack(images)[:, None])
        return self._optimize(pred, _stack(masks), [s.name for s in batch])

    def unsupervised_step(self, batch: list[Sample]) -> float:
        """One optimizer update against teacher pseudo-labels; the teacher is not updated."""
        if not batch:
            raise ValueError("empty unlabeled batch")
        seeds = [self._seed(self.rng_unlabeled) for _ in batch]
        student_t = [sample_transform(s) for s in seeds]
        label_t = [sample_transform(s) for s in seeds]
        for s, ts, tp in zip(batch, student_t, label_t):
            self._log_transform("unlabeled", "student", s.name, ts)
            self._log_transform("unlabeled", "pseudo_label", s.name, tp)
        x = _stack([s.image.data for s in batch])[:, None]
        target = pseudo_labels(self.teacher, x, label_t)
        x_student = torch.stack([apply_transform(t, xi) for t, xi in zip(student_t, x)])
        self._last_seeds = seeds
        self.model.train()
        pred = self.model(x_student)
        return self._optimize(pred, target, [s.name for s in batch])

    def run_epoch(self, split: DatasetSplit, val: list[Sample] | None = None) -> EpochRecord:
        self.epoch += 1
        start_time = time.perf_counter()
        start_updates = self.n_updates
        seeds: list[int] = []

        order = self.rng_labeled.permutation(len(split.labeled))
        labeled = [split.labeled[i] for i in order]
        losses = []
        for batch in _batches(labeled, self.cfg.batch_size):
            losses.append(self.supervised_step(batch))
            seeds.extend(self._last_seeds)

        loss_unlabeled = None
        if self.epoch > self.cfg.unlab_start_epoch:
            update_teacher(self.teacher, self.model)
            if split.unlabeled:
                order = self.rng_unlabeled.permutation(len(split.unlabeled))
                unlabeled = [split.unlabeled[i] for i in order]
                u_losses = []
                for batch in _batches(unlabeled, self.cfg.batch_size):
                    u_losses.append(self.unsupervised_step(batch))
                    seeds.extend(self._last_seeds)
                loss_unlabeled = float(np.mean(u_losses))

        dice = evaluate(self.model, val, self.cfg.threshold, self.cfg.loss.epsilon) if val else None
        record = EpochRecord(
            epoch=self.epoch,
            loss_labeled=float(np.mean(losses)),
            loss_unlabeled=loss_unlabeled,
            dice=dice,
            wall_time=time.perf_counter() - start_time,
            n_updates=self.n_updates - start_updates,
            transform_seeds=seeds,
        )
        log.info(
            "epoch %d loss_l=%.4f loss_u=%s dice=%s",
            record.epoch, record.loss_labeled,
            "-" if loss_unlabeled is None else f"{loss_unlabeled:.4f}",
            None if dice is None else [round(d, 4) for d in dice],
        )
        return record

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.model, out_dir / "model.ckpt")
        save_checkpoint(self.teacher.model, out_dir / "teacher.ckpt", ema=True)

    def fit(self, split: DatasetSplit, val: list[Sample] | None = None, checkpoint_dir=None) -> TrainHistory:
        if not split.labeled:
            raise ValueError("training needs at least one labeled sample")
        history = TrainHistory(transform_log=self.transform_log)
        try:
            for _ in range(self.cfg.epochs):
                history.records.append(self.run_epoch(split, val))
        except NonFiniteLossError:
            if checkpoint_dir is not None:
                self.save(checkpoint_dir)
                log.error("aborted at epoch %d; checkpoint written to %s", self.epoch, checkpoint_dir)
            raise
        return history


def train(
    m: SegmentationModel,
    split: DatasetSplit,
    val: list[Sample] | None,
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[SegmentationModel, TrainHistory]:
    trainer = Trainer(m, cfg)
    history = trainer.fit(split, val, checkpoint_dir=checkpoint_dir)
    return trainer.model, history


@torch.no_grad()
def evaluate(m, dataset: list[Sample], threshold: float = 0.5, epsilon: float = 1e-5) -> list[float]:
    """Mean per-class DICE of thresholded predictions over ``dataset``."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = getattr(m, "training", False)
    if hasattr(m, "eval"):
        m.eval()
    scores = []
    for batch in _batches(list(dataset), 4):
        probs = m(_stack([s.image.data for s in batch])[:, None])
        pred = binarize(probs, threshold).numpy()
        for p, s in zip(pred, batch):
            scores.append(dice_score(p, s.mask.values, epsilon))
    if was_training:
        m.train()
    # fsum keeps the mean independent of dataset order
    return [math.fsum(col) / len(scores) for col in zip(*scores)]
