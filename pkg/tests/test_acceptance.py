"""Acceptance criteria, one test per criterion.

Every test carries ``@pytest.mark.acceptance("<n>")``; the conftest hook
prints one ``criterion <n>: PASS|FAIL`` line per criterion at the end of
the run. Criteria 2 and 9 train real models at desk scale and take the
bulk of the runtime (roughly 45 minutes on one CPU core).
"""

import hashlib
import itertools
import json
import math
import statistics
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import TINY_NET, TINY_PHANTOM, tiny_dataset
from reference_preprocess import process_image
from semiseg3d.augment import GROUP, apply_transform, invert, sample_transform
from semiseg3d.cli import main as cli_main
from semiseg3d.ema import init_teacher, update_teacher
from semiseg3d.experiments import (
    CLASSES,
    DatasetSpec,
    ExperimentSpec,
    emit_report,
    load_dataset,
    run_experiment,
)
from semiseg3d.losses import LossConfig, combined_loss, dice_score, focal_loss, generalized_dice_loss
from semiseg3d.network import NetworkConfig, build_model
from semiseg3d.preprocess import PreprocessConfig, preprocess_pipeline, resize_crop
from semiseg3d.trainer import TrainConfig, Trainer, train
from semiseg3d.volume_io import DatasetSplit, Sample, Volume

DESK_EPOCHS = 60
DESK_START = 20
# Teacher smoothing for the desk schedule. The reference schedule makes
# 800 - 200 = 600 teacher updates at mu = 0.95; here there are only
# 60 - 20 = 40. Keeping the total decay over the unlabeled phase equal gives
# mu_desk = 0.95 ** (600 / 40). With 0.95 itself, the teacher still carries
# 0.95 ** 40 = 13% of the random initial weights at the last epoch.
DESK_MU = 0.95 ** (600 / 40)
SEEDS = 3


def detail(record_property, text):
    record_property("detail", text)


def params_hash(model) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ 1


@pytest.mark.acceptance("1")
def test_reference_numbers_are_informational(record_property):
    # The published table needs the clinical dataset and 800 GPU epochs;
    # criteria 2-9 stand in for it.
    detail(record_property, "informational; reference table not reproduced at desk scale")


# ------------------------------------------------------------------ 2


def desk_spec(settings, **kw):
    return ExperimentSpec(
        settings=settings,
        n_repeats=SEEDS,
        train_fraction=0.8,
        train=TrainConfig(epochs=DESK_EPOCHS, unlab_start_epoch=DESK_START, mu=DESK_MU),
        dataset=DatasetSpec(n_samples=50, dims=32, seed=0),
        **kw,
    )


@pytest.fixture(scope="module")
def desk_dataset():
    spec = desk_spec([])
    return load_dataset(spec.dataset, spec.preprocess)


@pytest.fixture(scope="module")
def desk_report(desk_dataset):
    timings, rows, runs = {}, [], []
    for setting in ("full_labeled", "half_labeled", "ssl_half"):
        t0 = time.perf_counter()
        rep = run_experiment(desk_spec([setting]), desk_dataset)
        timings[setting] = time.perf_counter() - t0
        rows += rep.rows
        runs += rep.runs
    return rows, runs, timings


@pytest.mark.acceptance("2")
@pytest.mark.slow
def test_directional_ssl_effect(desk_report, record_property):
    rows, runs, timings = desk_report
    assert all(r.error is None for r in runs), [r.error for r in runs]
    final = {(r.setting, r.repeat): r.final_dice[0] for r in runs}
    med = {s: statistics.median(final[s, k] for k in range(SEEDS))
           for s in ("full_labeled", "half_labeled", "ssl_half")}
    wins = sum(final["ssl_half", k] > final["half_labeled", k] for k in range(SEEDS))
    per_seed = " ".join(
        f"s{k}:{final['full_labeled', k]:.4f}/{final['half_labeled', k]:.4f}/{final['ssl_half', k]:.4f}"
        for k in range(SEEDS)
    )
    worst = max(timings.values()) / 60
    detail(record_property,
           f"median ALL full={med['full_labeled']:.4f} half={med['half_labeled']:.4f} "
           f"ssl={med['ssl_half']:.4f}; ssl>half in {wins}/{SEEDS}; full/half/ssl {per_seed}; "
           f"slowest setting {worst:.1f} min")
    assert med["full_labeled"] >= med["half_labeled"]
    assert med["ssl_half"] >= med["half_labeled"] - 0.01
    assert wins >= 2
    assert worst <= 30
    # every supervised run learns something useful
    assert all(final["half_labeled", k] > 0.6 for k in range(SEEDS))


# ------------------------------------------------------------------ 3


@pytest.mark.acceptance("3")
def test_preprocessing_matches_reference_routine(record_property):
    rng = np.random.default_rng(3)
    cfg = PreprocessConfig(target_dims=(8, 8, 8), xy_resize=8, xy_border_crop=0)
    worst = 0.0
    for _ in range(50):
        raw = rng.uniform(900, 1800, size=(8, 8, 8))
        ours = preprocess_pipeline(Volume(raw.copy()), cfg).data
        ref = process_image(resize_crop(raw, cfg))
        worst = max(worst, float(np.max(np.abs(ours - ref))))
    detail(record_property, f"max abs diff {worst:.2e} over 50 volumes (tol 1e-6)")
    assert worst < 1e-6


# ------------------------------------------------------------------ 4


@pytest.mark.acceptance("4")
def test_dice_brute_force(record_property):
    eps = 1e-5
    masks = np.array(list(itertools.product([0.0, 1.0], repeat=8)))
    worst = 0.0
    for p in masks:
        for y in masks:
            direct = (2 * np.dot(p, y) + eps) / (np.dot(p, p) + np.dot(y, y) + eps)
            got = dice_score(p.reshape(1, 2, 2, 2), y.reshape(1, 2, 2, 2), eps)[0]
            worst = max(worst, abs(got - direct))
    detail(record_property, f"max abs diff {worst:.2e} over {len(masks) ** 2} pairs (tol 1e-9)")
    assert worst < 1e-9


# ------------------------------------------------------------------ 5


def _fd_rel_error(fn, pred, target, h=1e-4):
    x = pred.clone().requires_grad_(True)
    fn(x, target).backward()
    analytic = x.grad.detach()
    numeric = torch.zeros_like(pred)
    flat, out = pred.view(-1), numeric.view(-1)
    for i in range(flat.numel()):
        hi, lo = flat.clone(), flat.clone()
        hi[i] += h
        lo[i] -= h
        out[i] = (fn(hi.view_as(pred), target) - fn(lo.view_as(pred), target)) / (2 * h)
    return (torch.linalg.norm(analytic - numeric) / torch.linalg.norm(numeric).clamp_min(1e-12)).item()


@pytest.mark.acceptance("5")
def test_loss_gradients_and_bce_limit(record_property):
    gen = torch.Generator().manual_seed(5)
    cfg = LossConfig(alpha=[0.8, 1.5])
    losses = {
        "gdl": lambda p, y: generalized_dice_loss(p, y, cfg.epsilon),
        "focal": lambda p, y: focal_loss(p, y, cfg),
        "combined": lambda p, y: combined_loss(p, y, cfg),
    }
    worst = dict.fromkeys(losses, 0.0)
    bce_worst = 0.0
    bce_cfg = LossConfig(gamma=0.0, alpha=[1.0, 1.0])
    for _ in range(20):
        # keep probabilities away from the clamp so the derivative is smooth
        pred = (0.05 + 0.9 * torch.rand(2, 4, 4, 4, generator=gen, dtype=torch.float64))
        target = (torch.rand(2, 4, 4, 4, generator=gen, dtype=torch.float64) > 0.5).double()
        for name, fn in losses.items():
            worst[name] = max(worst[name], _fd_rel_error(fn, pred, target))
        bce = F.binary_cross_entropy(pred, target)
        bce_worst = max(bce_worst, abs(focal_loss(pred, target, bce_cfg).item() - bce.item()))
    detail(record_property,
           "rel err " + " ".join(f"{k}={v:.1e}" for k, v in worst.items())
           + f" (tol 1e-3); focal-vs-BCE {bce_worst:.1e} (tol 1e-6)")
    assert max(worst.values()) < 1e-3
    assert bce_worst < 1e-6


# ------------------------------------------------------------------ 6


@pytest.fixture(scope="module")
def live_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("live")
    params = json.dumps({k: getattr(TINY_PHANTOM, k) for k in
                         ("tl_radius", "fl_radius", "flt_radius", "n_distractors", "distractor_radius")})
    assert cli_main(["generate", "--out", str(root / "data"), "--n", "6", "--unlabeled", "4",
                     "--dims", "16", "--params", params]) == 0
    cfg = {"network": TINY_NET.to_dict(),
           "train": {"epochs": 3, "batch_size": 2, "unlab_start_epoch": 1, "augment_labeled": True}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert cli_main(["train", "--config", str(root / "cfg.json"), "--data-dir", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root / "run"


@pytest.mark.acceptance("6")
def test_augmentation_group_suite(live_run, record_property):
    keys = {t.key for t in GROUP}
    assert len(GROUP) == 48 and len(keys) == 48
    assert {sample_transform(s).key for s in range(2000)} == keys

    rng = np.random.default_rng(6)
    for i in range(100):
        x = rng.normal(size=(2, 9, 9, 9)).astype(np.float32)
        t = sample_transform(int(rng.integers(2**31)))
        assert np.array_equal(apply_transform(invert(t), apply_transform(t, x)), x)

    p = rng.random((3, 8, 8, 8))
    y = (rng.random((3, 8, 8, 8)) > 0.6).astype(np.float64)
    base = dice_score(p, y)
    assert all(dice_score(apply_transform(t, p), apply_transform(t, y)) == base for t in GROUP)

    entries = [json.loads(line) for line in open(live_run / "transforms.log")]
    pairs = list(zip(entries[::2], entries[1::2]))
    for a, b in pairs:
        assert a["sample"] == b["sample"] and a["seed"] == b["seed"]
        assert {a["branch"], b["branch"]} in ({"input", "mask"}, {"student", "pseudo_label"})
        replay = sample_transform(a["seed"])
        assert [list(replay.perm), [int(s) for s in replay.signs]] == [a["perm"], a["signs"]] == [b["perm"], b["signs"]]
    phases = {a["phase"] for a, _ in pairs}
    assert phases == {"labeled", "unlabeled"}
    detail(record_property, f"48 elements; 100 inverse round trips; DICE invariant under all 48; "
                            f"{len(pairs)} logged branch pairs replay identically")


# ------------------------------------------------------------------ 7


def _flat(m):
    return torch.cat([p.detach().reshape(-1) for p in m.parameters()])


@pytest.mark.acceptance("7")
def test_ema_suite(record_property):
    net = NetworkConfig(stage_channels=[4, 8], bottleneck_dim=8, head_channels=2, input_size=16)
    student = build_model(net, 1).double()

    t = init_teacher(build_model(net, 2).double(), mu=0.0)
    update_teacher(t, student)
    assert torch.equal(_flat(t.model), _flat(student))

    t = init_teacher(build_model(net, 2).double(), mu=1.0)
    before = _flat(t.model).clone()
    update_teacher(t, student)
    assert torch.equal(_flat(t.model), before)

    t = init_teacher(build_model(net, 2).double(), mu=0.95)
    d0 = torch.linalg.norm(_flat(t.model) - _flat(student)).item()
    for _ in range(10):
        update_teacher(t, student)
    dk = torch.linalg.norm(_flat(t.model) - _flat(student)).item()
    rel = abs(dk - 0.95**10 * d0) / (0.95**10 * d0)
    assert rel < 1e-6

    data = tiny_dataset(6, seed=7)
    trainer = Trainer(build_model(TINY_NET, 3), TrainConfig(epochs=1, batch_size=3, unlab_start_epoch=0))
    trainer.supervised_step(data[:3])
    update_teacher(trainer.teacher, trainer.model)
    h0 = params_hash(trainer.teacher.model)
    for _ in range(3):
        trainer.unsupervised_step([Sample(s.name, s.image, None) for s in data[3:]])
        assert params_hash(trainer.teacher.model) == h0
    detail(record_property, f"mu=0 copy, mu=1 freeze, decay rel err {rel:.1e} (tol 1e-6), teacher hash stable")


# ------------------------------------------------------------------ 8


@pytest.mark.acceptance("8")
def test_training_loop_structure(record_property):
    data = tiny_dataset(14, seed=8)
    labeled, unlabeled, val = data[:5], [Sample(s.name, s.image, None) for s in data[5:12]], data[12:]
    cfg = TrainConfig(epochs=4, batch_size=2, unlab_start_epoch=2)
    _, hist = train(build_model(TINY_NET, 0), DatasetSplit(labeled, unlabeled), val, cfg)
    for r in hist.records:
        assert (r.loss_unlabeled is not None) == (r.epoch > cfg.unlab_start_epoch)
        expected = math.ceil(5 / 2) + (math.ceil(7 / 2) if r.epoch > cfg.unlab_start_epoch else 0)
        assert r.n_updates == expected

    m1, h1 = train(build_model(TINY_NET, 0), DatasetSplit(labeled, []), val, cfg)
    m2, h2 = train(build_model(TINY_NET, 0), DatasetSplit(labeled, []), val,
                   TrainConfig(epochs=4, batch_size=2, unlab_start_epoch=4))
    assert h1.rows() == h2.rows()
    assert params_hash(m1) == params_hash(m2)
    detail(record_property, "unlabeled loss only after start; update counts "
                            f"{[r.n_updates for r in hist.records]}; empty-unlabeled run bit-identical")


# ------------------------------------------------------------------ 9


@pytest.mark.acceptance("9")
@pytest.mark.slow
def test_start_epoch_sweep(desk_dataset, tmp_path, record_property):
    spec = desk_spec([], start_epoch_sweep=[10, 20, 30])
    spec.n_repeats = 1
    rep = run_experiment(spec, desk_dataset)
    assert all(r.error is None for r in rep.runs), [r.error for r in rep.runs]
    emit_report(rep, tmp_path)
    table = (tmp_path / "table.csv").read_text().splitlines()
    assert len(table) == 1 + 3 * len(CLASSES)
    base = rep.runs[0].config
    for run in rep.runs[1:]:
        changed = {k for k in run.config["train"] if run.config["train"][k] != base["train"][k]}
        assert changed == {"unlab_start_epoch"}
        assert {k: v for k, v in run.config.items() if k != "train"} == \
               {k: v for k, v in base.items() if k != "train"}
    detail(record_property, "3x3 table; " + " ".join(
        f"{r['label']}={r['ALL']['mean']:.4f}" for r in rep.rows))
