"""Command line entry point: ``semiseg3d {generate,train,experiment,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiments import ExperimentReport, ExperimentSpec, emit_report, run_experiment, shuffle_split
from .network import NetworkConfig, build_model
from .preprocess import PreprocessConfig, preprocess_pipeline, resize_crop
from .trainer import TrainConfig, Trainer
from .volume_io import (
    DatasetSplit,
    PhantomParams,
    Sample,
    generate_phantom,
    labels_to_masks,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)

log = logging.getLogger("semiseg3d")

VOLUME_SUFFIXES = (".vol", ".nii")


def _volume_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix in VOLUME_SUFFIXES)


def cmd_generate(args) -> int:
    out = Path(args.out)
    for sub in ("images", "labels") + (("unlabeled",) if args.unlabeled else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    params = PhantomParams(**json.loads(args.params)) if args.params else PhantomParams()
    for i in range(args.n + args.unlabeled):
        vol, lab = generate_phantom(args.seed * 100_003 + i, args.dims, params)
        if i < args.n:
            save_volume(vol, out / "images" / f"{vol.name}.vol")
            save_labels(lab, out / "labels" / f"{vol.name}.vol", sidecar=i == 0)
        else:
            save_volume(vol, out / "unlabeled" / f"{vol.name}.vol")
    print(f"wrote {args.n} labeled and {args.unlabeled} unlabeled phantoms to {out}")
    return 0


def load_train_config(path) -> dict:
    raw = json.loads(Path(path).read_text()) if path else {}
    net = NetworkConfig.from_dict(raw.get("network", {}))
    train_d = dict(raw.get("train", {}))
    if "loss" in raw:
        train_d["loss"] = raw["loss"]
    cfg = TrainConfig.from_dict(train_d)
    n = net.input_size
    pre_d = raw.get("preprocess", {"target_dims": [n, n, n], "xy_resize": n, "xy_border_crop": 0})
    return {
        "network": net,
        "train": cfg,
        "preprocess": PreprocessConfig.from_dict(pre_d),
        "val_fraction": float(raw.get("val_fraction", 0.2)),
        "init_seed": int(raw.get("init_seed", cfg.rng_seed)),
    }


def _prepared(path: Path, pre: PreprocessConfig):
    image = preprocess_pipeline(load_volume(path), pre)
    image.data = image.data.astype(np.float32)
    return image


def cmd_train(args) -> int:
    conf = load_train_config(args.config)
    pre = conf["preprocess"]
    data_dir = Path(args.data_dir)
    labeled = []
    for img in _volume_files(data_dir / "images"):
        lab = load_labels(data_dir / "labels" / img.name)
        labeled.append(Sample(img.stem, _prepared(img, pre), labels_to_masks(resize_crop(lab, pre))))
    unlabeled = [Sample(p.stem, _prepared(p, pre)) for p in _volume_files(data_dir / "unlabeled")]
    if not labeled:
        print(f"no labeled images under {data_dir / 'images'}", file=sys.stderr)
        return 2
    cfg = conf["train"]
    if conf["val_fraction"] > 0 and len(labeled) >= 2:
        train_set, val = shuffle_split(labeled, 1 - conf["val_fraction"], 0, cfg.rng_seed)
    else:
        train_set, val = labeled, []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(build_model(conf["network"], conf["init_seed"]), cfg)
    try:
        history = trainer.fit(DatasetSplit(train_set, unlabeled), val or None, checkpoint_dir=out)
    finally:
        with open(out / "transforms.log", "w") as fh:
            for entry in trainer.transform_log:
                fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
    history.write_csv(out / "history.csv")
    trainer.save(out)
    last = history.records[-1]
    print(f"trained {cfg.epochs} epochs; final validation DICE {last.dice}")
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_dict(json.loads(Path(args.spec).read_text()))
    report = run_experiment(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    emit_report(report, out, figures=not args.no_figures)
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_report(args) -> int:
    report = ExperimentReport.load(Path(args.input) / "report.json")
    emit_report(report, args.out, figures=not args.no_figures)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiseg3d", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50, help="labeled cases")
    p.add_argument("--unlabeled", type=int, default=0, help="extra cases without labels")
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="JSON object overriding phantom parameters")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="JSON with network/train/loss/preprocess sections")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run the cross-validated settings")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-render tables and figures from results")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
