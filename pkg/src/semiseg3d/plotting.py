"""Matplotlib figures for experiment reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SETTING_COLORS = {
    "full_labeled": "tab:red",
    "half_labeled": "tab:green",
    "ssl_half": "tab:blue",
    "ssl_half_aug": "c",
}
SWEEP_COLORS = ["tab:blue", "tab:pink", "tab:gray", "tab:olive", "tab:purple"]

report_rc = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "savefig.dpi": 120,
}

# Agg writes no timestamp; dropping the version string keeps files byte-stable
_PNG_METADATA = {"Software": None}


def _dice_all(run) -> tuple[list[int], list[float]]:
    recs = [r for r in run.history.records if r.dice is not None]
    return [r.epoch for r in recs], [r.dice[0] for r in recs]


def plot_dice_curves(runs, ax=None, colors=None, repeat: int = 0):
    """DICE(ALL) against epoch for one repeat of each labelled run group."""
    ax = ax or plt.gca()
    colors = colors or {}
    for i, run in enumerate(r for r in runs if r.repeat == repeat and r.history is not None):
        epochs, dice = _dice_all(run)
        ax.plot(epochs, dice, color=colors.get(run.label, SWEEP_COLORS[i % len(SWEEP_COLORS)]),
                lw=1.2, label=run.label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation DICE (ALL)")
    ax.legend(frameon=False, loc="lower right")
    return ax


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def render_report_figures(report, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    setting_runs = [r for r in report.runs if not r.label.startswith("start_")]
    sweep_runs = [r for r in report.runs if r.label.startswith("start_")]
    with plt.rc_context(report_rc):
        if setting_runs:
            fig, ax = plt.subplots()
            plot_dice_curves(setting_runs, ax, SETTING_COLORS)
            ax.set_title("Training curves by setting")
            written.append(_save(fig, out / "dice_all_settings.png"))
        if sweep_runs:
            fig, ax = plt.subplots()
            plot_dice_curves(sweep_runs, ax)
            for row in report.rows:
                if row["label"].startswith("start_"):
                    ax.axvline(row["unlab_start_epoch"], color="0.8", lw=0.8, ls="--", zorder=0)
            ax.set_title("Unlabeled start epoch")
            written.append(_save(fig, out / "dice_all_start_epochs.png"))
        rows = [r for r in report.rows if r["ALL"]["mean"] is not None]
        if rows:
            fig, ax = plt.subplots(figsize=(5.5, 3.2))
            width = 0.8 / 3
            for j, c in enumerate(("ALL", "TL", "FL")):
                xs = [i + (j - 1) * width for i in range(len(rows))]
                ax.bar(xs, [r[c]["mean"] for r in rows], width, yerr=[r[c]["std"] for r in rows],
                       label=c, capsize=2)
            ax.set_xticks(range(len(rows)))
            ax.set_xticklabels([r["label"] for r in rows], rotation=20, ha="right")
            ax.set_ylabel("DICE")
            ax.set_ylim(0, 1)
            ax.legend(frameon=False, ncol=3)
            fig.tight_layout()
            written.append(_save(fig, out / "dice_table.png"))
    return written
