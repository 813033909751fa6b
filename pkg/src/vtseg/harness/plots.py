"""Loss, Dice and ablation figures from the delimited-text logs of a run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runs import read_tsv  # noqa: E402


class PlotError(FileNotFoundError):
    pass


_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def _stage2(log_path: Path, out: Path) -> Path:
    rows = read_tsv(log_path)
    ep = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style in (("train_total", "-"), ("val_total", "-"), ("train_g2g", ":"), ("train_l2g", "--")):
        ax.plot(ep, [float(r[key]) for r in rows], style, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("InfoNCE")
    ax.legend()
    ax.set_title("Stage 2 contrastive loss")
    path = out / "stage2_loss.png"
    _save(fig, path)
    return path


def _segmenter(log_path: Path, out: Path, stem: str) -> list[Path]:
    rows = read_tsv(log_path)
    ep = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ep, [float(r["train_loss"]) for r in rows])
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE + Dice")
    ax.set_title(f"{stem} training loss")
    loss = out / f"{stem}_loss.png"
    _save(fig, loss)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ep, [float(r["val_dice"]) * 100 for r in rows])
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation DSC (%)")
    ax.set_title(f"{stem} validation Dice")
    dice = out / f"{stem}_dice.png"
    _save(fig, dice)
    return [loss, dice]


def _ablation(path: Path, out: Path) -> Path:
    rows = [r for r in read_tsv(path) if not r["error"]]
    names = list(dict.fromkeys(r["name"] for r in rows))
    means = [np.mean([float(r["DSC(%)"]) for r in rows if r["name"] == n]) for n in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(names)), means)
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("DSC (%)")
    lo = min(means) if means else 0
    ax.set_ylim(max(0, lo - 10), 100)
    ax.set_title("Ablation")
    fig.tight_layout()
    p = out / "ablation.png"
    _save(fig, p)
    return p


def emit_plots(run_dir) -> list[Path]:
    """Write every figure whose log exists in ``run_dir`` (seed subdirectories included)."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise PlotError(f"run directory {run_dir} does not exist")
    made: list[Path] = []
    for d in [run_dir, *sorted(p for p in run_dir.iterdir() if p.is_dir() and p.name.startswith("seed"))]:
        if (d / "stage2_log.tsv").exists():
            made.append(_stage2(d / "stage2_log.tsv", d))
        if (d / "stage3_log.tsv").exists():
            made += _segmenter(d / "stage3_log.tsv", d, "stage3")
        for log in sorted(d.glob("*_log.tsv")):
            if log.name not in ("stage2_log.tsv", "stage3_log.tsv"):
                made += _segmenter(log, d, log.name[: -len("_log.tsv")])
    if (run_dir / "ablation.tsv").exists():
        made.append(_ablation(run_dir / "ablation.tsv", run_dir))
    if not made:
        raise PlotError(f"no logs found under {run_dir}")
    return made
