"""Dice, average surface distance, aggregation and latency."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .phonology import ARTICULATORS

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SpacingInfo:
    """Pixel spacing in mm after resizing."""

    mm_per_pixel: float

    def __post_init__(self):
        if not (self.mm_per_pixel > 0 and math.isfinite(self.mm_per_pixel)):
            raise ValueError(f"spacing must be positive and finite, got {self.mm_per_pixel}")

    @classmethod
    def from_native(cls, native_mm: float, native_size: int, processed_size: int) -> "SpacingInfo":
        return cls(native_mm * native_size / processed_size)


@dataclass
class MetricRecord:
    frame_id: str
    dsc: dict[str, float | None]
    asd: dict[str, float | None]
    split: str = ""
    mode: str = ""
    asd_penalized: dict[str, bool] = field(default_factory=dict)


def _check(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt) -> float | None:
    """2|P & G| / (|P| + |G|); ``None`` when both masks are empty."""
    pred, gt = _check(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def boundary(mask) -> np.ndarray:
    """Set pixels removed by a 4-connected erosion (frame edge counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed_mean(src, dst_boundary) -> float:
    # exact Euclidean distance from every pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst_boundary)
    return float(dist[src].mean())


def asd(pred, gt, spacing: SpacingInfo | float = 1.0, symmetric=True) -> float | None:
    """Average surface distance in mm.

    ``None`` when ``gt`` is empty; an empty prediction against a non-empty
    ground truth scores the frame diagonal.
    """
    pred, gt = _check(pred, gt)
    mm = spacing.mm_per_pixel if isinstance(spacing, SpacingInfo) else float(spacing)
    if not gt.any():
        return None
    if not pred.any():
        return math.hypot(*gt.shape) * mm
    bp, bg = boundary(pred), boundary(gt)
    d_pg = _directed_mean(bp, bg)
    if not symmetric:
        return d_pg * mm
    d_gp = _directed_mean(bg, bp)
    return 0.5 * (d_pg + d_gp) * mm


def frame_record(frame_id, pred_masks, gt_masks, spacing, split="", mode="", classes=ARTICULATORS) -> MetricRecord:
    rec = MetricRecord(frame_id, {}, {}, split, mode)
    for c, name in enumerate(classes):
        rec.dsc[name] = dsc(pred_masks[c], gt_masks[c])
        rec.asd[name] = asd(pred_masks[c], gt_masks[c], spacing)
        rec.asd_penalized[name] = bool(np.asarray(gt_masks[c]).any() and not np.asarray(pred_masks[c]).any())
    return rec


@dataclass
class Summary:
    dsc_mean: float  # percent
    dsc_std: float
    asd_mean: float  # mm
    asd_std: float
    n: int
    per_class: dict[str, tuple[float, float]] = field(default_factory=dict)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        raise ValueError("cannot aggregate an empty group")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def aggregate_values(values: Iterable[float | None]) -> tuple[float, float]:
    """Mean and sample standard deviation over defined values."""
    return _mean_std([v for v in values if v is not None])


def summarize(records: Sequence[MetricRecord], classes=ARTICULATORS) -> Summary:
    """Per-class means, macro-averaged over classes; DSC in percent.

    The spread is the sample standard deviation of per-frame class-averaged
    scores.
    """
    if not records:
        raise ValueError("cannot aggregate an empty group")
    per_class = {}
    for name in classes:
        d = [r.dsc[name] for r in records if r.dsc.get(name) is not None]
        a = [r.asd[name] for r in records if r.asd.get(name) is not None]
        per_class[name] = (statistics.fmean(d) * 100 if d else float("nan"),
                           statistics.fmean(a) if a else float("nan"))
    dsc_m = statistics.fmean(v[0] for v in per_class.values() if not math.isnan(v[0]))
    asd_vals = [v[1] for v in per_class.values() if not math.isnan(v[1])]
    asd_m = statistics.fmean(asd_vals) if asd_vals else float("nan")

    frame_d, frame_a = [], []
    for r in records:
        d = [v for v in r.dsc.values() if v is not None]
        a = [v for v in r.asd.values() if v is not None]
        if d:
            frame_d.append(100 * statistics.fmean(d))
        if a:
            frame_a.append(statistics.fmean(a))
    dsc_s = _mean_std(frame_d)[1] if frame_d else float("nan")
    asd_s = _mean_std(frame_a)[1] if frame_a else float("nan")
    return Summary(dsc_m, dsc_s, asd_m, asd_s, len(records), per_class)


def aggregate(records: Sequence[MetricRecord], group_keys=("split", "mode")) -> dict[tuple, Summary]:
    groups: dict[tuple, list[MetricRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in group_keys), []).append(r)
    if not groups:
        raise ValueError("cannot aggregate an empty record list")
    return {k: summarize(v) for k, v in sorted(groups.items())}


def write_records(records: Sequence[MetricRecord], path: str | Path, classes=ARTICULATORS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["frame_id", "split", "mode"] + [f"dsc_{c}" for c in classes] + [f"asd_{c}" for c in classes])
        for r in records:
            w.writerow(
                [r.frame_id, r.split, r.mode]
                + ["" if r.dsc[c] is None else f"{r.dsc[c]:.6f}" for c in classes]
                + ["" if r.asd[c] is None else f"{r.asd[c]:.6f}" for c in classes]
            )


def write_summary_table(summaries: dict[tuple, Summary], path: str | Path) -> None:
    """One row per (split, mode) with DSC(%) and ASD(mm) mean ± std columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["split", "mode", "n", "DSC(%)", "DSC_std", "ASD(mm)", "ASD_std"])
        for key, s in summaries.items():
            w.writerow([*key, s.n, f"{s.dsc_mean:.2f}", f"{s.dsc_std:.2f}", f"{s.asd_mean:.2f}", f"{s.asd_std:.2f}"])


def measure_latency(run: Callable[[], object], repeats: int = 5, warmup: int = 1) -> dict:
    """Median wall-clock milliseconds of ``run`` over ``repeats`` calls.

    ``run`` should perform one forward pass over a 50-frame batch.
    """
    for _ in range(warmup):
        run()
    times = []
    for _ in range(max(5, repeats)):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1000.0)
    return {"median_ms": statistics.median(times), "min_ms": min(times), "max_ms": max(times), "samples": times}
