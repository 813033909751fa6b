"""Stage-by-stage ablation runner."""

from __future__ import annotations

import logging
import platform
import traceback
from dataclasses import dataclass, field

import torch

from ..metrics import summarize
from ..segmodel import count_parameters
from .config import RunConfig
from .pipeline import (
    OURS,
    PreparedData,
    Variant,
    evaluate_model,
    model_latency,
    train_segmenter,
    train_stage2,
)

log = logging.getLogger(__name__)

IMAGE_ONLY = "infer-image-only"
FULL = "infer-full"


@dataclass(frozen=True)
class RowSpec:
    name: str
    variant: Variant
    stage1: bool
    stage2: bool
    stage3: bool
    eval_mode: str
    inputs: tuple[bool, bool, bool]  # image, audio, phonology at inference
    shares: str | None = None  # reuse another row's trained model


ROW_SPECS = (
    RowSpec("image-only", Variant("image-only", "none", False, False, False, 0.0, 0.0, IMAGE_ONLY),
            False, False, False, IMAGE_ONLY, (True, False, False)),
    RowSpec("IA-concat", Variant("IA-concat", "concat", False, False, False, 0.0, 0.0, FULL),
            False, False, False, FULL, (True, True, False)),
    RowSpec("IAP-concat", Variant("IAP-concat", "concat", False, True, False, 0.0, 0.0, FULL),
            False, False, False, FULL, (True, True, True)),
    RowSpec("+bbox-prior", Variant("+bbox-prior", "concat", True, False, False, None, None, IMAGE_ONLY),
            True, False, False, IMAGE_ONLY, (True, False, False)),
    RowSpec("+pretrain", Variant("+pretrain", "concat", True, False, True, None, None, IMAGE_ONLY),
            True, True, False, IMAGE_ONLY, (True, False, False)),
    RowSpec("w/-full-input", OURS, True, True, True, FULL, (True, True, True), shares="ours"),
    RowSpec("ours", OURS, True, True, True, IMAGE_ONLY, (True, False, False)),
)
ROW_NAMES = tuple(r.name for r in ROW_SPECS)


@dataclass
class AblationRow:
    name: str
    stage1: bool
    stage2: bool
    stage3: bool
    inputs: tuple[bool, bool, bool]
    seed: int
    dsc: float = float("nan")
    dsc_std: float = float("nan")
    asd: float = float("nan")
    asd_std: float = float("nan")
    params: int = 0
    latency_ms: float = float("nan")
    best_epoch: int = 0
    stopped_epoch: int = 0
    error: str | None = None
    records: list = field(default_factory=list, repr=False)
    train_log: list = field(default_factory=list, repr=False)


def host_descriptor() -> str:
    return f"{platform.processor() or platform.machine()} / {torch.get_num_threads()} threads / torch {torch.__version__}"


def run_ablation(cfg: RunConfig, data: PreparedData, rows=ROW_NAMES, stage2_state=None, progress=None,
                 latency=True) -> tuple[list[AblationRow], dict]:
    """Train and evaluate the requested rows on the eval split.

    A failing row is reported with its error and the remaining rows still run.
    Returns the rows plus a side dict holding the stage-2 result and trained
    models keyed by row name.
    """
    unknown = set(rows) - set(ROW_NAMES)
    if unknown:
        raise ValueError(f"unknown ablation rows: {sorted(unknown)}")
    specs = [r for r in ROW_SPECS if r.name in rows]
    side: dict = {"models": {}, "stage2": None}
    needs_s2 = any(r.variant.pretrained for r in specs)
    if needs_s2 and stage2_state is None:
        res = train_stage2(cfg, data, progress)
        side["stage2"] = res
        stage2_state = res.state

    trained: dict = {}
    out = []
    for spec in specs:
        row = AblationRow(spec.name, spec.stage1, spec.stage2, spec.stage3, spec.inputs, cfg.seed)
        try:
            key = spec.shares or spec.name
            if key not in trained:
                trained[key] = train_segmenter(cfg, data, spec.variant, stage2_state if spec.variant.pretrained else None,
                                               progress)
            res = trained[key]
            model = res.model
            side["models"][spec.name] = model
            row.records = evaluate_model(model, data.eval, spec.variant, spec.eval_mode, data.spacing,
                                         data.split.tag, spec.name)
            s = summarize(row.records)
            row.dsc, row.dsc_std, row.asd, row.asd_std = s.dsc_mean, s.dsc_std, s.asd_mean, s.asd_std
            row.params = count_parameters(model)
            row.best_epoch, row.stopped_epoch, row.train_log = res.best_epoch, res.stopped_epoch, res.log
            if latency:
                row.latency_ms = model_latency(model, data.eval, spec.variant, spec.eval_mode)["median_ms"]
        except Exception as exc:  # noqa: BLE001 - partial report by design
            log.error("row %s failed: %s", spec.name, exc)
            row.error = f"{type(exc).__name__}: {exc}"
            log.debug(traceback.format_exc())
        out.append(row)
        if progress:
            progress(f"row {row.name}: DSC {row.dsc:.2f} ASD {row.asd:.2f} params {row.params} "
                     f"latency {row.latency_ms:.1f} ms" + (f" FAILED {row.error}" if row.error else ""))
    return out, side


ROW_COLUMNS = ["name", "seed", "stage1", "stage2", "stage3", "image", "audio", "phon",
               "DSC(%)", "DSC_std", "ASD(mm)", "ASD_std", "params", "latency_ms", "best_epoch", "error"]


def row_values(r: AblationRow) -> list:
    mark = lambda b: "x" if b else "-"  # noqa: E731
    return [r.name, r.seed, mark(r.stage1), mark(r.stage2), mark(r.stage3), *map(mark, r.inputs),
            f"{r.dsc:.2f}", f"{r.dsc_std:.2f}", f"{r.asd:.2f}", f"{r.asd_std:.2f}", r.params,
            f"{r.latency_ms:.1f}", r.best_epoch, r.error or ""]
