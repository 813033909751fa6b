"""Run-directory level operations behind the CLI.

A run directory holds the effective config echo, the seed, the corpus
manifest hash, per-stage logs, checkpoints and metric tables.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..dataio import (
    Corpus,
    generate_corpus,
    load_corpus,
    make_splits,
    manifest_hash,
    preprocess_frame,
    save_corpus,
    subject_stats,
    verify_manifest,
)
from ..metrics import aggregate, summarize, write_records, write_summary_table
from ..phonology import default_inventory, load_inventory
from ..priorgen import save_prior_tables
from ..segmodel import predict_masks
from .ablation import ROW_COLUMNS, ROW_NAMES, ROW_SPECS, host_descriptor, row_values, run_ablation
from .checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .pipeline import OURS, PreparedData, Variant, build_segmodel, evaluate_model, prepare_data, train_segmenter, train_stage2

log = logging.getLogger(__name__)

MODE_FLAGS = {"full": "infer-full", "image-only": "infer-image-only"}


class EvaluationError(RuntimeError):
    pass


def write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_tsv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def setup_run(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dumps())
    (out / "seed.txt").write_text(f"{cfg.seed}\n")
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    return out


def inventory_for(cfg: RunConfig):
    path = cfg.phonology.inventory_path
    return load_inventory(path) if path else default_inventory()


def synth(cfg: RunConfig, root) -> str:
    d = cfg.data
    corpus = generate_corpus(d.n_speakers, d.n_tasks, d.frames_per_task, d.height, d.width, d.sample_rate, d.fps,
                             seed=cfg.seed, native_size=d.native_size, snr_db=d.snr_db, inventory=inventory_for(cfg))
    return save_corpus(corpus, root)


def obtain_corpus(cfg: RunConfig, out: Path, load_audio=True) -> Corpus:
    """Load ``data.corpus_dir``, or synthesize one into ``<out>/corpus``.

    The manifest hash is recorded in ``<out>/corpus_manifest.sha256``.
    """
    d = cfg.data
    root = Path(d.corpus_dir) if d.corpus_dir else out / "corpus"
    if not (root / "manifest.tsv").exists():
        if d.corpus_dir:
            raise FileNotFoundError(f"corpus directory {root} has no manifest.tsv")
        synth(cfg, root)
    bad = [p for p in verify_manifest(root) if load_audio or not p.endswith("audio.wav")]
    if bad:
        raise FileNotFoundError(f"corpus {root}: {len(bad)} files missing or modified, first {bad[0]}")
    (out / "corpus_manifest.sha256").write_text(manifest_hash(root) + "\n")
    return load_corpus(root, d.height, d.width, load_audio=load_audio)


def prepare(cfg: RunConfig, out: Path, split_tag: str | None = None, load_audio=True) -> PreparedData:
    corpus = obtain_corpus(cfg, out, load_audio)
    tag = split_tag or cfg.data.split
    split = make_splits(corpus, tag, cfg.seed, cfg.data.n_eval_speakers, cfg.data.n_eval_tasks)
    (out / f"split_{tag}.json").write_text(json.dumps(split.to_dict(), indent=2) + "\n")
    return prepare_data(corpus, split, inventory_for(cfg))


def build_priors(cfg: RunConfig, out) -> Path:
    out = setup_run(cfg, out)
    data = prepare(cfg, out)
    path = out / "priors.tsv"
    save_prior_tables(data.tables.values(), path)
    return path


STAGE2_COLUMNS = ["epoch", "train_total", "train_g2g", "train_l2g", "val_total", "val_g2g", "val_l2g",
                  "lr_head", "lr_visual", "visual_layers"]


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def pretrain(cfg: RunConfig, out, progress=None) -> Path:
    out = setup_run(cfg, out)
    data = prepare(cfg, out)
    t0 = time.perf_counter()
    res = train_stage2(cfg, data, progress)
    write_tsv(out / "stage2_log.tsv", STAGE2_COLUMNS, [[_fmt(r[c]) for c in STAGE2_COLUMNS] for r in res.log])
    path = out / "stage2.pt"
    save_checkpoint(path, "stage2", cfg, res.state, best_epoch=res.best_epoch, best_val=res.best_val,
                    seconds=time.perf_counter() - t0)
    return path


def _variant_to_dict(v: Variant) -> dict:
    return asdict(v)


def train(cfg: RunConfig, out, stage2_path=None, progress=None, variant: Variant = OURS) -> Path:
    """Stage 3 from a Stage-2 checkpoint; writes ``stage3.pt`` and ``stage3_log.tsv``."""
    stage2_path = Path(stage2_path or Path(out) / "stage2.pt")
    s2 = load_checkpoint(stage2_path, "stage2", cfg) if variant.pretrained else None
    out = setup_run(cfg, out)
    data = prepare(cfg, out)
    res = train_segmenter(cfg, data, variant, s2["state"] if s2 else None, progress)
    write_tsv(out / "stage3_log.tsv", ["epoch", "train_loss", "val_dice"],
              [[r["epoch"], _fmt(r["train_loss"]), _fmt(r["val_dice"])] for r in res.log])
    path = out / "stage3.pt"
    save_checkpoint(
        path, "stage3", cfg, res.model.state_dict(),
        variant=_variant_to_dict(variant),
        stage2_hash=file_hash(stage2_path) if s2 else None,
        best_epoch=res.best_epoch, best_val_dice=res.best_val_dice, stopped_epoch=res.stopped_epoch,
        trainable=res.trainable,
    )
    return path


def load_segmenter(path, cfg: RunConfig | None = None):
    payload = load_checkpoint(path, "stage3")
    ckpt_cfg = RunConfig.from_dict(payload["config"])
    if cfg is not None:
        load_checkpoint(path, "stage3", cfg)  # signature check against the caller's config
    variant = Variant(**payload["variant"])
    model = build_segmodel(ckpt_cfg, variant)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, variant, ckpt_cfg, payload


def evaluate(cfg: RunConfig, out, checkpoint, split_tag: str | None = None, mode: str = "image-only"):
    """Evaluate a Stage-3 checkpoint on a split's evaluation frames."""
    if mode not in MODE_FLAGS:
        raise ValueError(f"mode must be one of {sorted(MODE_FLAGS)}")
    model, variant, _, _ = load_segmenter(checkpoint, cfg)
    out = setup_run(cfg, out)
    tag = split_tag or cfg.data.split
    try:
        data = prepare(cfg, out, tag, load_audio=mode == "full")
    except FileNotFoundError as exc:
        raise EvaluationError(str(exc)) from exc
    if len(data.eval) == 0:
        raise EvaluationError(f"split {tag} has no evaluation frames")
    records = evaluate_model(model, data.eval, variant, MODE_FLAGS[mode], data.spacing, tag, mode)
    stem = out / f"eval_{tag}_{mode}"
    write_records(records, f"{stem}_frames.tsv")
    groups = aggregate(records)
    write_summary_table(groups, f"{stem}_summary.tsv")
    return groups


def predict_dir(checkpoint, input_dir, out, mode: str = "image-only") -> Path:
    """Segment a frames directory (image-only) or a corpus task directory (full).

    Writes ``<out>/masks/<frame>.png`` (bit c = articulator c) and
    ``<out>/manifest.tsv``.
    """
    if mode not in MODE_FLAGS:
        raise ValueError(f"mode must be one of {sorted(MODE_FLAGS)}")
    model, variant, cfg, _ = load_segmenter(checkpoint)
    src = Path(input_dir)
    frames_dir = src / "frames" if (src / "frames").is_dir() else src
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise EvaluationError(f"no PNG frames under {frames_dir}")
    raw = [np.asarray(Image.open(p)).astype(np.float64) for p in paths]
    stats = subject_stats(raw)
    h, w = cfg.data.height, cfg.data.width
    images = torch.from_numpy(np.stack([preprocess_frame(r, stats, h, w) for r in raw])[:, None])
    kw = {}
    if mode == "full":
        kw = _full_inputs(cfg, variant, src, len(paths))
    out = Path(out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    with torch.no_grad():
        for i in range(0, len(paths), 32):
            sl = slice(i, i + 32)
            logits = model(images[sl], mode=MODE_FLAGS[mode], **{k: v[sl] for k, v in kw.items()})
            masks = predict_masks(logits).numpy()
            for p, m in zip(paths[sl], masks):
                packed = np.zeros(m.shape[1:], np.uint8)
                for c in range(m.shape[0]):
                    packed |= m[c] << c
                Image.fromarray(packed).save(out / "masks" / p.name)
                rows.append([p.name, *[int(m[c].sum()) for c in range(m.shape[0])]])
    write_tsv(out / "manifest.tsv", ["frame", "tongue_px", "velum_px", "upper_lip_px", "lower_lip_px"], rows)
    return out / "manifest.tsv"


def _full_inputs(cfg: RunConfig, variant: Variant, task_dir: Path, n: int) -> dict:
    from scipy.io import wavfile

    from ..dataio import audio_context

    wav = task_dir / "audio.wav"
    align = task_dir / "alignment.tsv"
    if not wav.exists() or not align.exists():
        raise EvaluationError(f"full mode needs {wav.name} and {align.name} in {task_dir}")
    _, wave = wavfile.read(wav)
    wave = np.asarray(wave, dtype=np.float32)
    phonemes = [r["phoneme"] for r in read_tsv(align)]
    if len(phonemes) != n:
        raise EvaluationError(f"{align} lists {len(phonemes)} frames, found {n} images")
    audio = np.stack([audio_context(wave, i, cfg.data.fps, cfg.data.sample_rate) for i in range(n)])
    inv = inventory_for(cfg)
    kw = {"audio": torch.from_numpy(audio)}
    if variant.use_prior:
        # no annotation for this speaker: neutral prior
        kw["prior"] = torch.ones(n, 4, cfg.data.height, cfg.data.width)
    if variant.use_phon:
        kw["phon"] = torch.tensor(np.stack([inv.encode(p).as_array() for p in phonemes]))
    return kw


def ablate(cfg: RunConfig, out, seeds=None, rows=ROW_NAMES, progress=None, latency=True):
    """Run the ablation rows for each seed; writes ``ablation.tsv`` and per-row logs."""
    out = setup_run(cfg, out)
    seeds = list(seeds) if seeds else [cfg.seed]
    all_rows = []
    t0 = time.perf_counter()
    for seed in seeds:
        scfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
        sdir = out / f"seed{seed}"
        sdir.mkdir(exist_ok=True)
        data = prepare(scfg, sdir)
        result, side = run_ablation(scfg, data, rows, progress=progress, latency=latency)
        if side["stage2"] is not None:
            res = side["stage2"]
            write_tsv(sdir / "stage2_log.tsv", STAGE2_COLUMNS,
                      [[_fmt(r[c]) for c in STAGE2_COLUMNS] for r in res.log])
        for r in result:
            slug = r.name.replace("/", "_").replace("+", "plus_")
            if r.train_log:
                write_tsv(sdir / f"{slug}_log.tsv", ["epoch", "train_loss", "val_dice"],
                          [[x["epoch"], _fmt(x["train_loss"]), _fmt(x["val_dice"])] for x in r.train_log])
            if r.records:
                write_records(r.records, sdir / f"{slug}_frames.tsv")
        all_rows.extend(result)
    write_tsv(out / "ablation.tsv", ROW_COLUMNS, [row_values(r) for r in all_rows])
    summary = summarize_ablation(all_rows)
    write_tsv(out / "ablation_summary.tsv", ["name", "n_seeds", "DSC(%)", "DSC_seed_std", "ASD(mm)", "params",
                                             "latency_ms"], summary)
    (out / "host.txt").write_text(f"{host_descriptor()}\nseconds {time.perf_counter() - t0:.1f}\n")
    return all_rows


def summarize_ablation(rows) -> list[list]:
    out = []
    for name in ROW_NAMES:
        rs = [r for r in rows if r.name == name and r.error is None]
        if not rs:
            continue
        d = np.array([r.dsc for r in rs])
        out.append([name, len(rs), f"{d.mean():.2f}", f"{d.std(ddof=1) if len(d) > 1 else 0.0:.2f}",
                    f"{np.mean([r.asd for r in rs]):.2f}", rs[0].params,
                    f"{np.median([r.latency_ms for r in rs]):.1f}"])
    return out
