"""Data tensorization, Stage-2/Stage-3 training loops and evaluation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..contrastive import ContrastiveBatch, dual_level_loss, stage2_schedule
from ..dataio import Corpus, SplitSpec
from ..encoders import DualEncoder
from ..metrics import SpacingInfo, dsc, frame_record
from ..phonology import ARTICULATORS, PhonemeInventory, default_inventory
from ..priorgen import build_prior_table, neutral_prior, render_prior
from ..segmodel import SegModel, predict_masks, seg_loss
from .config import RunConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TensorSet:
    keys: list[tuple[str, str, int]]
    images: torch.Tensor  # N x 1 x H x W
    masks: torch.Tensor  # N x 4 x H x W uint8
    audio: torch.Tensor  # N x T_a
    phon: torch.Tensor  # N x 15
    priors: torch.Tensor  # N x 4 x H x W uint8

    def __len__(self):
        return len(self.keys)

    def subset(self, idx) -> "TensorSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TensorSet([self.keys[i] for i in idx.tolist()], self.images[idx], self.masks[idx],
                         self.audio[idx], self.phon[idx], self.priors[idx])


@dataclass
class PreparedData:
    train: TensorSet
    val: TensorSet
    eval: TensorSet
    split: SplitSpec
    spacing: SpacingInfo
    tables: dict = field(default_factory=dict)


def tensorize(samples, inventory, tables, height, width) -> TensorSet:
    n = len(samples)
    images = torch.from_numpy(np.stack([s.image for s in samples])[:, None]) if n else torch.zeros(0, 1, height, width)
    masks = torch.from_numpy(np.stack([s.masks for s in samples])) if n else torch.zeros(0, 4, height, width, dtype=torch.uint8)
    audio = torch.from_numpy(np.stack([s.audio for s in samples])) if n else torch.zeros(0, 1)
    phon = torch.tensor(np.array([inventory.encode(s.phoneme).as_array() for s in samples]).reshape(n, -1))
    priors = []
    for s in samples:
        table = tables.get(s.subject_id)
        if table is None:
            priors.append(neutral_prior(height, width))
        else:
            priors.append(render_prior(inventory.encode(s.phoneme), table, height, width, inventory))
    pri = torch.from_numpy(np.stack(priors).astype(np.uint8)) if n else torch.zeros(0, 4, height, width, dtype=torch.uint8)
    return TensorSet([s.key for s in samples], images, masks, audio, phon, pri)


def prepare_data(corpus: Corpus, split: SplitSpec, inventory: PhonemeInventory | None = None) -> PreparedData:
    """Tensorize split members and attach subject-specific bounding-box priors.

    Prior tables come from each training speaker's training frames; speakers
    without a table (unseen speakers) receive the neutral prior.
    """
    inventory = inventory or default_inventory()
    by_key = corpus.by_key()
    train = [by_key[k] for k in split.train]
    tables = {}
    for spk in split.train_speakers:
        own = [s for s in train if s.subject_id == spk]
        if own:
            tables[spk] = build_prior_table(own, inventory)
    h, w = corpus.height, corpus.width
    val_keys = split.val or split.train
    return PreparedData(
        train=tensorize(train, inventory, tables, h, w),
        val=tensorize([by_key[k] for k in val_keys], inventory, tables, h, w),
        eval=tensorize([by_key[k] for k in split.eval], inventory, tables, h, w),
        split=split,
        spacing=SpacingInfo(corpus.spacing_mm),
        tables=tables,
    )


def _batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.as_tensor(order[i : i + batch_size], dtype=torch.long)


def _check_finite(loss, where):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss during {where}")


# --------------------------------------------------------------------------
# Stage 2


@dataclass
class Stage2Result:
    state: dict
    log: list[dict]
    best_epoch: int
    best_val: float


@torch.no_grad()
def _audio_globals(encoder, audio, batch_size=64):
    encoder.eval()
    return torch.cat([encoder(audio[i : i + batch_size])[1] for i in range(0, len(audio), batch_size)]) \
        if len(audio) else torch.zeros(0, encoder.cfg.dim)


def _contrastive_terms(model, images, audio_global, cfg):
    fused, global_token = model.visual_tokens(images)
    batch = ContrastiveBatch(
        z_image=model.project(global_token, "image"),
        z_audio=model.project(audio_global, "audio"),
        z_patch_mean=model.project(fused.tokens.mean(dim=1), "patch"),
    )
    return dual_level_loss(batch, cfg.contrastive(), return_terms=True)


def train_stage2(cfg: RunConfig, data: PreparedData, progress=None) -> Stage2Result:
    """Dual-level contrastive pretraining under the two-phase freezing schedule."""
    torch.manual_seed(cfg.seed)
    model = DualEncoder(cfg.encoder(1))
    sched = cfg.stage2_schedule()
    depth = cfg.model.depth

    groups = [
        {"params": list(model.fusion.parameters()), "lr": sched.head_lr, "name": "fusion"},
        {"params": list(model.heads.parameters()), "lr": sched.head_lr, "name": "heads"},
    ]
    for k in range(1, depth + 1):
        groups.append({"params": model.visual.layer_parameters(k), "lr": sched.finetune_lr, "name": f"visual_layer_{k}"})
    opt = torch.optim.AdamW(groups, weight_decay=cfg.stage2.weight_decay, betas=tuple(cfg.betas), eps=cfg.adam_eps)

    # the audio encoder never trains in this stage, so its pooled features are fixed
    train_audio = _audio_globals(model.audio, data.train.audio)
    val_audio = _audio_globals(model.audio, data.val.audio)

    best = (math.inf, 0, None)
    rows = []
    for epoch in range(1, sched.epochs + 1):
        plan = stage2_schedule(epoch, depth, sched)
        for p in model.parameters():
            p.requires_grad_(False)
        for g in opt.param_groups:
            on = g["name"] in plan["groups"]
            for p in g["params"]:
                p.requires_grad_(on)

        model.train()
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        sums = np.zeros(3)
        n = 0
        for idx in _batches(len(data.train), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            total, g2g, l2g = _contrastive_terms(model, data.train.images[idx], train_audio[idx], cfg)
            _check_finite(total, f"stage-2 epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sums += [total.item() * len(idx), g2g.item() * len(idx), l2g.item() * len(idx)]
            n += len(idx)
        tr = sums / max(n, 1)

        model.eval()
        vs, vn = np.zeros(3), 0
        with torch.no_grad():
            for idx in _batches(len(data.val), cfg.batch_size):
                if len(idx) < 2:
                    continue
                total, g2g, l2g = _contrastive_terms(model, data.val.images[idx], val_audio[idx], cfg)
                vs += [total.item() * len(idx), g2g.item() * len(idx), l2g.item() * len(idx)]
                vn += len(idx)
        va = vs / max(vn, 1)
        row = {
            "epoch": epoch, "train_total": tr[0], "train_g2g": tr[1], "train_l2g": tr[2],
            "val_total": va[0], "val_g2g": va[1], "val_l2g": va[2],
            "lr_head": sched.head_lr,
            "lr_visual": sched.finetune_lr if plan["visual_layers"] else 0.0,
            "visual_layers": ",".join(map(str, plan["visual_layers"])),
        }
        rows.append(row)
        if va[0] < best[0]:
            best = (va[0], epoch, copy.deepcopy(model.state_dict()))
        if progress:
            progress(f"stage2 epoch {epoch}: train {tr[0]:.4f} val {va[0]:.4f}")
    return Stage2Result(best[2], rows, best[1], best[0])


# --------------------------------------------------------------------------
# Stage 3 and baselines


@dataclass
class Variant:
    """One segmentation model recipe (an ablation row's training side)."""

    name: str
    fusion: str = "xattn"
    use_prior: bool = True
    use_phon: bool = False
    pretrained: bool = True
    p_audio: float | None = None
    p_prior: float | None = None
    val_mode: str = "infer-image-only"


OURS = Variant("ours")


@dataclass
class SegResult:
    model: SegModel
    log: list[dict]
    best_epoch: int
    best_val_dice: float
    stopped_epoch: int
    trainable: list[str]


@torch.no_grad()
def _audio_sequences(encoder, audio, batch_size=64):
    encoder.eval()
    seqs, globs = [], []
    for i in range(0, len(audio), batch_size):
        s, g = encoder(audio[i : i + batch_size])
        seqs.append(s)
        globs.append(g)
    return torch.cat(seqs), torch.cat(globs)


def build_segmodel(cfg: RunConfig, variant: Variant) -> SegModel:
    over = {}
    if variant.p_audio is not None:
        over["p_audio"] = variant.p_audio
    if variant.p_prior is not None:
        over["p_prior"] = variant.p_prior
    return SegModel(cfg.segmodel(variant.fusion, variant.use_prior, variant.use_phon, **over))


def _model_inputs(ts: TensorSet, idx, variant: Variant, audio_cache=None, mode="train"):
    kw = {}
    if variant.use_prior and mode != "infer-image-only":
        kw["prior"] = ts.priors[idx].float()
    if variant.fusion != "none" and mode != "infer-image-only":
        if audio_cache is not None:
            kw["audio_features"] = (audio_cache[0][idx], audio_cache[1][idx])
        else:
            kw["audio"] = ts.audio[idx]
    if variant.use_phon and mode != "infer-image-only":
        kw["phon"] = ts.phon[idx]
    return kw


@torch.no_grad()
def predict(model: SegModel, ts: TensorSet, variant: Variant, mode: str, batch_size=64, audio_cache=None):
    model.eval()
    out = []
    for idx in _batches(len(ts), batch_size):
        kw = _model_inputs(ts, idx, variant, audio_cache, mode)
        out.append(predict_masks(model(ts.images[idx], mode=mode, **kw)))
    return torch.cat(out) if out else torch.zeros(0, 4, *ts.images.shape[-2:], dtype=torch.uint8)


def mean_foreground_dice(pred, gt) -> float:
    vals = []
    for p, g in zip(pred.numpy(), gt.numpy()):
        for c in range(len(ARTICULATORS)):
            v = dsc(p[c], g[c])
            if v is not None:
                vals.append(v)
    return float(np.mean(vals)) if vals else 0.0


def train_segmenter(cfg: RunConfig, data: PreparedData, variant: Variant = OURS, stage2_state: dict | None = None,
                    progress=None) -> SegResult:
    """Train one segmentation recipe with early stopping on validation Dice.

    With ``stage2_state`` the encoders and fusion block are loaded and frozen;
    only the decoder, head, null bank and the prior slices of the patch
    embedding are optimized.
    """
    torch.manual_seed(cfg.seed + 1000)
    model = build_segmodel(cfg, variant)
    frozen = set()
    if variant.pretrained:
        if stage2_state is None:
            raise ValueError(f"variant {variant.name!r} needs a stage-2 state")
        model.load_stage2(stage2_state)
        frozen = set(model.frozen_parameter_names())
    for n, p in model.named_parameters():
        p.requires_grad_(n not in frozen)
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=cfg.stage3.lr,
                            weight_decay=cfg.stage3.weight_decay, betas=tuple(cfg.betas), eps=cfg.adam_eps)

    train_cache = val_cache = None
    if variant.fusion != "none" and variant.pretrained:
        train_cache = _audio_sequences(model.audio, data.train.audio)
        val_cache = _audio_sequences(model.audio, data.val.audio)

    max_epochs = cfg.stage3_epochs()
    patience = cfg.stage3.patience
    best = (-1.0, 0, None)
    rows = []
    stale = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        model.train()
        if frozen:
            for name, mod in model.encoder_modules().items():
                mod.eval()
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        tot, n = 0.0, 0
        for idx in _batches(len(data.train), cfg.batch_size, rng):
            kw = _model_inputs(data.train, idx, variant, train_cache, "train")
            logits = model(data.train.images[idx], mode="train", **kw)
            loss = seg_loss(logits, data.train.masks[idx])
            _check_finite(loss, f"{variant.name} epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            n += len(idx)
        pred = predict(model, data.val, variant, variant.val_mode, audio_cache=val_cache)
        vdice = mean_foreground_dice(pred, data.val.masks)
        rows.append({"epoch": epoch, "train_loss": tot / max(n, 1), "val_dice": vdice})
        if progress:
            progress(f"{variant.name} epoch {epoch}: loss {tot / max(n, 1):.4f} val dice {vdice:.4f}")
        if vdice > best[0]:
            best = (vdice, epoch, copy.deepcopy(model.state_dict()))
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    model.load_state_dict(best[2])
    return SegResult(model, rows, best[1], best[0], epoch, trainable)


def evaluate_model(model: SegModel, ts: TensorSet, variant: Variant, mode: str, spacing: SpacingInfo,
                   split_tag: str = "", mode_tag: str | None = None):
    pred = predict(model, ts, variant, mode).numpy()
    gt = ts.masks.numpy()
    tag = mode_tag or ("image-only" if mode == "infer-image-only" else "full")
    return [
        frame_record(f"{k[0]}/{k[1]}/{k[2]:05d}", pred[i], gt[i], spacing, split_tag, tag)
        for i, k in enumerate(ts.keys)
    ]


def model_latency(model: SegModel, ts: TensorSet, variant: Variant, mode: str, n_frames=50, repeats=5):
    """Median ms for one ``n_frames`` forward pass (raw audio in full mode)."""
    from ..metrics import measure_latency

    idx = torch.arange(min(n_frames, len(ts)))
    if len(idx) < n_frames:
        idx = idx.repeat(math.ceil(n_frames / max(len(idx), 1)))[:n_frames]
    kw = _model_inputs(ts, idx, variant, None, mode)
    images = ts.images[idx]
    model.eval()

    def run():
        with torch.no_grad():
            model(images, mode=mode, **kw)

    return measure_latency(run, repeats=repeats)
