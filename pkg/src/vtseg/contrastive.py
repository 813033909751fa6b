"""Dual-level InfoNCE alignment and the staged unfreezing schedule."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class ContrastiveLossConfig:
    temperature: float = 0.07
    lam: float = 0.5
    symmetric: bool = True

    def __post_init__(self):
        if not (self.temperature > 0 and torch.isfinite(torch.tensor(self.temperature))):
            raise ValueError(f"temperature must be finite and positive, got {self.temperature}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class ContrastiveBatch:
    z_image: torch.Tensor
    z_audio: torch.Tensor
    z_patch_mean: torch.Tensor

    def __post_init__(self):
        sizes = {self.z_image.shape[0], self.z_audio.shape[0], self.z_patch_mean.shape[0]}
        if len(sizes) != 1 or sizes.pop() < 1:
            raise ValueError("contrastive blocks must share a batch size >= 1")


def info_nce(anchors, positives, temperature=0.07, symmetric=True):
    """Mean of -log softmax(s_ii / tau) over in-batch similarities s_ij = <a_i, p_j>.

    With ``symmetric`` the anchor->positive and positive->anchor directions
    are averaged.
    """
    if anchors.shape[0] == 0:
        raise ValueError("InfoNCE needs at least one pair")
    if anchors.shape != positives.shape:
        raise ValueError(f"shape mismatch {tuple(anchors.shape)} vs {tuple(positives.shape)}")
    logits = anchors @ positives.T / temperature
    target = torch.arange(anchors.shape[0], device=anchors.device)
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


def dual_level_loss(batch: ContrastiveBatch, cfg: ContrastiveLossConfig | None = None, return_terms=False):
    """Global-to-global plus lambda-weighted local-to-global InfoNCE."""
    cfg = cfg or ContrastiveLossConfig()
    g2g = info_nce(batch.z_image, batch.z_audio, cfg.temperature, cfg.symmetric)
    l2g = info_nce(batch.z_patch_mean, batch.z_audio, cfg.temperature, cfg.symmetric)
    total = g2g + cfg.lam * l2g
    if return_terms:
        return total, g2g, l2g
    return total


@dataclass
class Stage2Schedule:
    """Epoch boundaries of the two-phase schedule (1-based epochs).

    Phase 1 trains only the fusion block and heads; from ``top_layer_epoch``
    the top visual layer joins at ``finetune_lr``; from ``top_third_epoch``
    the top third of the visual layers.
    """

    epochs: int = 50
    top_layer_epoch: int = 21
    top_third_epoch: int = 31
    head_lr: float = 1e-4
    finetune_lr: float = 1e-5

    def scaled(self, scale: float) -> "Stage2Schedule":
        if scale == 1.0:
            return self
        return Stage2Schedule(
            epochs=max(1, round(self.epochs * scale)),
            top_layer_epoch=round((self.top_layer_epoch - 1) * scale) + 1,
            top_third_epoch=round((self.top_third_epoch - 1) * scale) + 1,
            head_lr=self.head_lr,
            finetune_lr=self.finetune_lr,
        )


def top_third(depth: int) -> list[int]:
    n = max(1, round(depth / 3))
    return list(range(depth - n + 1, depth + 1))


def stage2_schedule(epoch: int, depth: int, schedule: Stage2Schedule | None = None) -> dict:
    """Trainability and learning rates at ``epoch``.

    Returns ``{"groups": {name: lr}, "visual_layers": [...], "audio_trainable": False}``
    where group names are ``fusion``, ``heads`` and ``visual_layer_<k>``. The
    audio encoder stays frozen throughout.
    """
    s = schedule or Stage2Schedule()
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    groups = {"fusion": s.head_lr, "heads": s.head_lr}
    layers: list[int] = []
    if epoch >= s.top_third_epoch:
        layers = top_third(depth)
    elif epoch >= s.top_layer_epoch:
        layers = [depth]
    for k in layers:
        groups[f"visual_layer_{k}"] = s.finetune_lr
    return {"groups": groups, "visual_layers": layers, "audio_trainable": False}
