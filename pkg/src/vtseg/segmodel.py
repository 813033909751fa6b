"""Stage-3 segmentation: cross-attention over audio, decode head and loss.

Visual patch tokens act as queries and audio tokens as keys/values in every
decoder layer::

    F_v <- LayerNorm(F_v + MultiHeadAttn(F_v, F_a, F_a))
    F_v <- LayerNorm(F_v + FFN(F_v))            # optional

When audio is absent, a learned bank of null tokens replaces ``F_a``. In
training, audio and prior are independently dropped per sample so the
image-only path is exercised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import (
    Attention,
    AudioEncoder,
    EncoderConfig,
    FeedForward,
    PatchFusion,
    VisualEncoder,
    VisualEncoderConfig,
    tokens_to_map,
)
from .phonology import N_ARTICULATORS, N_ATTRIBUTES

MODES = ("train", "infer-full", "infer-image-only")
FUSIONS = ("none", "concat", "xattn")


@dataclass
class CrossAttnDecoderConfig:
    depth: int = 6
    heads: int = 4
    null_tokens: int = 8
    ffn: bool = True
    mlp_ratio: float = 2.0
    p_audio: float = 0.5
    p_prior: float = 0.5

    def __post_init__(self):
        if self.depth < 1 or self.null_tokens < 1:
            raise ValueError("decoder depth and null-token count must be >= 1")
        for p in (self.p_audio, self.p_prior):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")


@dataclass
class SegModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: CrossAttnDecoderConfig = field(default_factory=CrossAttnDecoderConfig)
    fusion: str = "xattn"
    use_prior: bool = True
    use_phon: bool = False
    head_channels: tuple[int, int] = (24, 12)

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.use_phon and self.fusion != "concat":
            raise ValueError("phonological vector concatenation requires concat fusion")


def concat_inputs(image, prior):
    """[image, tongue, velum, upper lip, lower lip] along the channel axis."""
    if image.dim() == 3:
        image = image.unsqueeze(1)
    if prior.dim() == 3:
        prior = prior.unsqueeze(0).expand(image.shape[0], -1, -1, -1)
    if image.shape[1] != 1 or prior.shape[1] != N_ARTICULATORS or image.shape[-2:] != prior.shape[-2:] \
            or image.shape[0] != prior.shape[0]:
        raise ValueError(f"cannot concatenate image {tuple(image.shape)} with prior {tuple(prior.shape)}")
    return torch.cat([image, prior.to(image.dtype)], dim=1)


def inflate_patch_embed(state: dict, n_prior: int = N_ARTICULATORS) -> dict:
    """Widen 1-channel patch-embedding weights to ``1 + n_prior`` channels.

    Takes ``{"weight": D x 1 x P x P, "bias": D}`` and returns the same with
    zero-initialized prior slices.
    """
    w = state["weight"]
    if w.dim() != 4 or w.shape[1] != 1:
        raise ValueError(f"expected 1-channel patch weights, got {tuple(w.shape)}")
    zeros = torch.zeros(w.shape[0], n_prior, *w.shape[2:], dtype=w.dtype)
    return {"weight": torch.cat([w, zeros], dim=1), "bias": state["bias"].clone()}


class NullAudioBank(nn.Module):
    def __init__(self, n_tokens, dim):
        super().__init__()
        self.tokens = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)

    def forward(self, batch):
        return self.tokens.unsqueeze(0).expand(batch, -1, -1)


class MaskedAttention(Attention):
    """Attention whose keys can be masked per sample (``True`` = ignore)."""

    def forward(self, query, key, value, key_mask=None):
        b, n, d = query.shape
        h = self.heads
        q = self.q(query).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(key).view(b, key.shape[1], h, d // h).transpose(1, 2)
        v = self.v(value).view(b, value.shape[1], h, d // h).transpose(1, 2)
        # boolean attn_mask: True marks keys that may be attended
        allowed = None if key_mask is None else ~key_mask[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class CrossAttnLayer(nn.Module):
    def __init__(self, dim, heads, ffn=True, mlp_ratio=2.0):
        super().__init__()
        self.attn = MaskedAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, int(dim * mlp_ratio)) if ffn else None
        self.norm_ffn = nn.LayerNorm(dim) if ffn else None

    def forward(self, f_v, f_a, key_mask=None):
        if f_a.shape[1] == 0:
            raise ValueError("cross-attention needs at least one audio token; substitute the null bank")
        f_v = self.norm(f_v + self.attn(f_v, f_a, f_a, key_mask))
        if self.ffn is not None:
            f_v = self.norm_ffn(f_v + self.ffn(f_v))
        return f_v


class SegHead(nn.Module):
    """Two conv blocks with bilinear upsampling, then a 1x1 class convolution."""

    def __init__(self, dim, channels, grid, out_size, n_classes=N_ARTICULATORS):
        super().__init__()
        self.grid = grid
        self.out_size = out_size
        factor = out_size // grid[0]
        step = 2 ** math.ceil(math.log2(factor) / 2) if factor > 1 else 1
        self.mid_size = grid[0] * step
        self.block1 = nn.Conv2d(dim, channels[0], 3, padding=1)
        self.block2 = nn.Conv2d(channels[0], channels[1], 3, padding=1)
        self.classifier = nn.Conv2d(channels[1], n_classes, 1)

    def forward(self, tokens):
        if tokens.shape[1] != self.grid[0] * self.grid[1]:
            raise ValueError(f"{tokens.shape[1]} tokens do not match grid {self.grid}")
        x = tokens_to_map(tokens, self.grid)
        x = F.interpolate(F.gelu(self.block1(x)), size=(self.mid_size,) * 2, mode="bilinear", align_corners=False)
        x = F.interpolate(F.gelu(self.block2(x)), size=(self.out_size,) * 2, mode="bilinear", align_corners=False)
        return self.classifier(x)


def seg_loss(logits, gt, eps=1e-6, return_terms=False):
    """Per-channel sigmoid BCE + per-channel soft Dice, weighted 1:1.

    Dice is computed per sample and channel, then averaged.
    """
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(gt.shape)} differ")
    gt = gt.to(logits.dtype)
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary")
    bce = F.binary_cross_entropy_with_logits(logits, gt)
    p = torch.sigmoid(logits)
    dims = tuple(range(2, logits.dim()))
    inter = (p * gt).sum(dims)
    dice = 1.0 - (2.0 * inter + eps) / (p.sum(dims) + gt.sum(dims) + eps)
    dice = dice.mean()
    if return_terms:
        return bce + dice, bce, dice
    return bce + dice


def predict_masks(logits):
    return (torch.sigmoid(logits) > 0.5).to(torch.uint8)


class SegModel(nn.Module):
    """Image (+prior) encoder, optional audio fusion and segmentation head.

    ``fusion`` selects the audio path: ``"none"`` (image only), ``"concat"``
    (global audio feature, optionally with the phonological vector, appended
    to every visual token) or ``"xattn"`` (cross-attention decoder).
    """

    def __init__(self, cfg: SegModelConfig):
        super().__init__()
        self.cfg = cfg
        vcfg = cfg.encoder.visual
        in_ch = 1 + (N_ARTICULATORS if cfg.use_prior else 0)
        self.vcfg = VisualEncoderConfig(**{**vcfg.__dict__, "in_channels": in_ch})
        dim = vcfg.dim
        self.visual = VisualEncoder(self.vcfg)
        self.fusion = PatchFusion(dim, len(vcfg.taps))
        self.audio = AudioEncoder(cfg.encoder.audio) if cfg.fusion != "none" else None
        dc = cfg.decoder
        if cfg.fusion == "xattn":
            self.null_bank = NullAudioBank(dc.null_tokens, dim)
            self.layers = nn.ModuleList(CrossAttnLayer(dim, dc.heads, dc.ffn, dc.mlp_ratio) for _ in range(dc.depth))
        elif cfg.fusion == "concat":
            self.null_bank = NullAudioBank(1, dim)
            extra = N_ATTRIBUTES if cfg.use_phon else 0
            self.concat_proj = nn.Linear(2 * dim + extra, dim)
        self.head = SegHead(dim, cfg.head_channels, vcfg.grid, vcfg.image_size)

    # -- parameter groups used by the freeze contract
    def encoder_modules(self):
        mods = {"visual": self.visual, "fusion": self.fusion}
        if self.audio is not None:
            mods["audio"] = self.audio
        return mods

    def load_stage2(self, stage2_state: dict) -> None:
        """Copy Stage-2 encoder/fusion weights; prior slices stay zero."""
        own = self.state_dict()
        for k, v in stage2_state.items():
            prefix = k.split(".")[0]
            if prefix not in ("visual", "audio", "fusion"):
                continue
            if k not in own:
                continue
            if own[k].shape != v.shape:
                raise ValueError(f"stage-2 tensor {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
            own[k] = v.clone()
        self.load_state_dict(own)
        if self.visual.patch_embed.prior_proj is not None:
            nn.init.zeros_(self.visual.patch_embed.prior_proj.weight)

    def frozen_parameter_names(self) -> list[str]:
        """Encoder/fusion parameters that Stage 3 must leave untouched."""
        names = []
        for n, _ in self.named_parameters():
            if n.startswith(("visual.", "fusion.", "audio.")) and "prior_proj" not in n:
                names.append(n)
        return names

    def encode_audio(self, audio):
        return self.audio(audio)

    def forward(self, image, prior=None, audio=None, mode="train", phon=None, audio_features=None,
                return_tokens=False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if image.dim() == 3:
            image = image.unsqueeze(1)
        b = image.shape[0]
        dc = self.cfg.decoder
        train = mode == "train"

        if self.cfg.use_prior:
            if prior is None or mode == "infer-image-only":
                prior = torch.ones(b, N_ARTICULATORS, *image.shape[-2:], dtype=image.dtype, device=image.device)
            elif train and dc.p_prior > 0:
                drop = torch.rand(b, device=image.device) < dc.p_prior
                prior = torch.where(drop[:, None, None, None], torch.ones_like(prior), prior)
            x = concat_inputs(image, prior)
        else:
            x = image

        layers, _ = self.visual(x)
        tapped = [layers[t - 1] for t in self.vcfg.taps]
        f_v = self.fusion(tapped, self.vcfg.grid).tokens

        if self.cfg.fusion != "none":
            have_audio = audio is not None or audio_features is not None
            if mode == "infer-full" and not have_audio:
                raise ValueError("infer-full mode needs audio")
            if mode == "infer-image-only":
                have_audio = False
            if have_audio:
                f_a, a_glob = audio_features if audio_features is not None else self.encode_audio(audio)
                if train and dc.p_audio > 0:
                    keep = torch.rand(b, device=image.device) >= dc.p_audio
                else:
                    keep = torch.ones(b, dtype=torch.bool, device=image.device)
            else:
                f_a = a_glob = None
                keep = torch.zeros(b, dtype=torch.bool, device=image.device)
            if self.cfg.fusion == "xattn":
                f_v = self._cross_attend(f_v, f_a, keep)
            else:
                f_v = self._concat(f_v, a_glob, keep, phon)
        logits = self.head(f_v)
        return (logits, f_v) if return_tokens else logits

    def _cross_attend(self, f_v, f_a, keep):
        b = f_v.shape[0]
        null = self.null_bank(b).to(f_v.dtype)
        if f_a is None:
            keys, mask = null, None
        elif bool(keep.all()):
            keys, mask = f_a, None
        else:
            keys = torch.cat([f_a, null], dim=1)
            t, k = f_a.shape[1], null.shape[1]
            mask = torch.cat([~keep[:, None].expand(b, t), keep[:, None].expand(b, k)], dim=1)
        for layer in self.layers:
            f_v = layer(f_v, keys, mask)
        return f_v

    def _concat(self, f_v, a_glob, keep, phon):
        b, n, _ = f_v.shape
        null = self.null_bank.tokens[0].to(f_v.dtype).expand(b, -1)
        a = null if a_glob is None else torch.where(keep[:, None], a_glob, null)
        parts = [f_v, a[:, None].expand(b, n, -1)]
        if self.cfg.use_phon:
            if phon is None:
                phon = torch.zeros(b, N_ATTRIBUTES, dtype=f_v.dtype, device=f_v.device)
            parts.append(phon.to(f_v.dtype)[:, None].expand(b, n, -1))
        return self.concat_proj(torch.cat(parts, dim=-1))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
