"""Visual and audio encoders, multi-layer patch fusion and projection heads.

Both encoders are small, randomly initialized transformers with the same
interface as a ViT image encoder and a self-supervised speech encoder:

* the visual encoder returns patch tokens for every layer plus the
  final-layer global ([CLS]) token,
* the audio encoder returns a temporal feature sequence and its mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class VisualEncoderConfig:
    in_channels: int = 1
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 2.0
    taps: tuple[int, ...] = (2, 4, 6)

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        if len(self.taps) != 3 or list(self.taps) != sorted(self.taps):
            raise ValueError(f"expected three sorted tap layers, got {self.taps}")
        if self.taps[0] < 1 or self.taps[-1] != self.depth:
            raise ValueError(f"tap layers must lie in 1..{self.depth} and end at {self.depth}")
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by the patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class AudioEncoderConfig:
    context_samples: int = 3198
    sample_rate: int = 16000
    stride: int = 64
    n_filters: int = 32
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0

    @property
    def n_frames(self) -> int:
        return self.context_samples // self.stride


@dataclass
class TokenBatch:
    """B x N x D tokens with a role tag and optional spatial grid."""

    tokens: torch.Tensor
    role: str
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.grid is not None and self.tokens.shape[-2] != self.grid[0] * self.grid[1]:
            raise ValueError(f"{self.tokens.shape[-2]} tokens do not fill grid {self.grid}")


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v inputs."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, value):
        b, n, d = query.shape
        h = self.heads
        q = self.q(query).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(key).view(b, key.shape[1], h, d // h).transpose(1, 2)
        v = self.v(value).view(b, value.shape[1], h, d // h).transpose(1, 2)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class FeedForward(nn.Sequential):
    def __init__(self, dim, hidden):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class Block(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Patch projection split into the image channel and optional prior channels.

    Equivalent to one strided convolution over the channel-wise concatenation
    ``[image, prior...]``; the split keeps the image slice addressable so it can
    be frozen independently of the prior slice.
    """

    def __init__(self, in_channels, dim, patch_size):
        super().__init__()
        self.image_proj = nn.Conv2d(1, dim, patch_size, stride=patch_size)
        self.prior_proj = None
        if in_channels > 1:
            self.prior_proj = nn.Conv2d(in_channels - 1, dim, patch_size, stride=patch_size, bias=False)
            nn.init.zeros_(self.prior_proj.weight)

    @property
    def weight(self):
        if self.prior_proj is None:
            return self.image_proj.weight
        return torch.cat([self.image_proj.weight, self.prior_proj.weight], dim=1)

    @property
    def bias(self):
        return self.image_proj.bias

    def forward(self, x):
        out = self.image_proj(x[:, :1])
        if self.prior_proj is not None:
            out = out + self.prior_proj(x[:, 1:])
        return out


class VisualEncoder(nn.Module):
    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.dim, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches + 1, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, x):
        """Return ``(per-layer patch tokens, global token)``.

        ``per-layer`` is a list of ``depth`` tensors of shape B x N x D, the
        global token (B x D) is the normalized final-layer [CLS] token.
        """
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected B x {cfg.in_channels} x {cfg.image_size} x {cfg.image_size} input, got {tuple(x.shape)}"
            )
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1) + self.pos_embed
        layers = []
        for blk in self.blocks:
            t = blk(t)
            layers.append(t[:, 1:])
        return layers, self.norm(t[:, 0])

    def layer_parameters(self, layer: int):
        """Parameters of transformer layer ``layer`` (1-based); the top layer owns the final norm."""
        params = list(self.blocks[layer - 1].parameters())
        if layer == self.cfg.depth:
            params += list(self.norm.parameters())
        return params


def tokens_to_map(tokens, grid):
    """R: B x N x D tokens -> B x D x gh x gw feature map."""
    b, n, d = tokens.shape
    return tokens.transpose(1, 2).reshape(b, d, grid[0], grid[1])


def map_to_tokens(fmap):
    """Inverse of :func:`tokens_to_map`."""
    return fmap.flatten(2).transpose(1, 2)


class PatchFusion(nn.Module):
    """Sum of per-tap learnable 1x1 convolutions over the token grid."""

    def __init__(self, dim, n_taps=3):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(dim, dim, 1) for _ in range(n_taps))

    def forward(self, tapped, grid):
        return fuse_patch_features(tapped, self.convs, grid)


def fuse_patch_features(tapped, convs, grid) -> TokenBatch:
    if grid is None:
        raise ValueError("patch fusion needs the token grid shape")
    tapped = [t.tokens if isinstance(t, TokenBatch) else t for t in tapped]
    if len(tapped) != len(convs):
        raise ValueError(f"{len(tapped)} tapped batches for {len(convs)} convolutions")
    shapes = {tuple(t.shape) for t in tapped}
    if len(shapes) != 1:
        raise ValueError(f"tapped batches disagree in shape: {shapes}")
    fused = sum(conv(tokens_to_map(t, grid)) for t, conv in zip(tapped, convs))
    return TokenBatch(map_to_tokens(fused), "visual_patch", tuple(grid))


class FilterbankFrontEnd(nn.Module):
    """Strided 1-D convolution filterbank with magnitude pooling.

    Pairs of output channels start as windowed cosine/sine kernels on a mel-like
    frequency grid so the front end is informative before any training;
    all kernels remain learnable.
    """

    def __init__(self, n_filters, stride, sample_rate):
        super().__init__()
        self.conv = nn.Conv1d(1, 2 * n_filters, kernel_size=stride, stride=stride, bias=False)
        mel = torch.linspace(_hz_to_mel(100.0), _hz_to_mel(0.45 * sample_rate), n_filters)
        freqs = _mel_to_hz(mel)
        t = torch.arange(stride) / sample_rate
        win = torch.hann_window(stride, periodic=False)
        kern = torch.cat([torch.cos(2 * math.pi * freqs[:, None] * t) * win,
                          torch.sin(2 * math.pi * freqs[:, None] * t) * win])
        with torch.no_grad():
            self.conv.weight.copy_(kern[:, None, :] / stride**0.5)

    def forward(self, wave):
        y = self.conv(wave.unsqueeze(1))
        re, im = y.chunk(2, dim=1)
        return torch.log1p(re * re + im * im)


def _hz_to_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


class AudioEncoder(nn.Module):
    """Filterbank front end + self-attention stack; no positional encoding."""

    def __init__(self, cfg: AudioEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = FilterbankFrontEnd(cfg.n_filters, cfg.stride, cfg.sample_rate)
        self.proj = nn.Conv1d(cfg.n_filters, cfg.dim, kernel_size=3, padding=1)
        self.norm_in = nn.LayerNorm(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, wave):
        """B x T_a waveform -> (B x T x D sequence, B x D temporal mean)."""
        if wave.dim() != 2 or wave.shape[1] != self.cfg.context_samples:
            raise ValueError(f"expected B x {self.cfg.context_samples} waveform, got {tuple(wave.shape)}")
        x = self.proj(self.frontend(wave)).transpose(1, 2)
        x = self.norm_in(x)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x, x.mean(dim=1)


class ProjectionHead(nn.Module):
    """Two-layer MLP into the shared embedding space, unit-normalized."""

    def __init__(self, dim, proj_dim, hidden=None):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, proj_dim)

    def forward(self, x):
        return F.normalize(self.fc2(F.gelu(self.fc1(x))), dim=-1, eps=1e-12)


HEADS = ("image", "patch", "audio")


@dataclass
class EncoderConfig:
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    audio: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    proj_dim: int = 32


class DualEncoder(nn.Module):
    """Stage-2 model: both encoders, the fusion block and three projection heads."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.visual.dim != cfg.audio.dim:
            raise ValueError("visual and audio encoders must share the hidden dimension")
        self.cfg = cfg
        self.visual = VisualEncoder(cfg.visual)
        self.audio = AudioEncoder(cfg.audio)
        self.fusion = PatchFusion(cfg.visual.dim, len(cfg.visual.taps))
        self.heads = nn.ModuleDict({k: ProjectionHead(cfg.visual.dim, cfg.proj_dim) for k in HEADS})

    def visual_tokens(self, image):
        layers, global_token = self.visual(image)
        tapped = [layers[t - 1] for t in self.cfg.visual.taps]
        fused = self.fusion(tapped, self.cfg.visual.grid)
        return fused, global_token

    def project(self, feature, head):
        return self.heads[head](feature)

    def forward(self, image, audio):
        fused, global_token = self.visual_tokens(image)
        _, audio_global = self.audio(audio)
        return {
            "image": self.project(global_token, "image"),
            "patch": self.project(fused.tokens.mean(dim=1), "patch"),
            "audio": self.project(audio_global, "audio"),
        }
