"""Run configuration: nested dataclasses backed by a YAML file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..contrastive import ContrastiveLossConfig, Stage2Schedule
from ..encoders import AudioEncoderConfig, EncoderConfig, VisualEncoderConfig
from ..segmodel import CrossAttnDecoderConfig, SegModelConfig


@dataclass
class DataConfig:
    n_speakers: int = 8
    n_tasks: int = 10
    frames_per_task: int = 48
    height: int = 64
    width: int = 64
    native_size: int | None = None
    sample_rate: int = 16000
    fps: float = 15.0
    snr_db: float = 20.0
    split: str = "US-UT"
    n_eval_speakers: int = 2
    n_eval_tasks: int = 2
    corpus_dir: str | None = None


@dataclass
class ModelConfig:
    dim: int = 64
    depth: int = 6
    heads: int = 4
    patch_size: int = 8
    taps: tuple[int, int, int] = (2, 4, 6)
    mlp_ratio: float = 2.0
    audio_depth: int = 2
    audio_filters: int = 32
    audio_stride: int = 64
    proj_dim: int = 32
    decoder_depth: int = 6
    null_tokens: int = 8
    ffn: bool = True
    p_audio: float = 0.5
    p_prior: float = 0.5
    head_channels: tuple[int, int] = (24, 12)


@dataclass
class Stage2Config:
    epochs: int = 50
    top_layer_epoch: int = 21
    top_third_epoch: int = 31
    head_lr: float = 1e-4
    finetune_lr: float = 1e-5
    weight_decay: float = 1e-2
    temperature: float = 0.07
    lam: float = 0.5
    symmetric: bool = True


@dataclass
class Stage3Config:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 100
    patience: int = 15


@dataclass
class PhonologyConfig:
    inventory_path: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    scale: float = 0.4
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    threads: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    phonology: PhonologyConfig = field(default_factory=PhonologyConfig)

    # -- derived views
    @property
    def audio_context(self) -> int:
        return 3 * int(self.data.sample_rate // self.data.fps)

    def stage2_schedule(self) -> Stage2Schedule:
        s = self.stage2
        return Stage2Schedule(s.epochs, s.top_layer_epoch, s.top_third_epoch, s.head_lr, s.finetune_lr).scaled(self.scale)

    def stage3_epochs(self) -> int:
        return max(1, round(self.stage3.epochs * self.scale))

    def contrastive(self) -> ContrastiveLossConfig:
        return ContrastiveLossConfig(self.stage2.temperature, self.stage2.lam, self.stage2.symmetric)

    def encoder(self, in_channels: int = 1) -> EncoderConfig:
        m, d = self.model, self.data
        return EncoderConfig(
            visual=VisualEncoderConfig(
                in_channels=in_channels, image_size=d.height, patch_size=m.patch_size, dim=m.dim,
                depth=m.depth, heads=m.heads, mlp_ratio=m.mlp_ratio, taps=tuple(m.taps),
            ),
            audio=AudioEncoderConfig(
                context_samples=self.audio_context, sample_rate=d.sample_rate, stride=m.audio_stride,
                n_filters=m.audio_filters, dim=m.dim, depth=m.audio_depth, heads=m.heads, mlp_ratio=m.mlp_ratio,
            ),
            proj_dim=m.proj_dim,
        )

    def segmodel(self, fusion="xattn", use_prior=True, use_phon=False, **decoder_overrides) -> SegModelConfig:
        m = self.model
        dec = dict(depth=m.decoder_depth, heads=m.heads, null_tokens=m.null_tokens, ffn=m.ffn,
                   mlp_ratio=m.mlp_ratio, p_audio=m.p_audio, p_prior=m.p_prior)
        dec.update(decoder_overrides)
        return SegModelConfig(
            encoder=self.encoder(),
            decoder=CrossAttnDecoderConfig(**dec),
            fusion=fusion,
            use_prior=use_prior,
            use_phon=use_phon,
            head_channels=tuple(m.head_channels),
        )

    # -- serialization
    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self, sections=None) -> str:
        d = self.to_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {})


FULL_SCALE = {
    "scale": 1.0,
    "data": {"height": 224, "width": 224, "native_size": 84},
    "model": {"dim": 768, "depth": 12, "heads": 12, "patch_size": 16, "taps": [4, 8, 12],
              "proj_dim": 256, "head_channels": [256, 128]},
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value or {})
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def deep_update(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    d = {}
    if path is not None:
        d = yaml.safe_load(Path(path).read_text()) or {}
    if overrides:
        d = deep_update(d, overrides)
    return RunConfig.from_dict(d)


def parse_override(text: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}`` with YAML-typed values."""
    key, _, raw = text.partition("=")
    if not key or not _:
        raise ValueError(f"override must look like key.path=value, got {text!r}")
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out
