"""Single-file checkpoints with a version tag and a config echo."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

from .config import RunConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encoder_signature(cfg: RunConfig) -> str:
    """Hash of everything that shapes encoder weights."""
    d = cfg.to_dict()
    geo = {k: d["data"][k] for k in ("height", "width", "sample_rate", "fps")}
    return hashlib.sha256(repr((sorted(d["model"].items()), sorted(geo.items()))).encode()).hexdigest()[:16]


def save_checkpoint(path, kind: str, cfg: RunConfig, state: dict, **extra) -> str:
    """Write a checkpoint; returns the sha256 of the written file."""
    payload = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": cfg.to_dict(),
        "signature": encoder_signature(cfg),
        "state": {k: v.detach().cpu().clone() for k, v in state.items()},
        **extra,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path, kind: str | None = None, cfg: RunConfig | None = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    if cfg is not None and payload["signature"] != encoder_signature(cfg):
        raise CheckpointError(
            f"{path}: config hash {payload['signature']} does not match the run config ({encoder_signature(cfg)})"
        )
    return payload
