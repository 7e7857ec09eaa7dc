"""Single-file checkpoint archives for the codec and the post-filter."""
from __future__ import annotations

from pathlib import Path

import torch

from .codec import CodecModel
from .config import CodecConfig, SdeConfig, UNetConfig
from .postfilter import ScoreModel

FORMAT_VERSION = 1


def save_codec(path, model: CodecModel, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": FORMAT_VERSION,
        "kind": "codec",
        "step": step,
        "codec_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
    }, path)
    return path


def _load(path, kind: str) -> dict:
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if archive.get("kind") != kind:
        raise ValueError(f"{path} is not a {kind} checkpoint (kind={archive.get('kind')!r})")
    if archive.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {archive.get('format_version')}")
    return archive


def load_codec(path) -> CodecModel:
    archive = _load(path, "codec")
    model = CodecModel(CodecConfig.from_dict(archive["codec_config"]))
    model.load_state_dict(archive["state_dict"])
    return model.eval()


def save_spf(path, model: ScoreModel, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": FORMAT_VERSION,
        "kind": "spf",
        "step": step,
        "sde_config": model.sde.to_dict(),
        "unet_config": model.net.cfg.to_dict(),
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_spf(path) -> ScoreModel:
    archive = _load(path, "spf")
    model = ScoreModel(SdeConfig.from_dict(archive["sde_config"]),
                       UNetConfig.from_dict(archive["unet_config"]))
    model.load_state_dict(archive["state_dict"])
    return model.eval()
