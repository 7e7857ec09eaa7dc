"""Configuration objects and presets.

``CodecConfig`` is the single source of truth for every derived quantity
(frame rate, bin count, bitrate).  Configs round-trip through plain dicts so
they can be stored in checkpoints and human-readable YAML files.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

CHECKPOINT_DIR_ENV = "COMPLEXDEC_CHECKPOINT_DIR"


@dataclass(frozen=True)
class LossWeights:
    w_vq: float = 1.0
    w_mel: float = 45.0
    w_mse: float = 200.0
    w_mae: float = 200.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    hop: int = 50
    fft_size: int = 512
    fmin: float = 0.0
    fmax: float = 24000.0
    sample_rate: int = 48000
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ValueError("n_mels must be positive")
        if not 0 < self.hop < self.fft_size:
            raise ValueError("mel hop must be positive and smaller than fft_size")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 256
    input_kernel: int = 7
    n_blocks: int = 4
    units_per_block: int = 3
    unit_kernel: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)
    block_kernel: int = 2
    output_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != self.units_per_block:
            raise ValueError("need one dilation per residual unit")
        for name in ("input_kernel", "unit_kernel", "block_kernel", "output_kernel", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("input_kernel", "unit_kernel", "output_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd for same padding")


@dataclass(frozen=True)
class CodecConfig:
    sample_rate: int = 48000
    hop: int = 320
    fft_size: int = 510
    window: str = "hann"
    codebook_bits: int = 10
    n_stages: int = 8  # per branch
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    dead_code_steps: int = 200
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mel_hops: tuple[int, ...] = (50, 120, 240)
    mel_fft_sizes: tuple[int, ...] = (512, 1024, 2048)
    n_mels: int = 80

    def __post_init__(self):
        object.__setattr__(self, "mel_hops", tuple(self.mel_hops))
        object.__setattr__(self, "mel_fft_sizes", tuple(self.mel_fft_sizes))
        if self.fft_size % 2:
            raise ValueError("fft_size must be even")
        if not 0 < self.hop <= self.fft_size:
            raise ValueError("hop must be in (0, fft_size]")
        if not 1 <= self.codebook_bits <= 16:
            raise ValueError("codebook_bits must be in [1, 16]")
        if len(self.mel_hops) != len(self.mel_fft_sizes):
            raise ValueError("mel_hops and mel_fft_sizes must pair up")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def codebook_size(self) -> int:
        return 2 ** self.codebook_bits

    @property
    def latent_dim(self) -> int:
        return self.encoder.channels

    @property
    def n_codebooks(self) -> int:
        return 2 * self.n_stages

    @property
    def bitrate(self) -> float:
        from .bitstream import bitrate

        return bitrate(self.frame_rate, self.n_codebooks, self.codebook_bits)

    def mel_configs(self) -> list[MelConfig]:
        return [
            MelConfig(n_mels=self.n_mels, hop=h, fft_size=n, fmax=self.sample_rate / 2,
                      sample_rate=self.sample_rate)
            for h, n in zip(self.mel_hops, self.mel_fft_sizes)
        ]

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["encoder"]["dilations"] = list(self.encoder.dilations)
        d["mel_hops"] = list(self.mel_hops)
        d["mel_fft_sizes"] = list(self.mel_fft_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CodecConfig":
        d = dict(d)
        if "encoder" in d and not isinstance(d["encoder"], EncoderConfig):
            d["encoder"] = EncoderConfig(**d["encoder"])
        if "loss_weights" in d and not isinstance(d["loss_weights"], LossWeights):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SdeConfig:
    """Constants of the OUVE diffusion and of its predictor-corrector sampler."""

    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    T: float = 1.0
    t_eps: float = 0.03
    n_steps: int = 30
    snr: float = 0.5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0 < self.t_eps < self.T:
            raise ValueError("need 0 < t_eps < T")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.gamma < 0 or self.snr < 0:
            raise ValueError("gamma and snr must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SdeConfig":
        return cls(**d)


@dataclass(frozen=True)
class CompandingParams:
    alpha: float = 0.5
    beta: float = 0.15

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    embed_dim: int = 64
    fourier_scale: float = 16.0
    tile_frames: int = 256

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "UNetConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    segment_length: int = 96000
    max_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    hop: int = 320
    lr_schedule: str = "constant"  # or "cosine" (anneal to zero over max_steps)
    grad_clip: float | None = None  # max global gradient norm

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.segment_length % self.hop:
            raise ValueError("segment_length must be a multiple of hop")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def tiny_codec_config(**overrides) -> CodecConfig:
    """CI-speed preset: 8 channels, 16-entry codebooks, 2 stages per branch."""
    cfg = CodecConfig(encoder=EncoderConfig(channels=8), codebook_bits=4, n_stages=2)
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {
    "full": CodecConfig,
    "default": CodecConfig,
    "tiny": tiny_codec_config,
}

UNET_PRESETS = {
    "desk": UNetConfig,
    # full-size channel schedule; not exercised in CI
    "ncsnpp": lambda: UNetConfig(base_channels=128, channel_mults=(1, 1, 2, 2, 2, 2, 2),
                                 embed_dim=256),
}


def get_preset(name: str) -> CodecConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_yaml_config(path: str | os.PathLike) -> dict[str, Any]:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def checkpoint_dir(default: str | os.PathLike = "checkpoints") -> Path:
    return Path(os.environ.get(CHECKPOINT_DIR_ENV, default))
