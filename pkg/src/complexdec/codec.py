"""Encoder/decoder networks and the assembled two-branch codec.

The real and imaginary spectrogram matrices run through the *same* encoder
and decoder but are quantized by *independent* RVQ stacks.  Every layer is
stride 1, so code frames line up one-to-one with STFT frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import dsp
from .config import CodecConfig, EncoderConfig
from .rvq import QuantizationResult, RvqStack


class SameConv1d(nn.Conv1d):
    """Stride-1 conv with symmetric zero padding (odd kernels) or left-only
    padding (even kernels)."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, dilation: int = 1):
        super().__init__(in_ch, out_ch, kernel_size, stride=1, dilation=dilation)
        span = dilation * (kernel_size - 1)
        self.pad = (span // 2, span - span // 2) if kernel_size % 2 else (span, 0)

    def forward(self, x: Tensor) -> Tensor:
        return super().forward(F.pad(x, self.pad))


class UnitTransposeConv1d(nn.ConvTranspose1d):
    """Stride-1 transposed conv cropped back to the input length.

    Even kernels keep the causal head of the output, mirroring the left-padded
    encoder conv.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int):
        super().__init__(in_ch, out_ch, kernel_size, stride=1)
        extra = kernel_size - 1
        self.crop = (extra // 2, extra - extra // 2) if kernel_size % 2 else (0, extra)

    def forward(self, x: Tensor) -> Tensor:
        y = super().forward(x)
        return y[..., self.crop[0]: y.shape[-1] - self.crop[1]]


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        self.conv1 = SameConv1d(channels, channels, kernel, dilation)
        self.conv2 = SameConv1d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.elu(self.conv1(F.elu(x))))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.units = nn.Sequential(*[ResidualUnit(cfg.channels, cfg.unit_kernel, d) for d in cfg.dilations])
        self.conv = SameConv1d(cfg.channels, cfg.channels, cfg.block_kernel)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.elu(self.units(x)))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.conv = UnitTransposeConv1d(cfg.channels, cfg.channels, cfg.block_kernel)
        self.units = nn.Sequential(*[ResidualUnit(cfg.channels, cfg.unit_kernel, d) for d in cfg.dilations])

    def forward(self, x: Tensor) -> Tensor:
        return self.units(self.conv(F.elu(x)))


class Encoder(nn.Module):
    """``(B, bins, T) -> (B, channels, T)``."""

    def __init__(self, n_bins: int, cfg: EncoderConfig):
        super().__init__()
        self.n_bins = n_bins
        self.conv_in = SameConv1d(n_bins, cfg.channels, cfg.input_kernel)
        self.blocks = nn.Sequential(*[EncoderBlock(cfg) for _ in range(cfg.n_blocks)])
        self.conv_out = SameConv1d(cfg.channels, cfg.channels, cfg.output_kernel)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2] != self.n_bins:
            raise ValueError(f"expected {self.n_bins} bins, got {x.shape[-2]}")
        return self.conv_out(F.elu(self.blocks(self.conv_in(x))))


class Decoder(nn.Module):
    """``(B, channels, T) -> (B, bins, T)``; the last layer starts at zero."""

    def __init__(self, n_bins: int, cfg: EncoderConfig):
        super().__init__()
        self.conv_in = SameConv1d(cfg.channels, cfg.channels, cfg.output_kernel)
        self.blocks = nn.Sequential(*[DecoderBlock(cfg) for _ in range(cfg.n_blocks)])
        self.conv_out = SameConv1d(cfg.channels, n_bins, cfg.input_kernel)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv_out(F.elu(self.blocks(self.conv_in(x))))


def receptive_field(cfg: EncoderConfig) -> tuple[int, int]:
    """``(past, future)`` input frames that can influence one encoder output frame."""
    past = future = 0

    def add(kernel: int, dilation: int = 1):
        nonlocal past, future
        span = dilation * (kernel - 1)
        if kernel % 2:
            past += span // 2
            future += span - span // 2
        else:
            past += span

    add(cfg.input_kernel)
    for _ in range(cfg.n_blocks):
        for d in cfg.dilations:
            add(cfg.unit_kernel, d)
        add(cfg.block_kernel)
    add(cfg.output_kernel)
    return past, future


@dataclass
class CodecOutput:
    wave_hat: Tensor
    spec: Tensor
    spec_hat: Tensor
    vq_loss: Tensor
    real: QuantizationResult | None
    imag: QuantizationResult | None


class CodecModel(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config = config or CodecConfig()
        self.encoder = Encoder(config.n_bins, config.encoder)
        self.decoder = Decoder(config.n_bins, config.encoder)
        stack_args = (config.n_stages, config.codebook_size, config.latent_dim, config.ema_decay,
                      config.ema_eps, config.dead_code_steps)
        self.real_rvq = RvqStack(*stack_args)
        self.imag_rvq = RvqStack(*stack_args)

    def encode(self, spec: Tensor) -> tuple[Tensor, Tensor]:
        """Complex ``(..., T, bins)`` -> real and imaginary latents ``(..., T, channels)``."""
        spec = torch.as_tensor(spec)
        if spec.shape[-1] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bins, got {spec.shape[-1]}")
        lead = spec.shape[:-2]
        flat = spec.reshape(-1, *spec.shape[-2:])
        out = []
        for part in (flat.real, flat.imag):
            z = self.encoder(part.to(self._dtype).transpose(1, 2)).transpose(1, 2)
            out.append(z.reshape(*lead, *z.shape[-2:]))
        return out[0], out[1]

    def decode(self, real_q: Tensor, imag_q: Tensor) -> Tensor:
        """Latents ``(..., T, channels)`` x 2 -> complex spectrogram ``(..., T, bins)``."""
        if real_q.shape != imag_q.shape:
            raise ValueError(f"branch shapes differ: {tuple(real_q.shape)} vs {tuple(imag_q.shape)}")
        lead = real_q.shape[:-2]
        parts = []
        for q in (real_q, imag_q):
            flat = q.reshape(-1, *q.shape[-2:]).transpose(1, 2)
            parts.append(self.decoder(flat).transpose(1, 2))
        spec = torch.complex(parts[0], parts[1])
        return spec.reshape(*lead, *spec.shape[-2:])

    def quantize(self, real: Tensor, imag: Tensor, update: bool | None = None,
                 generator: torch.Generator | None = None):
        shape = real.shape
        rq = self.real_rvq.encode(real.reshape(-1, shape[-1]), update, generator)
        iq = self.imag_rvq.encode(imag.reshape(-1, shape[-1]), update, generator)
        return rq, iq

    def forward(self, wave: Tensor, bypass_quantizer: bool = False,
                generator: torch.Generator | None = None) -> CodecOutput:
        return codec_forward(wave, self, bypass_quantizer, generator)

    def analyze(self, wave: Tensor) -> Tensor:
        c = self.config
        return dsp.stft(torch.as_tensor(wave).to(self._dtype), c.hop, c.fft_size, c.window)

    def synthesize(self, spec: Tensor, length: int) -> Tensor:
        c = self.config
        return dsp.istft(spec, length, c.hop, c.fft_size, c.window)

    @torch.no_grad()
    def encode_indices(self, wave) -> Tensor:
        """Waveform ``(L,)`` -> ``(T, 2 * n_stages)`` code indices, real stages first."""
        spec = self.analyze(wave)
        real, imag = self.encode(spec)
        rq, iq = self.quantize(real, imag, update=False)
        return torch.cat([rq.indices, iq.indices], dim=1)

    @torch.no_grad()
    def decode_indices(self, indices: Tensor, length: int | None = None) -> Tensor:
        indices = torch.as_tensor(indices, dtype=torch.long)
        n = self.config.n_stages
        real = self.real_rvq.decode(indices[:, :n]).to(self._dtype)
        imag = self.imag_rvq.decode(indices[:, n:]).to(self._dtype)
        spec = self.decode(real, imag)
        if length is None:
            return spec
        return self.synthesize(spec, length)

    @property
    def _dtype(self) -> torch.dtype:
        return self.decoder.conv_out.weight.dtype


def codec_forward(wave, model: CodecModel, bypass_quantizer: bool = False,
                  generator: torch.Generator | None = None) -> CodecOutput:
    """STFT -> shared encoder -> per-branch RVQ -> shared decoder -> iSTFT."""
    wave = torch.as_tensor(wave).to(model._dtype)
    spec = model.analyze(wave)
    real, imag = model.encode(spec)
    if bypass_quantizer:
        rq = iq = None
        vq_loss = real.new_zeros(())
        real_q, imag_q = real, imag
    else:
        rq, iq = model.quantize(real, imag, generator=generator)
        vq_loss = 0.5 * (rq.commitment + iq.commitment)
        real_q = rq.quantized.reshape(real.shape)
        imag_q = iq.quantized.reshape(imag.shape)
    spec_hat = model.decode(real_q, imag_q)
    wave_hat = model.synthesize(spec_hat, wave.shape[-1])
    return CodecOutput(wave_hat, spec, spec_hat, vq_loss, rq, iq)
