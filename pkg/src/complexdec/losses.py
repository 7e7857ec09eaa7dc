"""Training objective of the codec: spectral MSE/MAE, multi-resolution mel
loss, commitment loss, and their weighted sum."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import Tensor

from .config import LossWeights, MelConfig
from .dsp import mel_spectrogram

TERMS = ("vq", "mel", "mse", "mae")


def _check_shapes(x: Tensor, x_hat: Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def complex_mse(x: Tensor, x_hat: Tensor) -> Tensor:
    """Average of the real-part and imaginary-part mean squared errors."""
    _check_shapes(x, x_hat)
    diff = x - x_hat
    return 0.5 * (diff.real.pow(2).mean() + diff.imag.pow(2).mean())


def complex_mae(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean complex modulus of the error."""
    _check_shapes(x, x_hat)
    return (x - x_hat).abs().mean()


def multires_mel_loss(wave: Tensor, wave_hat: Tensor, configs: Sequence[MelConfig]) -> Tensor:
    """Mean over resolutions of the L1 distance between log10 mel spectra."""
    if wave.shape != wave_hat.shape:
        raise ValueError(f"length mismatch {tuple(wave.shape)} vs {tuple(wave_hat.shape)}")
    terms = [
        (mel_spectrogram(wave, cfg) - mel_spectrogram(wave_hat, cfg)).abs().mean()
        for cfg in configs
    ]
    return torch.stack(terms).mean()


@dataclass
class LossReport:
    vq: float
    mel: float
    mse: float
    mae: float
    total: float

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)})


def total_loss(terms: dict[str, Tensor | float], weights: LossWeights = LossWeights()
               ) -> tuple[Tensor, LossReport]:
    """Weighted sum of the four terms.

    Returns the differentiable total and a report of the unweighted terms.
    Non-finite terms raise ``FloatingPointError`` naming the offender.
    """
    w = {"vq": weights.w_vq, "mel": weights.w_mel, "mse": weights.w_mse, "mae": weights.w_mae}
    values = {}
    for name in TERMS:
        v = terms[name]
        f = float(v.detach()) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(f):
            raise FloatingPointError(f"loss term {name!r} is not finite ({f})")
        values[name] = f
    total = sum(w[name] * torch.as_tensor(terms[name]) for name in TERMS)
    report = LossReport(**values, total=sum(w[name] * values[name] for name in TERMS))
    return total, report
