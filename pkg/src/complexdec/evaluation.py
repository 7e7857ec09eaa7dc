"""Objective evaluation and spectrogram rendering."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from PIL import Image

from . import dsp
from .config import CompandingParams
from .metrics import si_sdr, wav_mse
from .postfilter import enhance


@dataclass
class UtteranceMetrics:
    name: str
    wav_mse: float
    si_sdr: float
    n_samples: int


@dataclass
class MetricReport:
    utterances: list[UtteranceMetrics] = field(default_factory=list)
    sample_rate: int = 48000

    @property
    def wav_mse(self) -> float:
        return float(np.mean([u.wav_mse for u in self.utterances]))

    @property
    def si_sdr(self) -> float:
        return float(np.mean([u.si_sdr for u in self.utterances]))

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "utterance", "sample_rate": self.sample_rate, **asdict(u)})
                 for u in self.utterances]
        lines.append(json.dumps({"type": "aggregate", "sample_rate": self.sample_rate,
                                 "n_utterances": len(self.utterances),
                                 "wav_mse": self.wav_mse, "si_sdr": self.si_sdr}))
        return "\n".join(lines) + "\n"


def scored_length(length: int, hop: int, fft_size: int) -> int:
    """Samples covered by a full analysis window; the tail past the last frame
    center plus half a hop is excluded from metrics."""
    n_frames = dsp.n_frames_for(length, hop)
    return min(length, (n_frames - 1) * hop + hop // 2)


@torch.no_grad()
def reconstruct(wave: np.ndarray, codec, spf=None, seed: int = 0,
                params: CompandingParams = CompandingParams()) -> np.ndarray:
    """encode -> (optional post-filter) -> decode for one utterance.

    ``codec`` needs ``config`` plus ``reconstruct_spec(wave)`` (or the index
    round-trip of :class:`~complexdec.codec.CodecModel`).
    """
    cfg = codec.config
    if hasattr(codec, "reconstruct_spec"):
        spec_hat = codec.reconstruct_spec(wave)
    else:
        spec_hat = codec.decode_indices(codec.encode_indices(wave))
    if spf is not None:
        spec_hat = enhance(spec_hat, spf, params, spf.sde, seed=seed)
    return dsp.istft(spec_hat, len(wave), cfg.hop, cfg.fft_size, cfg.window).double().numpy()


def evaluate(waves: dict[str, np.ndarray], codec, spf=None, seed: int = 0) -> MetricReport:
    """Wav-MSE and SI-SDR at the native sample rate for every utterance."""
    cfg = codec.config
    report = MetricReport(sample_rate=cfg.sample_rate)
    for name, wave in waves.items():
        wave = np.asarray(wave, dtype=np.float64)
        est = reconstruct(wave, codec, spf, seed)
        n = scored_length(len(wave), cfg.hop, cfg.fft_size)
        report.utterances.append(UtteranceMetrics(name, wav_mse(wave[:n], est[:n]),
                                                  si_sdr(wave[:n], est[:n]), n))
    return report


def spectrogram_image(spec, floor_db: float = -100.0) -> np.ndarray:
    """uint8 image of the log magnitude, low frequencies at the bottom row."""
    db = dsp.log_magnitude_db(torch.as_tensor(spec), floor_db).double().numpy()  # (frames, bins)
    top = db.max()
    if top > floor_db:
        scaled = (db - floor_db) / (top - floor_db)
    else:
        scaled = np.zeros_like(db)
    img = np.round(255 * scaled).astype(np.uint8)
    return img.T[::-1]


def export_spectrogram_image(data, path, hop: int = 320, fft_size: int = 510,
                             floor_db: float = -100.0) -> np.ndarray:
    """Write a grayscale PNG of a waveform's (or spectrogram's) log magnitude."""
    if isinstance(data, dsp.ComplexSpectrogram):
        spec = data.data
    else:
        arr = data.samples if isinstance(data, dsp.WaveSegment) else data
        arr = torch.as_tensor(np.asarray(arr)) if not isinstance(arr, torch.Tensor) else arr
        spec = arr if arr.is_complex() else dsp.stft(arr, hop, fft_size)
    img = spectrogram_image(spec, floor_db)
    Image.fromarray(np.ascontiguousarray(img), mode="L").save(path)
    return img
