"""STFT/iSTFT with arbitrary even FFT sizes, amplitude companding, mel analysis,
and PCM WAV I/O.

All transforms are torch functions that accept any leading batch dimensions
and are differentiable, so the same code serves analysis and training.
Spectrograms are laid out ``(..., frames, bins)``.
"""
from __future__ import annotations

import logging
import wave as _wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor

from .config import CompandingParams, MelConfig

logger = logging.getLogger(__name__)

# squared-window envelope floor for the inverse STFT: caps the gain on the
# thinly covered tail at 20x while leaving every sample within 200 samples of
# the last frame center exact for the default 510/320 geometry
_ENVELOPE_FLOOR = 0.05


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    if dtype is None and arr.dtype.kind in "iub":
        dtype = torch.float64
    t = torch.as_tensor(arr)
    return t if dtype is None else t.to(dtype)


def get_window(name: str, size: int, dtype=torch.float64) -> Tensor:
    if name != "hann":
        raise ValueError(f"unsupported window {name!r}")
    # periodic Hann
    return torch.hann_window(size, periodic=True, dtype=dtype)


def n_frames_for(length: int, hop: int) -> int:
    return -(-length // hop)


def check_nola(window: Tensor, hop: int, tol: float = 1e-6) -> float:
    """Return the minimum of the squared-window overlap-add envelope.

    Raises ``ValueError`` when the envelope vanishes somewhere, in which case
    no overlap-add inverse exists for this window/hop pair.
    """
    n = window.shape[-1]
    if hop > n:
        raise ValueError(f"hop {hop} > window length {n} leaves gaps; overlap-add condition violated")
    w2 = window.double() ** 2
    env = torch.zeros(hop, dtype=torch.float64)
    for start in range(0, n, hop):
        seg = w2[start:start + hop]
        env[: seg.shape[0]] += seg
    m = float(env.min())
    if m <= tol:
        raise ValueError(f"window/hop pair violates the overlap-add condition (min envelope {m:.3g})")
    return m


def stft(x, hop: int = 320, fft_size: int = 510, window: str = "hann") -> Tensor:
    """Centered STFT giving ``ceil(len / hop)`` frames of ``fft_size // 2 + 1`` bins.

    Frames are centered on ``t * hop`` after reflect-padding by ``fft_size // 2``.
    """
    x = _as_tensor(x)
    if fft_size % 2:
        raise ValueError("fft_size must be even")
    if not 0 < hop <= fft_size:
        raise ValueError("need 0 < hop <= fft_size")
    length = x.shape[-1]
    if length == 0:
        raise ValueError("empty waveform")
    if not bool(torch.isfinite(x).all()):
        raise ValueError("waveform contains non-finite samples")
    pad = fft_size // 2
    if length <= pad:
        raise ValueError(f"waveform of {length} samples is shorter than half a frame ({pad + 1})")
    if not x.is_floating_point():
        x = x.double()
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, length)
    padded = torch.nn.functional.pad(flat, (pad, pad), mode="reflect").reshape(*lead, length + 2 * pad)
    n_frames = n_frames_for(length, hop)
    frames = padded.unfold(-1, fft_size, hop)[..., :n_frames, :]
    win = get_window(window, fft_size, dtype=x.dtype)
    return torch.fft.rfft(frames * win, n=fft_size, dim=-1)


def istft(spec, length: int, hop: int = 320, fft_size: int = 510, window: str = "hann") -> Tensor:
    """Weighted overlap-add inverse of :func:`stft`.

    Division by the squared-window envelope is floored, so the ragged tail
    (covered only by window edges) is tapered rather than blown up when the
    spectrogram is not a consistent STFT.  Uncovered samples come out as zero.
    """
    spec = _as_tensor(spec)
    if spec.shape[-1] != fft_size // 2 + 1:
        raise ValueError(f"expected {fft_size // 2 + 1} bins, got {spec.shape[-1]}")
    real_dtype = torch.float64 if spec.dtype == torch.complex128 else torch.float32
    win = get_window(window, fft_size, dtype=real_dtype)
    check_nola(win, hop)
    n_frames = spec.shape[-2]
    lead = spec.shape[:-2]
    frames = torch.fft.irfft(spec, n=fft_size, dim=-1) * win
    pad = fft_size // 2
    total = (n_frames - 1) * hop + fft_size
    fold = torch.nn.functional.fold
    # overlap-add via fold: (B, fft_size, n_frames) -> (B, 1, 1, total)
    flat = frames.reshape(-1, n_frames, fft_size).transpose(1, 2)
    y = fold(flat, output_size=(1, total), kernel_size=(1, fft_size), stride=(1, hop)).reshape(-1, total)
    env = fold((win ** 2).reshape(1, fft_size, 1).expand(1, fft_size, n_frames),
               output_size=(1, total), kernel_size=(1, fft_size), stride=(1, hop)).reshape(total)
    y = y / env.clamp_min(_ENVELOPE_FLOOR)
    y = y[:, pad:pad + length]
    if y.shape[-1] < length:
        y = torch.nn.functional.pad(y, (0, length - y.shape[-1]))
    return y.reshape(*lead, length)


def compand(spec, params: CompandingParams = CompandingParams()) -> Tensor:
    """``beta * |x|**alpha * exp(i angle(x))``; zero stays zero."""
    spec = _as_tensor(spec)
    if not spec.is_complex():
        spec = spec.to(torch.complex128 if spec.dtype == torch.float64 else torch.complex64)
    mag = spec.abs()
    # x / |x| carries the phase; guarded so that 0 -> 0 without NaN
    safe = torch.where(mag > 0, mag, torch.ones_like(mag))
    scale = torch.where(mag > 0, params.beta * safe ** (params.alpha - 1.0), torch.zeros_like(mag))
    return spec * scale


def decompand(spec, params: CompandingParams = CompandingParams()) -> Tensor:
    """Inverse of :func:`compand`: ``(|x| / beta)**(1/alpha) * exp(i angle(x))``."""
    spec = _as_tensor(spec)
    if not spec.is_complex():
        spec = spec.to(torch.complex128 if spec.dtype == torch.float64 else torch.complex64)
    mag = spec.abs()
    safe = torch.where(mag > 0, mag, torch.ones_like(mag))
    gain = params.beta ** (-1.0 / params.alpha)
    scale = torch.where(mag > 0, gain * safe ** (1.0 / params.alpha - 1.0), torch.zeros_like(mag))
    return spec * scale


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def _mel_filterbank_np(n_mels: int, fft_size: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    n_bins = fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_filterbank(cfg: MelConfig, dtype=torch.float32) -> Tensor:
    """Peak-normalized triangular filters, shape ``(n_mels, bins)``.

    Adjacent triangles sum to at most one in every bin, so the filterbank never
    adds energy.
    """
    fb = _mel_filterbank_np(cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.fmin, cfg.fmax)
    return torch.as_tensor(fb, dtype=dtype)


def mel_spectrogram(x, cfg: MelConfig, power: float = 1.0, log: bool = True) -> Tensor:
    """Mel analysis of a waveform, ``(..., frames, n_mels)``.

    With ``log`` the magnitudes are clamped at ``cfg.log_floor`` and passed
    through ``log10``.
    """
    x = _as_tensor(x)
    if x.shape[-1] < cfg.fft_size:
        raise ValueError(f"waveform of {x.shape[-1]} samples is shorter than one {cfg.fft_size}-sample frame")
    spec = stft(x, hop=cfg.hop, fft_size=cfg.fft_size)
    mag = spec.abs() if power == 1.0 else spec.abs() ** power
    mel = mag @ mel_filterbank(cfg, dtype=mag.dtype).T
    if log:
        return torch.log10(mel.clamp_min(cfg.log_floor))
    return mel


@dataclass
class WaveSegment:
    samples: np.ndarray
    sample_rate: int = 48000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[-1]


@dataclass
class ComplexSpectrogram:
    """A ``frames x bins`` complex matrix together with the analysis settings."""

    data: Tensor
    hop: int = 320
    fft_size: int = 510
    window: str = "hann"
    sample_rate: int = 48000

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.shape[-1] != self.fft_size // 2 + 1:
            raise ValueError(f"expected {self.fft_size // 2 + 1} bins, got {self.data.shape[-1]}")
        if not bool(torch.isfinite(torch.view_as_real(self.data.to(torch.complex128))).all()):
            raise ValueError("spectrogram contains non-finite entries")

    @classmethod
    def from_wave(cls, wave: WaveSegment | np.ndarray, hop: int = 320, fft_size: int = 510,
                  window: str = "hann", sample_rate: int | None = None) -> "ComplexSpectrogram":
        if isinstance(wave, WaveSegment):
            sample_rate = sample_rate or wave.sample_rate
            wave = wave.samples
        return cls(stft(wave, hop, fft_size, window), hop, fft_size, window, sample_rate or 48000)

    def to_wave(self, length: int) -> WaveSegment:
        y = istft(self.data, length, self.hop, self.fft_size, self.window)
        return WaveSegment(y.detach().cpu().numpy(), self.sample_rate)

    @property
    def n_frames(self) -> int:
        return self.data.shape[-2]

    @property
    def n_bins(self) -> int:
        return self.data.shape[-1]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def real(self) -> Tensor:
        return self.data.real

    @property
    def imag(self) -> Tensor:
        return self.data.imag

    def with_data(self, data: Tensor) -> "ComplexSpectrogram":
        return ComplexSpectrogram(data, self.hop, self.fft_size, self.window, self.sample_rate)


def read_wav(path) -> WaveSegment:
    """Read a mono 16- or 24-bit PCM WAV file into floats in [-1, 1)."""
    with _wave.open(str(path), "rb") as fh:
        n_channels = fh.getnchannels()
        width = fh.getsampwidth()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    if n_channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {n_channels} channels")
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        data = ints.astype(np.float64) / float(1 << 23)
    else:
        raise ValueError(f"{path}: unsupported sample width {8 * width} bits")
    if rate != 48000:
        logger.warning("%s: sample rate %d Hz is not 48 kHz; no resampling is applied", path, rate)
    return WaveSegment(data, rate)


def write_wav(path, samples, sample_rate: int = 48000, bits: int = 16) -> None:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if sample_rate != 48000:
        logger.warning("writing %s at %d Hz (not 48 kHz)", path, sample_rate)
    if bits == 16:
        ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        raw = ints.tobytes()
    elif bits == 24:
        full = 1 << 23
        ints = np.clip(np.round(samples * full), -full, full - 1).astype(np.int32)
        u = (ints & 0xFFFFFF).astype(np.uint32)
        raw = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise ValueError("bits must be 16 or 24")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(bits // 8)
        fh.setframerate(sample_rate)
        fh.writeframes(raw)


def frame_rate(sample_rate: int, hop: int) -> float:
    return sample_rate / hop


def log_magnitude_db(spec: Tensor, floor_db: float = -100.0) -> Tensor:
    mag = spec.abs()
    return (20.0 * torch.log10(mag.clamp_min(10 ** (floor_db / 20.0)))).clamp_min(floor_db)


__all__ = [
    "ComplexSpectrogram", "WaveSegment", "check_nola", "compand", "decompand", "frame_rate",
    "get_window", "hz_to_mel", "istft", "log_magnitude_db", "mel_filterbank", "mel_spectrogram",
    "mel_to_hz", "n_frames_for", "read_wav", "stft", "write_wav",
]
