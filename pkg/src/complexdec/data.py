"""Dataset manifests, audio loading, segment cropping, and a synthetic
speech-like test signal."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dsp import read_wav

logger = logging.getLogger(__name__)


@dataclass
class ManifestEntry:
    path: str
    duration: float
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    sample_rate: int = 48000

    @classmethod
    def from_wavs(cls, paths, split: str = "train", sample_rate: int = 48000) -> "DatasetManifest":
        entries = []
        for p in paths:
            w = read_wav(p)
            entries.append(ManifestEntry(str(p), len(w) / w.sample_rate, split))
        return cls(entries, sample_rate)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"sample_rate": self.sample_rate,
                                          "entries": [asdict(e) for e in self.entries]}, indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        base = Path(path).parent
        entries = []
        for e in raw["entries"]:
            p = Path(e["path"])
            if not p.is_absolute():
                p = base / p
            entries.append(ManifestEntry(str(p), float(e.get("duration", 0.0)), e.get("split", "train")))
        return cls(entries, int(raw.get("sample_rate", 48000)))

    def split(self, tag: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == tag], self.sample_rate)


def load_waves(manifest: DatasetManifest) -> dict[str, np.ndarray]:
    """Read every entry; unreadable files are skipped with a warning."""
    waves = {}
    for e in manifest.entries:
        try:
            waves[e.path] = read_wav(e.path).samples
        except (OSError, ValueError, EOFError) as exc:
            logger.warning("skipping unreadable audio %s: %s", e.path, exc)
    if manifest.entries and not waves:
        raise RuntimeError("no readable audio in manifest")
    return waves


def loop_pad(wave: np.ndarray, length: int) -> np.ndarray:
    if len(wave) >= length:
        return wave
    reps = -(-length // len(wave))
    return np.tile(wave, reps)[:length]


def random_crops(waves: list[np.ndarray], batch_size: int, length: int,
                 generator: torch.Generator) -> torch.Tensor:
    """``(batch_size, length)`` crops drawn uniformly over utterances and offsets."""
    out = np.empty((batch_size, length), dtype=np.float32)
    for b in range(batch_size):
        i = int(torch.randint(len(waves), (1,), generator=generator))
        w = loop_pad(waves[i], length)
        start = int(torch.randint(len(w) - length + 1, (1,), generator=generator))
        out[b] = w[start:start + length]
    return torch.from_numpy(out)


def synthetic_utterance(duration: float = 10.0, sample_rate: int = 48000, seed: int = 0,
                        peak: float = 0.5, noise_floor_db: float | None = -70.0) -> np.ndarray:
    """Voiced/unvoiced speech-like test signal.

    A harmonic source with a wandering pitch contour is shaped by a moving
    three-formant envelope and a syllable-rate amplitude envelope; short
    noise bursts stand in for fricatives.  A white background floor at
    ``noise_floor_db`` dBFS (RMS) keeps pauses from being digital silence, as
    in any real recording; pass ``None`` to leave it out.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    knots = np.linspace(0, duration, int(duration * 3) + 2)
    f0 = np.interp(t, knots, rng.uniform(100.0, 190.0, knots.size))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    vowels = np.array([[730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240],
                       [530, 1840, 2480], [640, 1190, 2390]], dtype=np.float64)
    syl_knots = np.arange(0, duration + 0.25, 0.25)
    choice = rng.integers(len(vowels), size=syl_knots.size)
    formants = np.stack([np.interp(t, syl_knots, vowels[choice, k]) for k in range(3)], axis=1)

    voiced = np.zeros(n)
    n_harm = int(8000 / 100)
    for k in range(1, n_harm + 1):
        fk = k * f0
        gain = np.zeros(n)
        for j, bw in enumerate((90.0, 110.0, 170.0)):
            gain += 1.0 / (1.0 + ((fk - formants[:, j]) / bw) ** 2) / (j + 1)
        gain *= (fk < 0.45 * sample_rate) / k ** 0.5
        voiced += gain * np.sin(k * phase)

    syllable = 0.5 * (1 - np.cos(2 * np.pi * 4.0 * t))
    syllable *= np.interp(t, syl_knots, rng.uniform(0.4, 1.0, syl_knots.size))
    gate = np.interp(t, syl_knots, (rng.uniform(size=syl_knots.size) < 0.8).astype(float))
    signal = voiced * syllable * gate

    noise = rng.standard_normal(n)
    noise = np.diff(noise, prepend=0.0)  # tilt toward high frequencies
    bursts = np.interp(t, syl_knots, (rng.uniform(size=syl_knots.size) < 0.25).astype(float))
    signal = signal + 0.15 * noise * bursts * (1 - gate * 0.8)

    fade = min(n // 2, int(0.01 * sample_rate))
    ramp = np.ones(n)
    ramp[:fade] = np.linspace(0, 1, fade)
    ramp[n - fade:] = np.linspace(1, 0, fade)
    signal *= ramp
    signal = peak * signal / np.max(np.abs(signal))
    if noise_floor_db is not None:
        signal = signal + 10.0 ** (noise_floor_db / 20.0) * rng.standard_normal(n)
    return signal
