"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np


def check_waveform(x, name: str = "waveform", min_length: int = 1) -> np.ndarray:
    """Return ``x`` as a finite 1-D float64 array of at least ``min_length`` samples."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D (mono), got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise ValueError(f"{name} has {arr.shape[0]} samples; need at least {min_length}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite samples")
    return arr


def check_waveforms(X, min_length: int = 1) -> list[np.ndarray]:
    """Accept one waveform, a list of waveforms, or a 2-D ``(n_utterances, samples)`` array."""
    if isinstance(X, np.ndarray) and X.ndim == 1:
        return [check_waveform(X, min_length=min_length)]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_waveform(row, f"X[{i}]", min_length) for i, row in enumerate(X)]
    waves = [check_waveform(w, f"X[{i}]", min_length) for i, w in enumerate(X)]
    if not waves:
        raise ValueError("X holds no waveforms")
    return waves


def check_indices(codes, n_stages: int, codebook_size: int) -> np.ndarray:
    arr = np.asarray(codes)
    if arr.ndim != 2 or arr.shape[1] != n_stages:
        raise ValueError(f"codes must be (n_frames, {n_stages}), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("codes must be integers")
    if arr.size and (arr.min() < 0 or arr.max() >= codebook_size):
        raise ValueError(f"codes must lie in [0, {codebook_size})")
    return arr.astype(np.int64)
