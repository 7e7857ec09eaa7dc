"""Objective waveform metrics."""
from __future__ import annotations

import numpy as np

SI_SDR_CAP_DB = 100.0


def _pair(reference, estimate) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape[0]} vs {est.shape[0]}")
    return ref, est


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clipped to +/-100 dB.

    The estimate is projected onto the reference; the projection is the target
    and what remains is the distortion.
    """
    ref, est = _pair(reference, estimate)
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise ValueError("reference signal is silent")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    t_energy = target @ target
    n_energy = noise @ noise
    if n_energy <= t_energy * 10 ** (-SI_SDR_CAP_DB / 10):
        return SI_SDR_CAP_DB
    if t_energy <= n_energy * 10 ** (-SI_SDR_CAP_DB / 10):
        return -SI_SDR_CAP_DB
    return float(10 * np.log10(t_energy / n_energy))


def wav_mse(reference, estimate) -> float:
    ref, est = _pair(reference, estimate)
    return float(np.mean((ref - est) ** 2))
