"""OUVE diffusion: drift, diffusion coefficient, closed-form perturbation
kernel, score-matching loss, and the predictor-corrector sampler.

Complex tensors are treated as pairs of independent real coordinates; noise
``z`` has unit variance in both the real and imaginary part.
"""
from __future__ import annotations

import math
from typing import Callable

import torch
from torch import Tensor

from .config import SdeConfig

ScoreFn = Callable[[Tensor, Tensor, Tensor], Tensor]


def _check_t(t, cfg: SdeConfig, allow_beyond_T: bool = False) -> None:
    tt = torch.as_tensor(t)
    if bool((tt < 0).any()):
        raise ValueError(f"diffusion time must be >= 0, got {t}")
    if not allow_beyond_T and bool((tt > cfg.T + 1e-12).any()):
        raise ValueError(f"diffusion time must be <= T={cfg.T}, got {t}")


def _bcast(t, like: Tensor) -> Tensor:
    """Reshape a scalar or per-batch time so it broadcasts against ``like``."""
    t = torch.as_tensor(t, dtype=like.real.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def _log_ratio(cfg: SdeConfig) -> float:
    return math.log(cfg.sigma_max / cfg.sigma_min)


def drift(x_t: Tensor, x_hat: Tensor, cfg: SdeConfig) -> Tensor:
    """``gamma * (x_hat - x_t)``: pulls the state toward the coded spectrum."""
    if x_t.shape != x_hat.shape:
        raise ValueError("x_t and x_hat must have the same shape")
    return cfg.gamma * (x_hat - x_t)


def diffusion_coeff(t, cfg: SdeConfig):
    """``sigma_min * (sigma_max/sigma_min)**t * sqrt(2 log(sigma_max/sigma_min))``."""
    _check_t(t, cfg)
    ratio = cfg.sigma_max / cfg.sigma_min
    if isinstance(t, Tensor):
        return cfg.sigma_min * ratio ** t * math.sqrt(2 * _log_ratio(cfg))
    return cfg.sigma_min * ratio ** float(t) * math.sqrt(2 * _log_ratio(cfg))


def marginal_std(t, cfg: SdeConfig):
    """Standard deviation of ``x_t`` given ``x_0``.

    Variation of constants on the linear SDE gives
    ``var(t) = int_0^t exp(-2 gamma (t - s)) g(s)^2 ds``
    ``      = sigma_min^2 L (e^{2 L t} - e^{-2 gamma t}) / (gamma + L)``
    with ``L = log(sigma_max / sigma_min)``.
    """
    _check_t(t, cfg, allow_beyond_T=True)
    L = _log_ratio(cfg)
    g = cfg.gamma
    if isinstance(t, Tensor):
        var = cfg.sigma_min ** 2 * L * (torch.exp(2 * L * t) - torch.exp(-2 * g * t)) / (g + L)
        return var.clamp_min(0).sqrt()
    t = float(t)
    var = cfg.sigma_min ** 2 * L * (math.exp(2 * L * t) - math.exp(-2 * g * t)) / (g + L)
    return math.sqrt(max(var, 0.0))


def perturbation_kernel(x0: Tensor, x_hat: Tensor, t, cfg: SdeConfig):
    """Mean and standard deviation of ``x_t | (x0, x_hat)``.

    The mean decays exponentially from ``x0`` toward ``x_hat``.
    """
    _check_t(t, cfg, allow_beyond_T=True)
    tt = _bcast(t, x0)
    decay = torch.exp(-cfg.gamma * tt)
    mean = decay * x0 + (1 - decay) * x_hat
    return mean, marginal_std(t if not isinstance(t, Tensor) else t.to(x0.real.dtype), cfg)


def sample_xt(x0: Tensor, x_hat: Tensor, t, z: Tensor, cfg: SdeConfig) -> Tensor:
    mean, std = perturbation_kernel(x0, x_hat, t, cfg)
    if isinstance(std, Tensor):
        std = _bcast(std, x0)
    return mean + std * z


def true_score(x_t: Tensor, mean: Tensor, sigma) -> Tensor:
    """Score of the Gaussian perturbation kernel, ``-(x_t - mean) / sigma^2``."""
    s = torch.as_tensor(sigma)
    if bool((s <= 0).any()):
        raise ValueError("sigma must be positive to evaluate the score")
    if isinstance(sigma, Tensor):
        sigma = _bcast(sigma, x_t)
    return -(x_t - mean) / sigma ** 2


def sample_t(n: int, cfg: SdeConfig, generator: torch.Generator | None = None,
             dtype=torch.float32) -> Tensor:
    """Uniform training times in ``[t_eps, T]``."""
    u = torch.rand(n, generator=generator, dtype=dtype)
    return cfg.t_eps + (cfg.T - cfg.t_eps) * u


def complex_randn(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    re = torch.randn(shape, generator=generator, dtype=dtype)
    im = torch.randn(shape, generator=generator, dtype=dtype)
    return torch.complex(re, im)


def _sq_norm(x: Tensor) -> Tensor:
    """Per-batch-element squared norm over all real coordinates."""
    v = torch.view_as_real(x) if x.is_complex() else x
    return v.pow(2).reshape(v.shape[0], -1).sum(1)


def score_matching_loss(score_fn: ScoreFn, x0: Tensor, x_hat: Tensor, t: Tensor, z: Tensor,
                        cfg: SdeConfig, sigma_weighted: bool = False) -> Tensor:
    """Batch mean of ``|| s(x_t, x_hat, t) + z / sigma(t) ||^2``.

    ``x0``, ``x_hat``, ``z`` are ``(B, ...)``; ``t`` is ``(B,)``.  With
    ``sigma_weighted`` each term is multiplied by ``sigma(t)**2``, which evens
    out the contribution of different diffusion times during training.
    """
    if bool((t < cfg.t_eps - 1e-7).any()):
        raise ValueError("training times must not fall below t_eps")
    x_t = sample_xt(x0, x_hat, t, z, cfg)
    std = _bcast(marginal_std(t, cfg), x0)
    score = score_fn(x_t, x_hat, t)
    if not bool(torch.isfinite(torch.view_as_real(score) if score.is_complex() else score).all()):
        raise FloatingPointError("score model produced non-finite output")
    err = _sq_norm(score + z / std)
    if sigma_weighted:
        err = err * marginal_std(t, cfg) ** 2
    return err.mean()


def pc_sample(score_fn: ScoreFn, x_hat: Tensor, cfg: SdeConfig, seed: int = 0,
              return_path: bool = False):
    """Integrate the reverse SDE from ``T`` down to ``t_eps``.

    Each of the ``cfg.n_steps`` steps is one reverse-diffusion (Euler-Maruyama)
    predictor move followed by one annealed Langevin corrector move at the new
    time.  The corrector step is ``2 (snr ||z|| / ||s||)^2``; it is skipped when
    the score vanishes.  Returns the noise-free mean of the final move.

    ``x_hat`` is ``(B, ...)``; the result is deterministic given ``seed``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    real_dtype = x_hat.real.dtype
    times = torch.linspace(cfg.T, cfg.t_eps, cfg.n_steps + 1, dtype=torch.float64)
    b = x_hat.shape[0]

    def noise():
        if x_hat.is_complex():
            return complex_randn(x_hat.shape, gen, real_dtype)
        return torch.randn(x_hat.shape, generator=gen, dtype=real_dtype)

    def tvec(t):
        return torch.full((b,), float(t), dtype=real_dtype)

    x = x_hat + marginal_std(cfg.T, cfg) * noise()
    x_mean = x
    path = [x]
    for i in range(cfg.n_steps):
        t, t_next = float(times[i]), float(times[i + 1])
        dt = t - t_next
        # predictor: reverse diffusion
        g = diffusion_coeff(t, cfg)
        s = score_fn(x, x_hat, tvec(t))
        x_mean = x - (drift(x, x_hat, cfg) - g ** 2 * s) * dt
        x = x_mean + g * math.sqrt(dt) * noise()
        # corrector: annealed Langevin
        s = score_fn(x, x_hat, tvec(t_next))
        z = noise()
        s_norm = _sq_norm(s).sqrt()
        z_norm = _sq_norm(z).sqrt()
        step = torch.where(s_norm > 0, 2 * (cfg.snr * z_norm / s_norm.clamp_min(1e-30)) ** 2,
                           torch.zeros_like(s_norm))
        step = step.reshape((b,) + (1,) * (x.ndim - 1)).to(real_dtype)
        x_mean = x + step * s
        x = x_mean + torch.sqrt(2 * step) * z
        path.append(x_mean)
    if return_path:
        return x_mean, path
    return x_mean


def analytic_score_fn(x0: Tensor, cfg: SdeConfig) -> ScoreFn:
    """Exact score of the perturbation kernel for a known clean ``x0``."""

    def fn(x_t, x_hat, t):
        mean, std = perturbation_kernel(x0, x_hat, t, cfg)
        return true_score(x_t, mean, std)

    return fn
