"""Training loops for the codec and the score post-filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import checkpoints, dsp
from .codec import CodecModel, codec_forward
from .config import CodecConfig, CompandingParams, SdeConfig, TrainConfig, UNetConfig
from .data import DatasetManifest, load_waves, random_crops
from .losses import LossReport, complex_mae, complex_mse, multires_mel_loss, total_loss
from .postfilter import ScoreModel, spf_training_step

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def _as_wave_list(data) -> list[np.ndarray]:
    if isinstance(data, DatasetManifest):
        return list(load_waves(data).values())
    if isinstance(data, dict):
        return [np.asarray(w, dtype=np.float64) for w in data.values()]
    if isinstance(data, np.ndarray) and data.ndim == 1:
        return [data.astype(np.float64)]
    waves = [np.asarray(w, dtype=np.float64) for w in data]
    if not waves:
        raise ValueError("no training audio")
    return waves


def _scheduler(opt: torch.optim.Optimizer, tc: TrainConfig):
    if tc.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(tc.max_steps, 1))
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)


def codec_loss(model: CodecModel, batch: torch.Tensor, generator: torch.Generator | None = None,
               bypass_quantizer: bool = False) -> tuple[torch.Tensor, LossReport]:
    """Forward a waveform batch and return the weighted objective and its report."""
    cfg = model.config
    out = codec_forward(batch, model, bypass_quantizer, generator)
    terms = {
        "vq": out.vq_loss,
        "mel": multires_mel_loss(torch.as_tensor(batch).to(out.wave_hat.dtype), out.wave_hat, cfg.mel_configs()),
        "mse": complex_mse(out.spec, out.spec_hat),
        "mae": complex_mae(out.spec, out.spec_hat),
    }
    return total_loss(terms, cfg.loss_weights)


def train_codec(data, codec_config: CodecConfig | None = None, train_config: TrainConfig | None = None,
                out_dir=None, model: CodecModel | None = None, log_path=None,
                callback: Callable[[int, LossReport], None] | None = None,
                bypass_quantizer: bool = False) -> TrainResult:
    """Adam on random crops of the training audio.

    ``data`` is a manifest, a list of waveforms, or a ``{name: waveform}`` dict.
    A checkpoint is written every ``checkpoint_every`` steps and at the end when
    ``out_dir`` is given; per-step loss reports go to ``log_path`` as JSON lines.
    ``bypass_quantizer`` trains the autoencoder alone (codebooks untouched).
    """
    tc = train_config or TrainConfig()
    waves = _as_wave_list(data)
    torch.manual_seed(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    if model is None:
        model = CodecModel(codec_config or CodecConfig())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = _scheduler(opt, tc)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = open(log_path, "a") if log_path else None
    history: list[LossReport] = []
    ckpt = None
    try:
        for step in range(tc.max_steps):
            batch = random_crops(waves, tc.batch_size, tc.segment_length, gen).to(model._dtype)
            loss, report = codec_loss(model, batch, gen, bypass_quantizer)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            sched.step()
            history.append(report)
            if log:
                log.write(report.to_json(step=step) + "\n")
            if callback:
                callback(step, report)
            if tc.log_every and step % tc.log_every == 0:
                logger.info("codec step %d total %.4f", step, report.total)
            if out_dir is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                ckpt = checkpoints.save_codec(out_dir / f"codec_step{step + 1}.pt", model, step + 1)
        if out_dir is not None:
            ckpt = checkpoints.save_codec(out_dir / "codec.pt", model, tc.max_steps)
    finally:
        if log:
            log.close()
    model.eval()
    return TrainResult(model, history, ckpt)


@torch.no_grad()
def companded_pairs(codec: CodecModel, waves: Iterable[np.ndarray],
                    params: CompandingParams = CompandingParams()) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """``(clean, coded)`` companded spectrogram pairs, each ``(frames, bins)``."""
    codec.eval()
    pairs = []
    for w in waves:
        wave = torch.as_tensor(np.asarray(w), dtype=codec._dtype)
        spec = codec.analyze(wave)
        spec_hat = codec.decode_indices(codec.encode_indices(wave))
        pairs.append((dsp.compand(spec, params), dsp.compand(spec_hat, params)))
    return pairs


def _crop_pairs(pairs, batch_size: int, frames: int, gen: torch.Generator):
    x0s, xhs = [], []
    for _ in range(batch_size):
        i = int(torch.randint(len(pairs), (1,), generator=gen))
        x0, xh = pairs[i]
        n = x0.shape[0]
        if n < frames:
            pad = frames - n
            x0 = torch.cat([x0, x0.new_zeros(pad, x0.shape[1])])
            xh = torch.cat([xh, xh.new_zeros(pad, xh.shape[1])])
            n = frames
        start = int(torch.randint(n - frames + 1, (1,), generator=gen))
        x0s.append(x0[start:start + frames])
        xhs.append(xh[start:start + frames])
    return torch.stack(x0s), torch.stack(xhs)


def train_spf(data, codec: CodecModel | None = None, sde_config: SdeConfig | None = None,
              unet_config: UNetConfig | None = None, train_config: TrainConfig | None = None,
              out_dir=None, crop_frames: int = 256, pairs=None, model: ScoreModel | None = None,
              log_path=None, sigma_weighted: bool = False) -> TrainResult:
    """Score-matching training on companded (clean, coded) spectrogram pairs.

    Pairs come from running ``codec`` over ``data`` unless given directly.
    ``sigma_weighted`` trains on (and logs) the ``sigma(t)**2``-weighted
    objective.
    """
    tc = train_config or TrainConfig()
    if pairs is None:
        if codec is None:
            raise ValueError("need a codec or precomputed pairs")
        pairs = companded_pairs(codec, _as_wave_list(data))
    torch.manual_seed(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    if model is None:
        model = ScoreModel(sde_config or SdeConfig(), unet_config or UNetConfig())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = _scheduler(opt, tc)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = open(log_path, "a") if log_path else None
    history: list[float] = []
    ckpt = None
    try:
        for step in range(tc.max_steps):
            x0, xh = _crop_pairs(pairs, tc.batch_size, crop_frames, gen)
            x0, xh = x0.to(torch.complex64), xh.to(torch.complex64)
            loss = spf_training_step(model, x0, xh, gen, sigma_weighted)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            sched.step()
            history.append(float(loss.detach()))
            if log:
                log.write(f'{{"step": {step}, "score_matching": {history[-1]}}}\n')
            if tc.log_every and step % tc.log_every == 0:
                logger.info("spf step %d loss %.4f", step, history[-1])
            if out_dir is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                ckpt = checkpoints.save_spf(out_dir / f"spf_step{step + 1}.pt", model, step + 1)
        if out_dir is not None:
            ckpt = checkpoints.save_spf(out_dir / "spf.pt", model, tc.max_steps)
    finally:
        if log:
            log.close()
    model.eval()
    return TrainResult(model, history, ckpt)
