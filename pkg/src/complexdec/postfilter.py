"""Score network and the post-filter that refines decoded spectra."""
from __future__ import annotations

import math
from typing import Callable

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import dsp
from .config import CompandingParams, SdeConfig, UNetConfig
from .sde import marginal_std, pc_sample, sample_t, score_matching_loss


class GaussianFourierProjection(nn.Module):
    """Random Fourier features of the diffusion time."""

    def __init__(self, dim: int, scale: float = 16.0):
        super().__init__()
        self.register_buffer("W", torch.randn(dim // 2) * scale)

    def forward(self, t: Tensor) -> Tensor:
        proj = 2 * math.pi * t[:, None] * self.W[None, :].to(t.dtype)
        return torch.cat([proj.sin(), proj.cos()], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(embed_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (self.skip(x) + h) / math.sqrt(2.0)


class ScoreUNet(nn.Module):
    """Small U-Net over ``(B, 4, frames, bins)`` inputs: real/imag of the
    diffusion state and of the conditioner.  Returns two channels."""

    def __init__(self, cfg: UNetConfig = UNetConfig(), in_ch: int = 4, out_ch: int = 2):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.time_embed = nn.Sequential(
            GaussianFourierProjection(cfg.embed_dim, cfg.fourier_scale),
            nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.SiLU(),
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
        )
        self.conv_in = nn.Conv2d(in_ch, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = chans[0]
        for c in chans:
            self.down.append(ResBlock(prev, c, cfg.embed_dim))
            prev = c
        self.mid = ResBlock(prev, prev, cfg.embed_dim)
        self.up = nn.ModuleList()
        for c in reversed(chans):
            self.up.append(ResBlock(prev + c, c, cfg.embed_dim))
            prev = c
        self.norm_out = _norm(prev)
        self.conv_out = nn.Conv2d(prev, out_ch, 3, padding=1)
        # time-gated linear path from the raw input: the normalized trunk
        # cannot carry absolute amplitude, which small-t denoising needs
        self.skip_out = nn.Conv2d(in_ch, out_ch, 1)
        self.skip_gain = nn.Linear(cfg.embed_dim, out_ch)
        for layer in (self.conv_out, self.skip_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.cfg.channel_mults) - 1)

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        emb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.down) - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        skip = self.skip_out(x) * self.skip_gain(emb)[:, :, None, None]
        return self.conv_out(F.silu(self.norm_out(h))) + skip


class ScoreModel(nn.Module):
    """Score estimate ``s(x_t, x_hat, t)`` for complex ``(B, frames, bins)`` tensors.

    The network predicts the clean-minus-coded correction ``d``; the score is
    the Gaussian score around the implied mean ``x_hat + exp(-gamma t) d``.
    With an untrained (zero) network this is the score for ``x0 = x_hat``.
    """

    def __init__(self, sde: SdeConfig = SdeConfig(), unet: UNetConfig = UNetConfig()):
        super().__init__()
        self.sde = sde
        self.net = ScoreUNet(unet)

    def correction(self, x_t: Tensor, x_hat: Tensor, t: Tensor) -> Tensor:
        inp = torch.stack([x_t.real, x_t.imag, x_hat.real, x_hat.imag], dim=1)
        m = self.net.multiple
        T, Fb = inp.shape[-2:]
        pad_t, pad_f = (-T) % m, (-Fb) % m
        if pad_t or pad_f:
            inp = F.pad(inp, (0, pad_f, 0, pad_t))
        out = self.net(inp, t.to(inp.dtype))[..., :T, :Fb]
        return torch.complex(out[:, 0], out[:, 1])

    def forward(self, x_t: Tensor, x_hat: Tensor, t: Tensor) -> Tensor:
        t = torch.as_tensor(t, dtype=x_t.real.dtype).reshape(-1).expand(x_t.shape[0])
        d = self.correction(x_t, x_hat, t)
        tb = t.reshape(-1, 1, 1)
        mean = x_hat + torch.exp(-self.sde.gamma * tb) * d
        std = marginal_std(tb, self.sde)
        return -(x_t - mean) / std ** 2


def spf_training_step(model: ScoreModel, x0: Tensor, x_hat: Tensor,
                      generator: torch.Generator | None = None, sigma_weighted: bool = False) -> Tensor:
    """One draw of the score-matching objective on companded ``(B, frames, bins)`` pairs."""
    cfg = model.sde
    dtype = x0.real.dtype
    t = sample_t(x0.shape[0], cfg, generator, dtype)
    z = torch.complex(torch.randn(x0.shape, generator=generator, dtype=dtype),
                      torch.randn(x0.shape, generator=generator, dtype=dtype))
    return score_matching_loss(model, x0, x_hat, t, z, cfg, sigma_weighted)


Sampler = Callable[..., Tensor]


def _tile_seed(seed: int, index: int) -> int:
    return (int(seed) * 1_000_003 + index) % (2 ** 63)


@torch.no_grad()
def enhance(decoded_spec, model: Callable | None, params: CompandingParams = CompandingParams(),
            cfg: SdeConfig = SdeConfig(), seed: int = 0, tile_frames: int = 256,
            sampler: Sampler | None = None) -> Tensor:
    """Compand, sample tile by tile, stitch, decompand.

    ``decoded_spec`` is complex ``(frames, bins)``.  Tiles are ``tile_frames``
    long, the last one zero-padded; each tile draws its noise from its own seed
    so results do not depend on processing order.
    """
    if sampler is None:
        sampler = pc_sample
    spec = torch.as_tensor(decoded_spec)
    if spec.ndim != 2:
        raise ValueError("expected a (frames, bins) spectrogram")
    n_frames = spec.shape[0]
    y = dsp.compand(spec, params)
    n_tiles = -(-n_frames // tile_frames)
    padded = F.pad(torch.view_as_real(y), (0, 0, 0, 0, 0, n_tiles * tile_frames - n_frames))
    tiles = torch.view_as_complex(padded.contiguous()).reshape(n_tiles, tile_frames, -1)
    out = [sampler(model, tiles[i:i + 1], cfg, seed=_tile_seed(seed, i)) for i in range(n_tiles)]
    stitched = torch.cat(out, dim=0).reshape(n_tiles * tile_frames, -1)[:n_frames]
    return dsp.decompand(stitched, params)
