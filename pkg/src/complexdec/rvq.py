"""Residual vector quantization with EMA-learned codebooks."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np
import torch
from torch import Tensor, nn

BRANCH_TAGS = {"real": 0, "imag": 1}
_CODEBOOK_MAGIC = b"CPXB"
_CODEBOOK_VERSION = 1


def vq_nearest(vectors: Tensor, entries: Tensor) -> tuple[Tensor, Tensor]:
    """Nearest codebook entry under squared Euclidean distance.

    ``vectors`` is ``(N, D)`` (or a single ``D``-vector); ties go to the lowest index.
    """
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ValueError("codebook is empty")
    single = vectors.ndim == 1
    flat = vectors.reshape(-1, vectors.shape[-1])
    if flat.shape[-1] != entries.shape[1]:
        raise ValueError(f"dimension mismatch: vectors {flat.shape[-1]} vs codebook {entries.shape[1]}")
    entries = entries.to(flat.dtype)
    dist = (flat.pow(2).sum(1, keepdim=True) - 2.0 * flat @ entries.T + entries.pow(2).sum(1)[None, :])
    # torch.argmin returns the first minimum on CPU
    idx = dist.argmin(dim=1)
    chosen = entries[idx]
    if single:
        return idx[0], chosen[0]
    return idx, chosen


def commitment_loss(latents: Tensor, quantized: Tensor) -> Tensor:
    """MSE between latents and the (gradient-stopped) quantized vectors."""
    if latents.shape != quantized.shape:
        raise ValueError(f"shape mismatch {tuple(latents.shape)} vs {tuple(quantized.shape)}")
    return torch.mean((latents - quantized.detach()) ** 2)


def perplexity(indices: Tensor, codebook_size: int) -> float:
    counts = torch.bincount(indices.reshape(-1), minlength=codebook_size).double()
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(torch.exp(-(nz * nz.log()).sum()))


class Codebook(nn.Module):
    """One VQ stage: ``K x D`` entries plus EMA statistics.

    Entries are buffers, not parameters; they move only through :meth:`ema_update`.
    """

    def __init__(self, size: int, dim: int, decay: float = 0.99, eps: float = 1e-5,
                 dead_code_steps: int = 200):
        super().__init__()
        if size < 1 or dim < 1:
            raise ValueError("codebook size and dim must be positive")
        self.size = size
        self.dim = dim
        self.decay = decay
        self.eps = eps
        self.dead_code_steps = dead_code_steps
        self.register_buffer("entries", torch.zeros(size, dim))
        self.register_buffer("ema_cluster_size", torch.zeros(size))
        self.register_buffer("ema_embed_sum", torch.zeros(size, dim))
        self.register_buffer("unused_steps", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    def init_from(self, vectors: Tensor, generator: torch.Generator | None = None) -> None:
        """Seed entries with randomly chosen latent vectors (with replacement if too few)."""
        vectors = vectors.detach().reshape(-1, self.dim).to(self.entries.dtype)
        n = vectors.shape[0]
        if n >= self.size:
            pick = torch.randperm(n, generator=generator)[: self.size]
        else:
            pick = torch.randint(n, (self.size,), generator=generator)
        self.entries.copy_(vectors[pick])
        self.ema_cluster_size.fill_(1.0)
        self.ema_embed_sum.copy_(self.entries)
        self.unused_steps.zero_()
        self.initialized.fill_(True)

    def nearest(self, vectors: Tensor) -> tuple[Tensor, Tensor]:
        return vq_nearest(vectors, self.entries)

    @torch.no_grad()
    def ema_update(self, vectors: Tensor, assignments: Tensor,
                   generator: torch.Generator | None = None) -> None:
        """Move assigned entries toward the EMA of their cluster means.

        Codes with no assignment in this batch keep their entries; codes unused
        for ``dead_code_steps`` consecutive updates are reseeded from ``vectors``.
        """
        vectors = vectors.detach().reshape(-1, self.dim).to(self.entries.dtype)
        assignments = assignments.reshape(-1)
        if assignments.numel() and (assignments.min() < 0 or assignments.max() >= self.size):
            raise ValueError("assignment index out of range")
        if self.decay >= 1.0:
            return
        counts = torch.bincount(assignments, minlength=self.size).to(vectors.dtype)
        sums = torch.zeros(self.size, self.dim, dtype=vectors.dtype).index_add_(0, assignments, vectors)
        d = self.decay
        self.ema_cluster_size.mul_(d).add_((1 - d) * counts)
        self.ema_embed_sum.mul_(d).add_((1 - d) * sums)
        n = self.ema_cluster_size.sum()
        smoothed = (self.ema_cluster_size + self.eps) / (n + self.size * self.eps) * n
        used = counts > 0
        self.entries[used] = self.ema_embed_sum[used] / smoothed[used, None]

        self.unused_steps[used] = 0
        self.unused_steps[~used] += 1
        if self.dead_code_steps > 0:
            dead = torch.nonzero(self.unused_steps >= self.dead_code_steps).reshape(-1)
            if dead.numel() and vectors.shape[0]:
                pick = torch.randint(vectors.shape[0], (dead.numel(),), generator=generator)
                self.entries[dead] = vectors[pick]
                self.ema_embed_sum[dead] = vectors[pick]
                self.ema_cluster_size[dead] = 1.0
                self.unused_steps[dead] = 0


@dataclass
class QuantizationResult:
    indices: Tensor  # (N, n_stages)
    quantized: Tensor  # (N, D)
    residual_energy_per_stage: Tensor  # (n_stages,)
    commitment: Tensor  # scalar


class RvqStack(nn.Module):
    """Ordered cascade of codebooks; each stage codes the previous residual."""

    def __init__(self, n_stages: int, size: int, dim: int, decay: float = 0.99, eps: float = 1e-5,
                 dead_code_steps: int = 200):
        super().__init__()
        self.stages = nn.ModuleList(
            Codebook(size, dim, decay, eps, dead_code_steps) for _ in range(n_stages)
        )

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def size(self) -> int:
        return self.stages[0].size

    def encode(self, latents: Tensor, update: bool | None = None,
               generator: torch.Generator | None = None) -> QuantizationResult:
        """Quantize ``(N, D)`` latents stage by stage.

        With ``update`` (default: ``self.training``) each stage is EMA-updated on
        the residual it saw, and uninitialized stages are seeded from it first.
        The returned ``quantized`` has straight-through gradients to ``latents``.
        """
        if update is None:
            update = self.training
        flat = latents.reshape(-1, latents.shape[-1])
        if flat.shape[-1] != self.dim:
            raise ValueError(f"latent dim {flat.shape[-1]} does not match codebook dim {self.dim}")
        residual = flat.detach()
        quantized = torch.zeros_like(residual)
        all_idx = []
        energies = []
        for stage in self.stages:
            if update and not bool(stage.initialized):
                stage.init_from(residual, generator)
            idx, q = stage.nearest(residual)
            if update:
                stage.ema_update(residual, idx, generator)
            residual = residual - q
            quantized = quantized + q
            all_idx.append(idx)
            energies.append(residual.pow(2).sum(-1).mean())
        commit = commitment_loss(flat, quantized)
        st = flat + (quantized - flat).detach()
        return QuantizationResult(
            indices=torch.stack(all_idx, dim=1),
            quantized=st,
            residual_energy_per_stage=torch.stack(energies) if energies else torch.zeros(0),
            commitment=commit,
        )

    def decode(self, indices: Tensor) -> Tensor:
        """Sum of the addressed entries; ``indices`` is ``(N, n_stages)``."""
        indices = torch.as_tensor(indices, dtype=torch.long)
        if indices.ndim != 2 or indices.shape[1] != self.n_stages:
            raise ValueError(f"expected (N, {self.n_stages}) indices, got {tuple(indices.shape)}")
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.size):
            raise ValueError(f"index out of range [0, {self.size})")
        out = torch.zeros(indices.shape[0], self.dim, dtype=self.stages[0].entries.dtype)
        for s, stage in enumerate(self.stages):
            out = out + stage.entries[indices[:, s]]
        return out


def rvq_encode(latents: Tensor, stack: RvqStack) -> QuantizationResult:
    return stack.encode(latents, update=False)


def rvq_decode(indices: Tensor, stack: RvqStack) -> Tensor:
    return stack.decode(indices)


def ema_update(codebook: Codebook, assigned_vectors: Tensor, assignments: Tensor) -> Codebook:
    codebook.ema_update(assigned_vectors, assignments)
    return codebook


def save_codebooks(fh: BinaryIO, stack: RvqStack, branch: str) -> None:
    """Write one branch: ``CPXB`` magic, version u8, branch tag u8, then K, D,
    n_stages as little-endian u32, then row-major float32 entries stage by stage."""
    fh.write(_CODEBOOK_MAGIC)
    fh.write(struct.pack("<BBIII", _CODEBOOK_VERSION, BRANCH_TAGS[branch], stack.size, stack.dim,
                         stack.n_stages))
    for stage in stack.stages:
        fh.write(stage.entries.detach().cpu().numpy().astype("<f4").tobytes())


def load_codebooks(fh: BinaryIO) -> tuple[str, np.ndarray]:
    """Inverse of :func:`save_codebooks`; returns ``(branch, entries[n_stages, K, D])``."""
    magic = fh.read(4)
    if magic != _CODEBOOK_MAGIC:
        raise ValueError(f"not a codebook file (magic {magic!r})")
    version, tag, k, d, n = struct.unpack("<BBIII", fh.read(14))
    if version != _CODEBOOK_VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    branch = {v: name for name, v in BRANCH_TAGS.items()}[tag]
    nbytes = n * k * d * 4
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise ValueError(f"truncated codebook file: expected {nbytes} bytes of entries, got {len(raw)}")
    return branch, np.frombuffer(raw, dtype="<f4").reshape(n, k, d).copy()
