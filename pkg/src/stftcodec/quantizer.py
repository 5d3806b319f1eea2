"""Residual vector quantization with factorized, L2-normalized code lookup.

Each stage projects the current residual into a low-dimensional code space,
picks the codeword with the highest cosine similarity (ties broken toward the
lowest index), projects the selected codeword back, and subtracts it from the
residual. Gradients reach the encoder through a straight-through pass whose
forward value equals the quantized sum exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class QuantizerError(ValueError):
    """Raised for invalid codebook specs, shapes, or token values."""


def _is_power_of_two(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class CodebookSpec:
    """Stage sizes and projection dimensions of the residual quantizer."""

    sizes: tuple = (1024,) * 8
    code_dim: int = 8
    input_dim: int = 512

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not 1 <= len(self.sizes) <= 8:
            raise QuantizerError(f"need 1..8 codebooks, got {len(self.sizes)}")
        for s in self.sizes:
            if not _is_power_of_two(s):
                raise QuantizerError(f"codebook size {s} is not a power of two >= 2")
            if s > 0xFFFF:
                raise QuantizerError(f"codebook size {s} exceeds the 16-bit storage limit")
        if self.code_dim <= 0 or self.input_dim <= 0:
            raise QuantizerError("code_dim and input_dim must be positive")
        if self.code_dim > self.input_dim:
            raise QuantizerError("code_dim cannot exceed input_dim")

    @property
    def num_codebooks(self) -> int:
        return len(self.sizes)

    @property
    def bits_per_frame(self) -> int:
        return sum(int(math.log2(s)) for s in self.sizes)

    @classmethod
    def uniform(cls, num_codebooks: int = 8, size: int = 1024, **kw) -> "CodebookSpec":
        return cls(sizes=(size,) * num_codebooks, **kw)

    @classmethod
    def variable_ladder(cls, **kw) -> "CodebookSpec":
        """Variable-size 8-stage ladder with the same bit budget as 8x1024.

        Front-loads capacity on the early residual stages.
        """
        spec = cls(sizes=(4096, 4096, 256, 256, 1024, 1024, 1024, 1024), **kw)
        assert spec.bits_per_frame == 10 * spec.num_codebooks
        return spec


class QuantizeResult(NamedTuple):
    quantized: torch.Tensor
    tokens: torch.Tensor
    vq_loss: torch.Tensor
    commit_loss: torch.Tensor
    per_stage_residual_norm: list


class StageUtilization(NamedTuple):
    fraction: float
    perplexity: float


def _lowest_index_argmax(scores: torch.Tensor) -> torch.Tensor:
    """Argmax over the last dim with ties resolved to the lowest index."""
    top = scores.amax(dim=-1, keepdim=True)
    n = scores.shape[-1]
    candidates = torch.arange(n, device=scores.device).expand_as(scores)
    return torch.where(scores == top, candidates, n).amin(dim=-1)


class ResidualVectorQuantizer(nn.Module):
    """Cascade of factorized codebooks quantizing successive residuals.

    Per-stage input projections are initialized with orthonormal rows and the
    output projections with their transposes, so each stage starts as an
    orthogonal projector and residual refinement is contractive from step one.
    Codebooks are random unit-norm rows trained by gradient (no EMA).
    """

    def __init__(self, spec: CodebookSpec | None = None):
        super().__init__()
        self.spec = spec or CodebookSpec()
        self.in_projs = nn.ModuleList()
        self.out_projs = nn.ModuleList()
        self.codebooks = nn.ParameterList()
        for size in self.spec.sizes:
            in_proj = nn.Linear(self.spec.input_dim, self.spec.code_dim, bias=False)
            nn.init.orthogonal_(in_proj.weight)
            # selection happens through an argmax, so no gradient can reach
            # the input projection; it stays a fixed random orthonormal map
            in_proj.weight.requires_grad_(False)
            out_proj = nn.Linear(self.spec.code_dim, self.spec.input_dim, bias=False)
            with torch.no_grad():
                out_proj.weight.copy_(in_proj.weight.t())
            book = torch.randn(size, self.spec.code_dim)
            book = book / book.norm(dim=-1, keepdim=True)
            self.in_projs.append(in_proj)
            self.out_projs.append(out_proj)
            self.codebooks.append(nn.Parameter(book))

    def _check_stages(self, num_stages: int | None) -> int:
        n = self.spec.num_codebooks if num_stages is None else int(num_stages)
        if not 1 <= n <= self.spec.num_codebooks:
            raise QuantizerError(
                f"num_stages must be in 1..{self.spec.num_codebooks}, got {num_stages}"
            )
        return n

    def quantize(self, latent, num_stages: int | None = None) -> QuantizeResult:
        """Quantize a [input_dim x frames] (or batched) latent sequence."""
        x = latent.values if not torch.is_tensor(latent) and hasattr(latent, "values") else latent
        x = torch.as_tensor(x)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[1] != self.spec.input_dim:
            raise QuantizerError(
                f"latent must be [{self.spec.input_dim} x frames], got shape "
                f"{tuple(x.shape[1:] if x.dim() == 3 else x.shape)}"
            )
        if x.shape[-1] == 0:
            raise QuantizerError("latent has zero frames")
        if not torch.isfinite(x).all():
            # NaN scores make the argmax meaningless; fail loudly instead
            raise QuantizerError("latent contains non-finite values")
        n = self._check_stages(num_stages)

        z = x.transpose(1, 2)  # [B, M, C]
        residual = z
        acc = torch.zeros_like(z)
        token_list = []
        norms = []
        for i in range(n):
            proj = self.in_projs[i](residual)
            proj = F.normalize(proj, dim=-1)
            book = F.normalize(self.codebooks[i], dim=-1)
            scores = proj @ book.t()
            idx = _lowest_index_argmax(scores)
            raw = F.embedding(idx, self.codebooks[i])
            stage_out = self.out_projs[i](raw)
            residual = residual - stage_out
            acc = acc + stage_out
            token_list.append(idx)
            norms.append(residual.norm(dim=-1).mean().item())

        vq = (acc - z.detach()).abs().mean()
        commit = (z - acc.detach()).abs().mean()
        passthrough = acc.detach() + (z - z.detach())
        quantized = passthrough.transpose(1, 2)
        tokens = torch.stack(token_list, dim=1)  # [B, n, M]
        if squeeze:
            quantized = quantized.squeeze(0)
            tokens = tokens.squeeze(0)
        return QuantizeResult(
            quantized=quantized,
            tokens=tokens,
            vq_loss=vq,
            commit_loss=commit,
            per_stage_residual_norm=norms,
        )

    def forward(self, latent, num_stages: int | None = None) -> QuantizeResult:
        return self.quantize(latent, num_stages)

    def dequantize(self, tokens) -> torch.Tensor:
        """Rebuild the quantized latent from token indices.

        Accepts [num_stages x frames] or [batch x num_stages x frames]; out of
        range tokens raise (the corrupt-bitstream signal).
        """
        t = torch.as_tensor(tokens)
        if t.is_floating_point():
            raise QuantizerError("tokens must be integers")
        squeeze = t.dim() == 2
        if squeeze:
            t = t.unsqueeze(0)
        if t.dim() != 3:
            raise QuantizerError(f"tokens must be 2-D or 3-D, got shape {tuple(t.shape)}")
        n = t.shape[1]
        if n > self.spec.num_codebooks:
            raise QuantizerError(
                f"token matrix has {n} stages, model has {self.spec.num_codebooks}"
            )
        if n < 1 or t.shape[-1] == 0:
            raise QuantizerError("empty token matrix")
        param = self.codebooks[0]
        acc = torch.zeros(
            t.shape[0], t.shape[2], self.spec.input_dim,
            dtype=param.dtype, device=param.device,
        )
        for i in range(n):
            idx = t[:, i, :]
            size = self.spec.sizes[i]
            if (idx < 0).any() or (idx >= size).any():
                bad = idx[(idx < 0) | (idx >= size)][0].item()
                raise QuantizerError(f"token {bad} out of range for stage {i} (size {size})")
            raw = F.embedding(idx.long(), self.codebooks[i])
            acc = acc + self.out_projs[i](raw)
        out = acc.transpose(1, 2)
        return out.squeeze(0) if squeeze else out


def utilization_stats(token_history, sizes: Sequence[int]) -> list[StageUtilization]:
    """Per-stage codeword usage fraction and perplexity over collected tokens.

    token_history is one [stages x frames] matrix, a batched variant, or an
    iterable of either (all frames are pooled).
    """
    if torch.is_tensor(token_history):
        token_history = [token_history]
    per_stage = [[] for _ in sizes]
    for block in token_history:
        b = torch.as_tensor(block)
        if b.dim() == 2:
            b = b.unsqueeze(0)
        if b.dim() != 3 or b.shape[1] != len(sizes):
            raise QuantizerError(
                f"token block must have {len(sizes)} stages, got shape {tuple(b.shape)}"
            )
        for i in range(len(sizes)):
            per_stage[i].append(b[:, i, :].reshape(-1))
    stats = []
    for i, size in enumerate(sizes):
        if not per_stage[i]:
            raise QuantizerError("empty token history")
        idx = torch.cat(per_stage[i])
        if idx.numel() == 0:
            raise QuantizerError("empty token history")
        counts = torch.bincount(idx.long(), minlength=int(size)).double()
        fraction = (counts > 0).sum().item() / float(size)
        p = counts / counts.sum()
        nz = p[p > 0]
        perplexity = torch.exp(-(nz * nz.log()).sum()).item()
        stats.append(StageUtilization(fraction=fraction, perplexity=perplexity))
    return stats
