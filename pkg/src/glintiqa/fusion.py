"""Fusion blocks: channel-wise self-attention (CWSA), the spatial interaction
enhancement module (SIEM), the progressive integration loop and the scoring
head.

Token grids are ``(B, N, C)`` tensors. Unbatched ``(N, C)`` inputs are accepted
by the attention and head modules as well.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AlignmentError, DimensionError, NumericError

_MOD = "fusion_core"


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}", module=_MOD)


class CWSA(nn.Module):
    """Self-attention across channels.

    The grid is transposed so that every channel becomes a token whose feature
    vector is its spatial profile (length ``num_tokens``). Q/K/V are linear maps
    over that profile; the attention matrix is ``(C, C)`` and scaled by
    ``1/sqrt(scale_dim)``. The output keeps the input shape (residual form).
    """

    def __init__(self, num_tokens: int, scale_dim: int):
        super().__init__()
        self.num_tokens = num_tokens
        self.scale_dim = scale_dim
        self.q = nn.Linear(num_tokens, num_tokens)
        self.k = nn.Linear(num_tokens, num_tokens)
        self.v = nn.Linear(num_tokens, num_tokens)

    def attention(self, z: torch.Tensor) -> torch.Tensor:
        zt = z.transpose(-1, -2)
        logits = self.q(zt) @ self.k(zt).transpose(-1, -2) / math.sqrt(self.scale_dim)
        return logits.softmax(dim=-1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2] != self.num_tokens:
            raise DimensionError(
                f"CWSA was built for {self.num_tokens} tokens, got {z.shape[-2]}", module=_MOD
            )
        _check_finite(z, "CWSA input")
        zt = z.transpose(-1, -2)
        out = self.attention(z) @ self.v(zt) + zt
        return out.transpose(-1, -2)


def tokens_to_map(z: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """(B, N, C) tokens -> (B, C, h, w) feature map."""
    h, w = grid
    b, n, c = z.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot be laid out on a {h}x{w} grid", module=_MOD)
    return z.transpose(1, 2).reshape(b, c, h, w)


def map_to_tokens(m: torch.Tensor) -> torch.Tensor:
    return m.flatten(2).transpose(1, 2)


class SIEM(nn.Module):
    """Reshape tokens to a 2-D map, apply a 3x3 stride-1 convolution that halves
    the channel count (2d -> d), flatten back to tokens."""

    def __init__(self, dim: int, padding: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(2 * dim, dim, kernel_size=3, stride=1, padding=padding)

    def forward(self, z: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        return map_to_tokens(self.conv(tokens_to_map(z, grid)))


class FusionStage(nn.Module):
    def __init__(self, num_tokens: int, dim: int, siem_padding: int = 1):
        super().__init__()
        self.cwsa = CWSA(num_tokens, dim)
        self.siem = SIEM(dim, padding=siem_padding)

    def forward(self, f: torch.Tensor, injected: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        if f.shape[-2] != injected.shape[-2]:
            raise AlignmentError(
                f"token count mismatch: fused state has {f.shape[-2]}, injected grid has "
                f"{injected.shape[-2]}",
                module=_MOD,
            )
        z = torch.cat([f, injected], dim=-1)
        return self.siem(self.cwsa(z), grid)


def progressive_integrate(
    seed: torch.Tensor,
    injected: Sequence[torch.Tensor],
    stages: Sequence[FusionStage],
    grid: tuple[int, int],
) -> torch.Tensor:
    """Fold ``injected`` grids into ``seed`` one stage at a time.

    f_1 = seed; f_{i+1} = SIEM(CWSA(f_i ++ injected_i)).
    """
    if len(injected) != len(stages) or not stages:
        raise AlignmentError(
            f"need one fusion stage per injected grid (got {len(injected)} grids, "
            f"{len(stages)} stages)",
            module=_MOD,
        )
    f = seed
    for grid_i, stage in zip(injected, stages):
        f = stage(f, grid_i, grid)
    return f


class StreamFusion(nn.Module):
    """Concatenate several aligned grids, reweight channels with CWSA and
    project back to ``dim``. Used to collapse the convolutional stage grids
    into the local feature f_l."""

    def __init__(self, n_streams: int, num_tokens: int, dim: int):
        super().__init__()
        self.n_streams = n_streams
        self.cwsa = CWSA(num_tokens, dim)
        self.proj = nn.Linear(n_streams * dim, dim)

    def forward(self, grids: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(grids) != self.n_streams:
            raise AlignmentError(f"expected {self.n_streams} grids, got {len(grids)}", module=_MOD)
        return self.proj(self.cwsa(torch.cat(list(grids), dim=-1)))


class PredictionHead(nn.Module):
    def __init__(self, dim: int, dropout: float = 0.1):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(dim, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _check_finite(f, "head input")
        pooled = f.mean(dim=-2)
        return self.fc2(self.drop(F.gelu(self.fc1(pooled)))).squeeze(-1)
