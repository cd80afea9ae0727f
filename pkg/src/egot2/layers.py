"""Transformer building blocks shared by backbones, fusion, and decoding.

Attention is written out explicitly (rather than using a fused library
kernel) because downstream analysis needs the per-head attention matrices;
``capture=True`` returns them alongside the outputs.
"""

from __future__ import annotations

import math

import torch
from torch import nn

__all__ = [
    "sinusoidal_encoding",
    "Attention",
    "EncoderBlock",
    "DecoderBlock",
    "causal_mask",
]


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos position code for fractional positions.

    Args:
        positions: (N,) float tensor of positions (any real scale).
        dim: embedding width; must be even.
    Returns:
        (N, dim) tensor.
    """
    if dim % 2 != 0:
        raise ValueError(f"encoding dim must be even, got {dim}")
    half = dim // 2
    freq = torch.exp(
        torch.arange(half, dtype=positions.dtype, device=positions.device)
        * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = positions[:, None] * freq[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def causal_mask(n: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """(n, n) additive mask: 0 on/below the diagonal, -inf above."""
    mask = torch.full((n, n), float("-inf"), device=device, dtype=dtype)
    return torch.triu(mask, diagonal=1)


class Attention(nn.Module):
    """Multi-head attention over batch-first (B, N, D) tensors.

    Self-attention when ``kv`` is the same tensor as ``q``; cross-attention
    otherwise (queries from the decoder stream, keys/values from encoder
    tokens).
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        q: torch.Tensor,
        kv: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
        capture: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(kv))
        vh = self._split(self.v_proj(kv))
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        attn = torch.softmax(scores, dim=-1)
        out = attn @ vh
        b, _, m, _ = out.shape
        out = out.transpose(1, 2).reshape(b, m, self.dim)
        return self.out_proj(out), (attn if capture else None)


class _FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, dim: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _FeedForward(dim, ff_mult)

    def forward(self, x: torch.Tensor, capture: bool = False):
        h = self.norm1(x)
        attn_out, weights = self.attn(h, h, capture=capture)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class DecoderBlock(nn.Module):
    """Pre-norm decoder block: masked self-attention, cross-attention, MLP."""

    def __init__(self, dim: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = _FeedForward(dim, ff_mult)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        self_mask: torch.Tensor | None = None,
        capture: bool = False,
    ):
        h = self.norm1(x)
        attn_out, self_w = self.self_attn(h, h, attn_mask=self_mask, capture=capture)
        x = x + attn_out
        attn_out, cross_w = self.cross_attn(self.norm2(x), memory, capture=capture)
        x = x + attn_out
        x = x + self.mlp(self.norm3(x))
        return x, self_w, cross_w
