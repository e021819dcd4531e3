"""Multi-head scaled dot-product attention and the transformer feed-forward."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError, ShapeError


class Attention(nn.Module):
    """Softmax attention with optional external key/value source.

    Projections carry no bias, so zeroed key/value rows yield an exactly zero
    output: the softmax distributes weight over zero values and ``to_out`` maps
    zero to zero. That makes per-frame condition masking equal to deleting the
    branch.
    """

    def __init__(self, query_dim: int, kv_dim: int | None = None, head_dim: int = 16):
        super().__init__()
        if query_dim % head_dim != 0:
            raise ConfigurationError(f"query_dim {query_dim} not divisible by head_dim {head_dim}")
        kv_dim = query_dim if kv_dim is None else kv_dim
        self.heads = query_dim // head_dim
        self.head_dim = head_dim
        self.scale = head_dim**-0.5
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_v = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim, bias=False)

    def forward(
        self,
        x: torch.Tensor,
        kv: torch.Tensor | None = None,
        zero_kv_rows: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        # x: (B, N, query_dim); kv: (B, M, kv_dim); zero_kv_rows: (B,) bool
        if x.ndim != 3:
            raise ShapeError(f"expected (B, N, d) tokens, got {tuple(x.shape)}")
        source = x if kv is None else kv
        if source.shape[0] != x.shape[0]:
            raise ShapeError(
                f"kv batch {source.shape[0]} does not match query batch {x.shape[0]}"
            )
        q = self.to_q(x)
        k = self.to_k(source)
        v = self.to_v(source)
        if zero_kv_rows is not None:
            keep = (~zero_kv_rows).to(k.dtype).reshape(-1, 1, 1)
            k = k * keep
            v = v * keep

        B, N, _ = q.shape
        M = k.shape[1]
        q = q.reshape(B, N, self.heads, self.head_dim).transpose(1, 2)  # (B, H, N, hd)
        k = k.reshape(B, M, self.heads, self.head_dim).transpose(1, 2)
        v = v.reshape(B, M, self.heads, self.head_dim).transpose(1, 2)

        weights = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)  # (B, H, N, M)
        out = (weights @ v).transpose(1, 2).reshape(B, N, self.heads * self.head_dim)
        out = self.to_out(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Position-wise MLP with 4x expansion and GELU."""

    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, mult * dim),
            nn.GELU(),
            nn.Linear(mult * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10_000.0):
    """Standard sinusoidal embedding of integer positions; (N,) -> (N, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -torch.log(torch.tensor(max_period)) * torch.arange(half, dtype=torch.float64) / half
    ).to(positions.device)
    args = positions.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
