"""U-Net building blocks: residual convs, resampling, and transformer blocks.

The denoiser's transformer block stacks four attention layers: spatial
self-attention, reference cross-attention, audio cross-attention (all three
applied per frame), then temporal self-attention across frames at fixed
spatial locations, and finally a feed-forward. Reference and audio residual
branches are scaled by their condition weights before addition.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError
from .attention import Attention, FeedForward, sinusoidal_embedding


def norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_channels) if temb_dim else None
        self.norm2 = nn.GroupNorm(norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, C, H, W); temb: (B, temb_dim)
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class MotionAttention(nn.Module):
    """Temporal self-attention: tokens are frames, batched over spatial cells."""

    def __init__(self, dim: int, head_dim: int, pos_encoding: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, head_dim=head_dim)
        self.pos_encoding = pos_encoding
        self.dim = dim

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        # h: (b, f, c, hh, ww) -> attention over f at each (b, y, x)
        b, f, c, hh, ww = h.shape
        seq = h.permute(0, 3, 4, 1, 2).reshape(b * hh * ww, f, c)
        x = self.norm(seq)
        if self.pos_encoding:
            pe = sinusoidal_embedding(torch.arange(f, device=h.device), self.dim)
            x = x + pe.to(x.dtype)[None]
        out = self.attn(x)
        return out.reshape(b, hh, ww, f, c).permute(0, 3, 4, 1, 2)


class TransformerBlock(nn.Module):
    """Four-attention transformer block of the denoiser."""

    def __init__(
        self,
        dim: int,
        audio_token_dim: int,
        head_dim: int = 16,
        motion_pos_encoding: bool = False,
    ):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, head_dim=head_dim)
        self.norm_ref = nn.LayerNorm(dim)
        self.ref_attn = Attention(dim, head_dim=head_dim)
        self.norm_audio = nn.LayerNorm(dim)
        self.audio_attn = Attention(dim, kv_dim=audio_token_dim, head_dim=head_dim)
        self.motion = MotionAttention(dim, head_dim, motion_pos_encoding)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(
        self,
        h: torch.Tensor,
        ref_tokens: torch.Tensor | None,
        audio_tokens: torch.Tensor | None,
        lambda_ref: float = 1.0,
        lambda_audio: float = 1.0,
        ref_zero: torch.Tensor | None = None,
        audio_zero: torch.Tensor | None = None,
        ablate: frozenset = frozenset(),
    ) -> torch.Tensor:
        # h: (b, f, c, hh, ww); ref_tokens: (b, M, c); audio_tokens: (b, f, q, d_a)
        b, f, c, hh, ww = h.shape
        n = hh * ww
        x = h.permute(0, 1, 3, 4, 2).reshape(b * f, n, c)

        x = x + self.self_attn(self.norm_self(x))

        if "reference" not in ablate and ref_tokens is not None:
            if ref_tokens.shape[-1] != c:
                raise ShapeError(
                    f"reference tokens dim {ref_tokens.shape[-1]} != block dim {c}"
                )
            kv = ref_tokens[:, None].expand(b, f, *ref_tokens.shape[1:]).reshape(b * f, -1, c)
            zero = None if ref_zero is None else ref_zero.reshape(b * f)
            x = x + lambda_ref * self.ref_attn(self.norm_ref(x), kv, zero)

        if "audio" not in ablate and audio_tokens is not None:
            kv = audio_tokens.reshape(b * f, *audio_tokens.shape[2:])
            zero = None if audio_zero is None else audio_zero.reshape(b * f)
            x = x + lambda_audio * self.audio_attn(self.norm_audio(x), kv, zero)

        h = x.reshape(b, f, hh, ww, c).permute(0, 1, 4, 2, 3)

        if "motion" not in ablate:
            h = h + self.motion(h)

        x = h.permute(0, 1, 3, 4, 2).reshape(b * f, n, c)
        x = x + self.ff(self.norm_ff(x))
        return x.reshape(b, f, hh, ww, c).permute(0, 1, 4, 2, 3)


class ReferenceTransformerBlock(nn.Module):
    """Reference-encoder block: self-attention and feed-forward only.

    Returns both the block output and the post-self-attention tokens that feed
    the denoiser's reference cross-attention.
    """

    def __init__(self, dim: int, head_dim: int = 16):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, head_dim=head_dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # h: (B, C, H, W) single frame per entry
        B, c, hh, ww = h.shape
        x = h.permute(0, 2, 3, 1).reshape(B, hh * ww, c)
        x = x + self.self_attn(self.norm_self(x))
        tokens = x
        x = x + self.ff(self.norm_ff(x))
        return x.reshape(B, hh, ww, c).permute(0, 3, 1, 2), tokens


class TimestepEmbedding(nn.Module):
    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(
            nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.base_dim).to(dtype))
