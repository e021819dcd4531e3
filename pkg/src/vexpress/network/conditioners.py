"""Condition encoders: the keypoint-image guider and the audio token projector."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError, ShapeError
from .attention import Attention, FeedForward


class VKpsGuider(nn.Module):
    """Lightweight conv stack mapping control rasters to latent-shaped features.

    The final conv starts zero-initialized so conditioning is neutral at init;
    the output is added to the noisy latents before the U-Net.
    """

    def __init__(self, latent_channels: int, downscale: int, channels=(16, 32)):
        super().__init__()
        if downscale < 1 or downscale & (downscale - 1):
            raise ConfigurationError(f"downscale must be a power of two, got {downscale}")
        if downscale > 2 ** len(channels):
            raise ConfigurationError(
                f"downscale {downscale} needs more than {len(channels)} stride-2 convs"
            )
        self.downscale = downscale
        strides = []
        remaining = downscale
        for _ in channels:
            s = 2 if remaining > 1 else 1
            strides.append(s)
            remaining //= s
        layers: list[nn.Module] = []
        in_ch = 3
        for ch, s in zip(channels, strides):
            layers += [nn.Conv2d(in_ch, ch, 3, stride=s, padding=1), nn.SiLU()]
            in_ch = ch
        self.body = nn.Sequential(*layers)
        self.final = nn.Conv2d(in_ch, latent_channels, 3, padding=1)

    def forward(self, vkps_raster: torch.Tensor) -> torch.Tensor:
        # vkps_raster: (b, f, 3, H, W) -> (b, f, latent_channels, H/d, W/d)
        if vkps_raster.ndim != 5 or vkps_raster.shape[2] != 3:
            raise ShapeError(f"expected (b, f, 3, H, W), got {tuple(vkps_raster.shape)}")
        b, f, c, hh, ww = vkps_raster.shape
        if hh % self.downscale or ww % self.downscale:
            raise ConfigurationError(
                f"raster dims ({hh}, {ww}) not divisible by downscale {self.downscale}"
            )
        h = self.final(self.body(vkps_raster.reshape(b * f, c, hh, ww)))
        return h.reshape(b, f, *h.shape[1:])


class AudioProjection(nn.Module):
    """Query-token cross-attention (Q-Former style) over per-frame audio context.

    ``num_queries`` learned tokens attend to the 2(2k+1) context embeddings of
    each frame; the resulting tokens feed the denoiser's audio attention as
    key/value.
    """

    def __init__(
        self,
        audio_dim: int,
        token_dim: int,
        num_queries: int = 4,
        depth: int = 2,
        head_dim: int = 16,
    ):
        super().__init__()
        if num_queries < 1:
            raise ConfigurationError(f"num_queries must be >= 1, got {num_queries}")
        self.query_tokens = nn.Parameter(torch.zeros(num_queries, token_dim))
        self.cross_attns = nn.ModuleList()
        self.cross_norms = nn.ModuleList()
        self.ffs = nn.ModuleList()
        self.ff_norms = nn.ModuleList()
        for _ in range(depth):
            self.cross_norms.append(nn.LayerNorm(token_dim))
            self.cross_attns.append(Attention(token_dim, kv_dim=audio_dim, head_dim=head_dim))
            self.ff_norms.append(nn.LayerNorm(token_dim))
            self.ffs.append(FeedForward(token_dim))

    def forward(self, context: torch.Tensor, return_weights: bool = False):
        # context: (b, f, n_ctx, d_a) -> tokens (b, f, q, token_dim)
        if context.ndim != 4:
            raise ShapeError(f"expected (b, f, n_ctx, d_a), got {tuple(context.shape)}")
        b, f, n_ctx, d_a = context.shape
        ctx = context.reshape(b * f, n_ctx, d_a)
        x = self.query_tokens[None].expand(b * f, *self.query_tokens.shape)
        all_weights = []
        for norm_c, attn, norm_f, ff in zip(
            self.cross_norms, self.cross_attns, self.ff_norms, self.ffs
        ):
            if return_weights:
                delta, w = attn(norm_c(x), ctx, return_weights=True)
                all_weights.append(w)
            else:
                delta = attn(norm_c(x), ctx)
            x = x + delta
            x = x + ff(norm_f(x))
        tokens = x.reshape(b, f, *x.shape[1:])
        if return_weights:
            return tokens, all_weights
        return tokens
