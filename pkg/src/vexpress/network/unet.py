"""The denoising U-Net and its reference-image twin."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import InvalidInputError, ShapeError
from .blocks import (
    Downsample,
    ReferenceTransformerBlock,
    ResBlock,
    TimestepEmbedding,
    TransformerBlock,
    Upsample,
    norm_groups,
)


@dataclass
class ReferenceFeatures:
    """Per-block key/value token arrays produced by the reference encoder."""

    per_block: list[torch.Tensor]  # block l: (b, tokens_l, dim_l)

    def zeros_like(self) -> "ReferenceFeatures":
        return ReferenceFeatures([torch.zeros_like(t) for t in self.per_block])


class DenoisingUNet(nn.Module):
    """Two-sided U-Net with one transformer block per level per side.

    Level channels follow ``base_channels * channel_multipliers``. Attention
    blocks run in execution order down(0..L-1), up(L-1..0); reference features
    must be supplied in the same order.
    """

    def __init__(self, cfg, max_timestep: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.max_timestep = max_timestep
        cs = [cfg.base_channels * m for m in cfg.channel_multipliers]
        temb_dim = 4 * cfg.base_channels
        self.time_embed = TimestepEmbedding(cfg.base_channels, temb_dim)
        self.conv_in = nn.Conv2d(cfg.latent_channels, cs[0], 3, padding=1)

        def tblock(dim):
            return TransformerBlock(
                dim, cfg.audio_token_dim, cfg.attention_head_dim, cfg.motion_pos_encoding
            )

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for level, ch in enumerate(cs):
            in_ch = cs[0] if level == 0 else cs[level - 1]
            self.down_res.append(ResBlock(in_ch, ch, temb_dim))
            self.down_attn.append(tblock(ch))
            self.downsamplers.append(Downsample(ch) if level < len(cs) - 1 else nn.Identity())

        self.mid_res1 = ResBlock(cs[-1], cs[-1], temb_dim)
        self.mid_res2 = ResBlock(cs[-1], cs[-1], temb_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(len(cs))):
            ch = cs[level]
            self.up_res.append(ResBlock(2 * ch, ch, temb_dim))
            self.up_attn.append(tblock(ch))
            self.upsamplers.append(
                Upsample(ch, cs[level - 1]) if level > 0 else nn.Identity()
            )

        self.norm_out = nn.GroupNorm(norm_groups(cs[0]), cs[0])
        self.conv_out = nn.Conv2d(cs[0], cfg.latent_channels, 3, padding=1)

    @property
    def num_transformer_blocks(self) -> int:
        return len(self.down_attn) + len(self.up_attn)

    def forward(
        self,
        z_t: torch.Tensor,
        t,
        ref_features: ReferenceFeatures | None = None,
        vkps_feat: torch.Tensor | None = None,
        audio_tokens: torch.Tensor | None = None,
        *,
        lambda_ref: float | None = None,
        lambda_audio: float | None = None,
        ref_zero: torch.Tensor | None = None,
        audio_zero: torch.Tensor | None = None,
        ablate: frozenset = frozenset(),
    ) -> torch.Tensor:
        # z_t: (b, f, c, h, w); t: scalar or (b,) 1-based timesteps
        if z_t.ndim != 5:
            raise ShapeError(f"expected (b, f, c, h, w), got {tuple(z_t.shape)}")
        b, f, c, hh, ww = z_t.shape
        t = torch.as_tensor(t, dtype=torch.long, device=z_t.device)
        if t.ndim == 0:
            t = t.expand(b)
        if torch.any(t < 1):
            raise InvalidInputError("timestep must be >= 1")
        if self.max_timestep is not None and torch.any(t > self.max_timestep):
            raise InvalidInputError(f"timestep exceeds T={self.max_timestep}")
        lam_ref = self.cfg.lambda_ref if lambda_ref is None else lambda_ref
        lam_audio = self.cfg.lambda_audio if lambda_audio is None else lambda_audio
        ref_list = None if ref_features is None else ref_features.per_block
        if ref_list is not None and len(ref_list) != self.num_transformer_blocks:
            raise ShapeError(
                f"got {len(ref_list)} reference blocks, need {self.num_transformer_blocks}"
            )

        x = z_t if vkps_feat is None else z_t + vkps_feat
        temb = self.time_embed(t)  # (b, temb_dim)
        temb_bf = temb.repeat_interleave(f, dim=0)

        def fold(h5):
            return h5.reshape(b * f, *h5.shape[2:])

        def unfold(h4):
            return h4.reshape(b, f, *h4.shape[1:])

        block_idx = 0

        def run_attn(tb, h5):
            nonlocal block_idx
            ref_tokens = None if ref_list is None else ref_list[block_idx]
            block_idx += 1
            return tb(
                h5,
                ref_tokens,
                audio_tokens,
                lam_ref,
                lam_audio,
                ref_zero,
                audio_zero,
                ablate,
            )

        h = fold(x)
        h = self.conv_in(h)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsamplers):
            h = res(h, temb_bf)
            h = fold(run_attn(attn, unfold(h)))
            skips.append(h)
            h = down(h)

        h = self.mid_res1(h, temb_bf)
        h = self.mid_res2(h, temb_bf)

        for res, attn, up in zip(self.up_res, self.up_attn, self.upsamplers):
            h = torch.cat([h, skips.pop()], dim=1)
            h = res(h, temb_bf)
            h = fold(run_attn(attn, unfold(h)))
            h = up(h)

        h = self.conv_out(F.silu(self.norm_out(h)))
        return unfold(h)


class ReferenceNet(nn.Module):
    """Structural twin of the denoiser that encodes the clean reference latent.

    Runs once per generation on the un-noised reference; each transformer
    block's post-self-attention tokens become the key/value source for the
    matching denoiser block.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        cs = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.conv_in = nn.Conv2d(cfg.latent_channels, cs[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for level, ch in enumerate(cs):
            in_ch = cs[0] if level == 0 else cs[level - 1]
            self.down_res.append(ResBlock(in_ch, ch))
            self.down_attn.append(ReferenceTransformerBlock(ch, cfg.attention_head_dim))
            self.downsamplers.append(Downsample(ch) if level < len(cs) - 1 else nn.Identity())

        self.mid_res1 = ResBlock(cs[-1], cs[-1])
        self.mid_res2 = ResBlock(cs[-1], cs[-1])

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(len(cs))):
            ch = cs[level]
            self.up_res.append(ResBlock(2 * ch, ch))
            self.up_attn.append(ReferenceTransformerBlock(ch, cfg.attention_head_dim))
            self.upsamplers.append(
                Upsample(ch, cs[level - 1]) if level > 0 else nn.Identity()
            )

    def forward(self, ref_latent: torch.Tensor) -> ReferenceFeatures:
        # ref_latent: (b, c, h, w), already clean (no noise is ever added)
        if ref_latent.ndim != 4:
            raise ShapeError(f"expected (b, c, h, w), got {tuple(ref_latent.shape)}")
        features: list[torch.Tensor] = []
        h = self.conv_in(ref_latent)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsamplers):
            h = res(h)
            h, tokens = attn(h)
            features.append(tokens)
            skips.append(h)
            h = down(h)
        h = self.mid_res1(h)
        h = self.mid_res2(h)
        for res, attn, up in zip(self.up_res, self.up_attn, self.upsamplers):
            h = torch.cat([h, skips.pop()], dim=1)
            h = res(h)
            h, tokens = attn(h)
            features.append(tokens)
            h = up(h)
        return ReferenceFeatures(features)
