"""Model container, deterministic initialization, and parameter-group gating."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..errors import ConfigurationError
from .conditioners import AudioProjection, VKpsGuider
from .unet import DenoisingUNet, ReferenceNet

PARAMETER_GROUP_NAMES = (
    "reference_net",
    "vkps_guider",
    "unet_core",
    "audio_projection",
    "audio_attention",
    "motion_attention",
)


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_head_dim: int = 16
    num_audio_query_tokens: int = 4
    audio_dim: int = 32
    context_radius: int = 2
    latent_channels: int = 4
    latent_downscale: int = 2
    lambda_ref: float = 1.0
    lambda_audio: float = 1.0
    audio_token_dim: int = 32
    qformer_depth: int = 2
    guider_channels: tuple[int, ...] = (16, 32)
    motion_pos_encoding: bool = False

    def __post_init__(self):
        if self.num_audio_query_tokens < 1:
            raise ConfigurationError("num_audio_query_tokens must be >= 1")
        for name in ("lambda_ref", "lambda_audio"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.attention_head_dim:
                raise ConfigurationError(
                    f"channels {self.base_channels * m} not divisible by "
                    f"head_dim {self.attention_head_dim}"
                )
        if self.audio_token_dim % self.attention_head_dim:
            raise ConfigurationError("audio_token_dim must be divisible by head_dim")
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "guider_channels", tuple(self.guider_channels))


class VExpressModel(nn.Module):
    """All learnable components plus the grouping used by staged training."""

    def __init__(self, cfg: ModelConfig, max_timestep: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.denoiser = DenoisingUNet(cfg, max_timestep)
        self.reference_net = ReferenceNet(cfg)
        self.vkps_guider = VKpsGuider(cfg.latent_channels, cfg.latent_downscale, cfg.guider_channels)
        self.audio_projection = AudioProjection(
            cfg.audio_dim,
            cfg.audio_token_dim,
            cfg.num_audio_query_tokens,
            cfg.qformer_depth,
            cfg.attention_head_dim,
        )

    @staticmethod
    def group_of(param_name: str) -> str:
        """Map a parameter's dotted name to its training group."""
        if param_name.startswith("reference_net."):
            return "reference_net"
        if param_name.startswith("vkps_guider."):
            return "vkps_guider"
        if param_name.startswith("audio_projection."):
            return "audio_projection"
        if ".audio_attn." in param_name or ".norm_audio." in param_name:
            return "audio_attention"
        if ".motion." in param_name:
            return "motion_attention"
        return "unet_core"

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            name: [] for name in PARAMETER_GROUP_NAMES
        }
        for name, param in self.named_parameters():
            groups[self.group_of(name)].append((name, param))
        return groups

    def zero_init_sum(self) -> float:
        """Sum of |to_out| over audio and motion attention layers (0 at init)."""
        total = 0.0
        for name, param in self.named_parameters():
            group = self.group_of(name)
            if group in ("audio_attention", "motion_attention") and "to_out" in name:
                total += param.abs().sum().item()
        return total


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 2:  # linear (out, in)
        return shape[1]
    if len(shape) == 4:  # conv (out, in, kh, kw)
        return shape[1] * shape[2] * shape[3]
    return shape[-1]


def init_model(cfg: ModelConfig, seed: int, max_timestep: int | None = None) -> VExpressModel:
    """Build the model with seeded deterministic weights.

    Weight matrices draw from N(0, 1/fan_in), biases and norm offsets start at
    zero, norm gains at one. The to-out projections of every audio and motion
    attention layer and the guider's final conv are zeroed exactly, so those
    branches contribute nothing until trained.
    """
    model = VExpressModel(cfg, max_timestep)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith(".bias") or "norm" in name.split(".")[-2]:
                if name.endswith(".weight"):  # norm gain
                    param.fill_(1.0)
                else:
                    param.zero_()
                continue
            if name == "audio_projection.query_tokens":
                values = rng.standard_normal(tuple(param.shape)) * 0.02
            else:
                std = 1.0 / math.sqrt(_fan_in(tuple(param.shape)))
                values = rng.standard_normal(tuple(param.shape)) * std
            param.copy_(torch.from_numpy(values).to(param.dtype))
        # zero-initialized branch outputs
        for name, param in model.named_parameters():
            group = VExpressModel.group_of(name)
            if group in ("audio_attention", "motion_attention") and "to_out" in name:
                param.zero_()
        model.vkps_guider.final.weight.zero_()
        model.vkps_guider.final.bias.zero_()
    return model
