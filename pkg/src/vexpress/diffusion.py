"""Forward noising process, weighted denoising loss, DDIM sampling, latent codec."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, InvalidInputError, ShapeError
from .geometry import FaceKeypoints


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process parameters: per-step beta and cumulative alpha-bar."""

    T: int
    beta: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T,), strictly decreasing in (0, 1)

    def alpha_bar_at(self, t: int | torch.Tensor) -> torch.Tensor:
        """alpha_bar for 1-based timestep(s); t=0 maps to 1 (clean data)."""
        ab = torch.from_numpy(np.concatenate([[1.0], self.alpha_bar]))
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t > self.T):
            raise InvalidInputError(f"timestep out of range [0, {self.T}]")
        return ab[t]


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    """Build a noise schedule; "scaled_linear" interpolates beta in sqrt space."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        beta = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, alpha_bar)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noisy latent at step t: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps.

    ``t`` is 1-based and may be a scalar or a per-sample batch of indices.
    """
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > sched.T):
        raise InvalidInputError(f"t must lie in [1, {sched.T}]")
    ab = sched.alpha_bar_at(t).to(z0.dtype)
    if ab.ndim > 0:  # per-sample t broadcast over trailing dims
        ab = ab.reshape(-1, *([1] * (z0.ndim - 1)))
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class MouthMask:
    """Binary latent-resolution mask marking the mouth region of each frame."""

    mask: torch.Tensor  # (f, 1, h, w) of {0, 1}


def _center_rect_pixels(lo: float, hi: float, limit: int) -> tuple[int, int]:
    # pixels whose centers fall inside [lo, hi)
    first = max(0, math.ceil(lo - 0.5))
    last = min(limit, math.ceil(hi - 0.5))
    return first, last


def mouth_mask_from_kps(
    kps: FaceKeypoints, latent_dims: tuple[int, int], downscale: int = 1
) -> MouthMask:
    """Rectangle below the nose sized by the inter-ocular distance (IOD).

    Centered at nose + (0, 0.6 * IOD) in pixel space with width IOD and height
    0.5 * IOD, then mapped into the (h, w) latent grid via ``downscale``.
    Coincident eyes give an empty mask.
    """
    h, w = latent_dims
    iod = kps.interocular_distance()
    mask = torch.zeros((1, h, w))
    if iod > 0:
        cx = kps.nose[0] / downscale
        cy = (kps.nose[1] + 0.6 * iod) / downscale
        half_w = 0.5 * iod / downscale
        half_h = 0.25 * iod / downscale
        x0, x1 = _center_rect_pixels(cx - half_w, cx + half_w, w)
        y0, y1 = _center_rect_pixels(cy - half_h, cy + half_h, h)
        if x0 < x1 and y0 < y1:
            mask[0, y0:y1, x0:x1] = 1.0
    return MouthMask(mask.unsqueeze(0))


def mouth_masks_for_frames(
    frames_kps: Sequence[FaceKeypoints], latent_dims: tuple[int, int], downscale: int = 1
) -> torch.Tensor:
    """Stack per-frame mouth masks into an (f, 1, h, w) tensor."""
    return torch.cat([mouth_mask_from_kps(k, latent_dims, downscale).mask for k in frames_kps])


def denoising_loss(
    eps_pred: torch.Tensor,
    eps: torch.Tensor,
    mask: torch.Tensor | MouthMask | None = None,
    w_mouth: float = 100.0,
) -> torch.Tensor:
    """Weighted mean squared error between predicted and true noise.

    Elements inside the mouth mask weigh ``w_mouth``, the rest weigh 1; the sum
    is normalized by the total weight so the magnitude stays comparable across
    mask sizes. ``mask`` broadcasts over batch and channel dims.
    """
    if eps_pred.shape != eps.shape:
        raise ShapeError(f"eps_pred {tuple(eps_pred.shape)} and eps {tuple(eps.shape)} differ")
    sq = (eps_pred - eps) ** 2
    if mask is None:
        return sq.mean()
    m = mask.mask if isinstance(mask, MouthMask) else mask
    weights = (1.0 + (w_mouth - 1.0) * m).to(sq.dtype).expand_as(sq)
    return (weights * sq).sum() / weights.sum()


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly strided descending 1-based timesteps ending at the schedule floor."""
    if num_steps < 1:
        raise InvalidInputError(f"num_steps must be >= 1, got {num_steps}")
    if num_steps > T:
        raise InvalidInputError(f"num_steps {num_steps} exceeds T {T}")
    stride = T // num_steps
    return [T - i * stride for i in range(num_steps)]


def ddim_sample(
    model_fn: Callable[[torch.Tensor, int], torch.Tensor],
    z_T: torch.Tensor,
    sched: NoiseSchedule,
    num_steps: int,
) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) over an evenly strided timestep subset.

    ``model_fn(z_t, t)`` must return the predicted noise at 1-based step t.
    """
    steps = ddim_timesteps(sched.T, num_steps)
    z = z_T
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab_t = float(sched.alpha_bar_at(t))
        ab_prev = float(sched.alpha_bar_at(t_prev))
        eps_pred = model_fn(z, t)
        z0_hat = (z - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
        z = math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_pred
    return z


class LatentCodec:
    """Maps images in [0, 1] to diffusion latents and back.

    identity mode is exactly invertible: the value range is affinely mapped to
    [-1, 1] and, when ``downscale_factor`` > 1, pixels are rearranged
    space-to-depth (channels absorb downscale^2 blocks losslessly).
    tiny_autoencoder mode wraps a learned 2x conv autoencoder (see
    :class:`TinyAutoencoder`); it must be trained before use.
    """

    def __init__(self, mode: str = "identity", downscale_factor: int = 1, autoencoder=None):
        if mode not in ("identity", "tiny_autoencoder"):
            raise ConfigurationError(f"unknown codec mode {mode!r}")
        if downscale_factor < 1:
            raise ConfigurationError(f"downscale_factor must be >= 1, got {downscale_factor}")
        if mode == "tiny_autoencoder":
            if autoencoder is None:
                raise ConfigurationError("tiny_autoencoder mode requires an autoencoder module")
            if downscale_factor != autoencoder.downscale_factor:
                raise ConfigurationError("downscale_factor must match the autoencoder's")
        self.mode = mode
        self.downscale_factor = downscale_factor
        self.autoencoder = autoencoder

    def latent_channels(self, image_channels: int = 3) -> int:
        if self.mode == "identity":
            return image_channels * self.downscale_factor**2
        return self.autoencoder.latent_channels

    def _check_divisible(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2], x.shape[-1]
        if h % self.downscale_factor or w % self.downscale_factor:
            raise ConfigurationError(
                f"spatial dims ({h}, {w}) not divisible by downscale {self.downscale_factor}"
            )

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(..., c, H, W) in [0, 1] -> (..., c*d*d, H/d, W/d) latent.

        Identity mode computes the range map in float64 (and returns float64)
        so the affine step never rounds; space-to-depth is a pure permutation.
        """
        self._check_divisible(image)
        if self.mode == "tiny_autoencoder":
            return self.autoencoder.encode(image * 2.0 - 1.0)
        x = image.to(torch.float64) * 2.0 - 1.0
        d = self.downscale_factor
        if d == 1:
            return x
        *lead, c, h, w = x.shape
        x = x.reshape(*lead, c, h // d, d, w // d, d)
        x = x.movedim(-3, -4).movedim(-1, -3)  # (..., c, d, d, h/d, w/d)
        return x.reshape(*lead, c * d * d, h // d, w // d)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Inverse of encode; identity mode round-trips exactly."""
        if self.mode == "tiny_autoencoder":
            return (self.autoencoder.decode(latent) + 1.0) / 2.0
        d = self.downscale_factor
        x = latent.to(torch.float64)
        if d > 1:
            *lead, cd, h, w = x.shape
            c = cd // (d * d)
            x = x.reshape(*lead, c, d, d, h, w)
            x = x.movedim(-3, -1).movedim(-4, -3)  # (..., c, h, d, w, d)
            x = x.reshape(*lead, c, h * d, w * d)
        return (x + 1.0) / 2.0


class TinyAutoencoder(torch.nn.Module):
    """Small learned 2x-downscale conv autoencoder trained with plain MSE."""

    downscale_factor = 2

    def __init__(self, image_channels: int = 3, latent_channels: int = 4, hidden: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = torch.nn.Sequential(
            torch.nn.Conv2d(image_channels, hidden, 3, stride=2, padding=1),
            torch.nn.SiLU(),
            torch.nn.Conv2d(hidden, hidden, 3, padding=1),
            torch.nn.SiLU(),
            torch.nn.Conv2d(hidden, latent_channels, 1),
        )
        self.decoder = torch.nn.Sequential(
            torch.nn.Conv2d(latent_channels, hidden, 3, padding=1),
            torch.nn.SiLU(),
            torch.nn.Upsample(scale_factor=2, mode="nearest"),
            torch.nn.Conv2d(hidden, hidden, 3, padding=1),
            torch.nn.SiLU(),
            torch.nn.Conv2d(hidden, image_channels, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-3]
        flat = x.reshape(-1, *x.shape[-3:])
        z = self.encoder(flat)
        return z.reshape(*lead, *z.shape[-3:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-3]
        flat = z.reshape(-1, *z.shape[-3:])
        x = self.decoder(flat)
        return x.reshape(*lead, *x.shape[-3:])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))
