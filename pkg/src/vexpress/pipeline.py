"""End-to-end inference: segmented multi-clip sampling with overlap averaging.

Long outputs are generated as fixed-length segments that share reference
features; overlapping frames are averaged in latent space before decoding, the
only coupling between segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .audio import align_waveform_to_frames, stub_encode
from .diffusion import LatentCodec, NoiseSchedule, ddim_sample
from .errors import InvalidInputError
from .geometry import FaceKeypoints, VKpsSequence, interpolate_sequence, render_sequence, retarget_sequence
from .network import VExpressModel
from .training import derive_seed

SAMPLE_RATE_HZ = 16_000


@dataclass(frozen=True)
class SegmentPlan:
    segment_length: int
    overlap: int
    starts: tuple[int, ...]


def compute_frame_count(duration_s: float, fps: float, rounding: str = "round") -> int:
    """Number of frames for a clip of ``duration_s`` seconds at ``fps``.

    "round" rounds half away from zero; "floor" truncates.
    """
    if duration_s <= 0 or fps <= 0:
        raise InvalidInputError(f"duration and fps must be positive, got ({duration_s}, {fps})")
    x = duration_s * fps
    if rounding == "round":
        n = int(math.floor(x + 0.5))
    elif rounding == "floor":
        n = int(math.floor(x))
    else:
        raise InvalidInputError(f"unknown rounding mode {rounding!r}")
    if n < 1:
        raise InvalidInputError(f"clip too short: {duration_s}s at {fps}fps gives zero frames")
    return n


def plan_segments(n: int, segment_length: int = 12, overlap: int = 4) -> SegmentPlan:
    """Stride-then-final-start segmentation covering [0, n).

    Starts advance by (L - overlap) while a full segment still ends before n;
    a final start at n - L is appended when the stride sequence does not land
    there. Every segment has exactly ``segment_length`` frames.
    """
    if segment_length < 1 or not 0 <= overlap < segment_length:
        raise InvalidInputError(
            f"need 0 <= overlap < segment_length, got ({overlap}, {segment_length})"
        )
    if n < segment_length:
        raise InvalidInputError(f"n={n} shorter than segment length {segment_length}")
    stride = segment_length - overlap
    starts = []
    s = 0
    while s + segment_length < n:
        starts.append(s)
        s += stride
    if not starts or starts[-1] != n - segment_length:
        starts.append(n - segment_length)
    return SegmentPlan(segment_length, overlap, tuple(starts))


def blend_overlaps(segment_latents: list[torch.Tensor], plan: SegmentPlan, n: int) -> torch.Tensor:
    """Average segment latents on overlapping frames; (n, c, h, w) output."""
    if len(segment_latents) != len(plan.starts):
        raise InvalidInputError(
            f"got {len(segment_latents)} segments for {len(plan.starts)} starts"
        )
    ref_shape = segment_latents[0].shape
    for seg in segment_latents:
        if seg.shape != ref_shape or seg.shape[0] != plan.segment_length:
            raise InvalidInputError(
                f"segment shape {tuple(seg.shape)} does not match "
                f"({plan.segment_length}, ...) contract"
            )
    out = torch.zeros((n, *ref_shape[1:]), dtype=segment_latents[0].dtype)
    counts = torch.zeros(n, dtype=segment_latents[0].dtype)
    for start, seg in zip(plan.starts, segment_latents):
        out[start : start + plan.segment_length] += seg
        counts[start : start + plan.segment_length] += 1
    if (counts == 0).any():
        raise InvalidInputError("segment plan leaves frames uncovered")
    return out / counts.reshape(-1, *([1] * (out.ndim - 1)))


@dataclass(frozen=True)
class GenerationConfig:
    sched: NoiseSchedule
    codec: LatentCodec
    ddim_steps: int = 20
    segment_length: int = 12
    overlap: int = 4
    fps: float = 25.0
    rounding: str = "round"
    seed: int = 0
    audio_dim: int = 32
    audio_seed: int = 1234
    context_radius: int = 2
    line_width: int = 2
    lambda_ref: float | None = None
    lambda_audio: float | None = None


def generate(
    reference_image: np.ndarray | torch.Tensor,
    audio: np.ndarray,
    kps_seq: VKpsSequence,
    model: VExpressModel,
    gen_cfg: GenerationConfig,
    ref_kps: FaceKeypoints | None = None,
    audio_is_embeddings: bool = False,
) -> np.ndarray:
    """Generate (n, 3, H, W) video frames in [0, 1].

    The keypoint sequence is retargeted toward ``ref_kps`` (when given) and
    then linearly interpolated to the frame count implied by the audio length.
    Each segment samples with a noise seed derived from the global seed;
    overlapping latents are averaged before decoding. Deterministic per seed.
    """
    L, O = gen_cfg.segment_length, gen_cfg.overlap
    if audio_is_embeddings:
        emb = np.asarray(audio, dtype=np.float32)
        # two embeddings per frame at the stub's 20 ms hop
        duration_s = emb.shape[0] * 320 / SAMPLE_RATE_HZ
    else:
        wave = np.asarray(audio).reshape(-1)
        if wave.size < 1:
            raise InvalidInputError("audio waveform is empty")
        duration_s = wave.size / SAMPLE_RATE_HZ
    n = compute_frame_count(duration_s, gen_cfg.fps, gen_cfg.rounding)

    if ref_kps is not None:
        kps_seq = retarget_sequence(kps_seq, ref_kps)
    kps_seq = interpolate_sequence(kps_seq, n)

    if audio_is_embeddings:
        from .audio import build_all_contexts, interpolate_embeddings

        aligned = interpolate_embeddings(emb, n)
        contexts = build_all_contexts(aligned, gen_cfg.context_radius)
    else:
        contexts = align_waveform_to_frames(
            wave, n, gen_cfg.audio_dim, gen_cfg.audio_seed, gen_cfg.context_radius
        )
    contexts = contexts.astype(np.float32)

    rasters = render_sequence(kps_seq, gen_cfg.line_width)  # (n, 3, H, W)

    # pad short clips to one full segment, truncate after decoding
    n_padded = n
    if n < L:
        pad = L - n
        rasters = np.concatenate([rasters, np.repeat(rasters[-1:], pad, axis=0)])
        contexts = np.concatenate([contexts, np.zeros((pad, *contexts.shape[1:]), np.float32)])
        n_padded = L
    plan = plan_segments(n_padded, L, O)

    ref_image = torch.as_tensor(reference_image, dtype=torch.float32)
    ref_latent = gen_cfg.codec.encode(ref_image.unsqueeze(0)).to(torch.float32)
    model.eval()
    with torch.no_grad():
        ref_feats = model.reference_net(ref_latent)  # shared across segments
        raster_t = torch.from_numpy(rasters)
        ctx_t = torch.from_numpy(contexts)

        latent_hw = ref_latent.shape[-2:]
        c_lat = ref_latent.shape[1]
        segments = []
        for seg_idx, start in enumerate(plan.starts):
            sl = slice(start, start + L)
            vkps_feat = model.vkps_guider(raster_t[sl].unsqueeze(0))
            audio_tokens = model.audio_projection(ctx_t[sl].unsqueeze(0))
            noise_rng = np.random.default_rng(derive_seed(gen_cfg.seed, "segment", seg_idx))
            z = torch.from_numpy(
                noise_rng.standard_normal((1, L, c_lat, *latent_hw)).astype(np.float32)
            )

            def eps_fn(z_t, t):
                return model.denoiser(
                    z_t,
                    t,
                    ref_feats,
                    vkps_feat,
                    audio_tokens,
                    lambda_ref=gen_cfg.lambda_ref,
                    lambda_audio=gen_cfg.lambda_audio,
                )

            z0 = ddim_sample(eps_fn, z, gen_cfg.sched, gen_cfg.ddim_steps)
            segments.append(z0[0])

        blended = blend_overlaps(segments, plan, n_padded)[:n]
        frames = gen_cfg.codec.decode(blended).clamp(0.0, 1.0)
    return frames.to(torch.float32).numpy()
