"""Audio embedding plumbing: a deterministic stub encoder and frame alignment.

The pretrained speech encoder is replaced by a pluggable provider. The stub
windows a 16 kHz waveform into 20 ms hops and maps simple window statistics
through a seeded projection; the resulting row norm equals the window RMS, so
louder windows always carry larger embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

SAMPLE_RATE_HZ = 16_000
HOP_SAMPLES = 320  # 20 ms at 16 kHz


@dataclass(frozen=True)
class AudioEmbeddingSequence:
    embeddings: np.ndarray  # (m, d_a) float32
    sample_rate_hz: int
    source_duration_s: float


@dataclass(frozen=True)
class AudioProviderStub:
    """Deterministic waveform-to-embedding provider.

    Identical (waveform, seed) pairs produce bitwise-identical embeddings.
    """

    d_a: int
    seed: int
    _projection: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d_a < 1:
            raise InvalidInputError(f"d_a must be >= 1, got {self.d_a}")
        proj = np.random.default_rng(self.seed).standard_normal((self.d_a, 3))
        object.__setattr__(self, "_projection", proj)

    def encode(self, waveform: np.ndarray) -> AudioEmbeddingSequence:
        return stub_encode(waveform, self.d_a, self.seed)


def stub_encode(waveform: np.ndarray, d_a: int, seed: int) -> AudioEmbeddingSequence:
    """Encode a mono 16 kHz waveform into ceil(s / 320) embeddings.

    Window features are [RMS, mean/RMS, zero-crossing rate]; each row is the
    seeded projection of those features rescaled so its norm equals the window
    RMS (monotone loudness link).
    """
    wave = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if wave.size < 1:
        raise InvalidInputError("waveform must contain at least one sample")
    if d_a < 1:
        raise InvalidInputError(f"d_a must be >= 1, got {d_a}")

    m = -(-wave.size // HOP_SAMPLES)
    padded = np.zeros(m * HOP_SAMPLES, dtype=np.float64)
    padded[: wave.size] = wave
    windows = padded.reshape(m, HOP_SAMPLES)

    rms = np.sqrt((windows**2).mean(axis=1))
    mean = windows.mean(axis=1)
    sign_flips = (windows[:, 1:] * windows[:, :-1]) < 0
    zcr = sign_flips.mean(axis=1)

    proj = np.random.default_rng(seed).standard_normal((d_a, 3))
    feats = np.stack([np.ones(m), mean / (rms + 1e-12), zcr], axis=1)  # (m, 3)
    directions = feats @ proj.T  # (m, d_a)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    fallback = np.zeros(d_a)
    fallback[0] = 1.0
    unit = np.where(norms > 1e-12, directions / np.maximum(norms, 1e-12), fallback)
    emb = (rms[:, None] * unit).astype(np.float32)
    return AudioEmbeddingSequence(emb, SAMPLE_RATE_HZ, wave.size / SAMPLE_RATE_HZ)


def interpolate_embeddings(emb: np.ndarray, n_frames: int) -> np.ndarray:
    """Linearly resample (m, d_a) embeddings to twice the video length.

    Output row j samples the input at coordinate j*(m-1)/(2n-1); endpoints are
    preserved exactly, and m = 1 repeats the single row.
    """
    if n_frames < 1:
        raise InvalidInputError(f"n_frames must be >= 1, got {n_frames}")
    emb = np.asarray(emb)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise InvalidInputError(f"embeddings must be a non-empty (m, d_a) array, got {emb.shape}")
    m = emb.shape[0]
    out_len = 2 * n_frames
    if m == 1:
        return np.repeat(emb, out_len, axis=0)
    if m == out_len:
        return emb.copy()
    pos = np.arange(out_len) * (m - 1) / (out_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, m - 1)
    frac = (pos - lo)[:, None].astype(emb.dtype, copy=False)
    return (1 - frac) * emb[lo] + frac * emb[hi]


def build_context(aligned: np.ndarray, frame_index: int, k: int = 2) -> np.ndarray:
    """Gather the 2(2k+1) embedding rows around a frame.

    The aligned array holds two rows per frame; frame j contributes rows
    (2j, 2j+1). Neighbors outside the clip contribute zero rows.
    """
    aligned = np.asarray(aligned)
    if aligned.ndim != 2 or aligned.shape[0] % 2 != 0:
        raise InvalidInputError(f"aligned must be (2n, d_a), got {aligned.shape}")
    n = aligned.shape[0] // 2
    if not 0 <= frame_index < n:
        raise InvalidInputError(f"frame_index {frame_index} out of range [0, {n})")
    out = np.zeros((2 * (2 * k + 1), aligned.shape[1]), dtype=aligned.dtype)
    for slot, j in enumerate(range(frame_index - k, frame_index + k + 1)):
        if 0 <= j < n:
            out[2 * slot] = aligned[2 * j]
            out[2 * slot + 1] = aligned[2 * j + 1]
    return out


def build_all_contexts(aligned: np.ndarray, k: int = 2) -> np.ndarray:
    """Context blocks for every frame; returns (n, 2(2k+1), d_a)."""
    n = aligned.shape[0] // 2
    return np.stack([build_context(aligned, i, k) for i in range(n)])


def align_waveform_to_frames(
    waveform: np.ndarray, n_frames: int, d_a: int, seed: int, k: int = 2
) -> np.ndarray:
    """Full stub path: waveform -> embeddings -> 2n alignment -> per-frame contexts."""
    emb = stub_encode(waveform, d_a, seed).embeddings
    aligned = interpolate_embeddings(emb, n_frames)
    return build_all_contexts(aligned, k)


def load_waveform(path: str | Path) -> np.ndarray:
    """Read a raw little-endian float32 mono waveform sampled at 16 kHz."""
    wave = np.fromfile(path, dtype="<f4")
    if wave.size == 0:
        raise InvalidInputError(f"{path}: empty waveform")
    return wave.astype(np.float64)
