"""Desk-scale evaluation: pose alignment, lip-sync correlation, control sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DetectionError, InvalidInputError
from .geometry import FaceKeypoints, VKpsSequence
from .synthdata import (
    LEFT_EYE_COLOR,
    NOSE_COLOR,
    RIGHT_EYE_COLOR,
    measure_mouth_openness,
)

MARKER_DETECT_TOL = 0.35  # L2 color distance for marker classification


@dataclass(frozen=True)
class EvalReport:
    kps_dis: float  # mean pixels
    lipsync_r: float  # Pearson correlation
    lambda_sweep: tuple[tuple[float, float], ...] = ()  # (lambda_audio, energy)
    frames_evaluated: int = 0
    frames_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "kps_dis": self.kps_dis,
            "lipsync_r": self.lipsync_r,
            "lambda_sweep": [list(row) for row in self.lambda_sweep],
            "frames_evaluated": self.frames_evaluated,
            "frames_skipped": self.frames_skipped,
        }


def kps_distance(generated: VKpsSequence, target: VKpsSequence) -> float:
    """Mean over frames of the mean Euclidean distance over the three points."""
    if len(generated) != len(target):
        raise InvalidInputError(
            f"sequence lengths differ: {len(generated)} vs {len(target)}"
        )
    total = 0.0
    for g, t in zip(generated.frames, target.frames):
        d = np.linalg.norm(g.as_array() - t.as_array(), axis=1)
        total += float(d.mean())
    return total / len(generated)


def _marker_centroid(frame: np.ndarray, color) -> tuple[float, float]:
    target = np.asarray(color, dtype=np.float32).reshape(3, 1, 1)
    dist = np.sqrt(((frame - target) ** 2).sum(axis=0))
    ys, xs = np.where(dist < MARKER_DETECT_TOL)
    if len(xs) == 0:
        raise DetectionError(f"marker of color {tuple(color)} not found")
    return float(xs.mean()), float(ys.mean())


def extract_kps_from_synth(frame: np.ndarray) -> FaceKeypoints:
    """Recover keypoints from a frame rendered in the synthetic visual grammar.

    Returns the centroids of the three marker-colored pixel sets; raises
    DetectionError when any marker is absent.
    """
    img = np.asarray(frame, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidInputError(f"expected (3, H, W) frame, got {img.shape}")
    return FaceKeypoints(
        _marker_centroid(img, LEFT_EYE_COLOR),
        _marker_centroid(img, RIGHT_EYE_COLOR),
        _marker_centroid(img, NOSE_COLOR),
    )


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0 or y.std() == 0:
        raise InvalidInputError("correlation undefined for a constant series")
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / math.sqrt((xc**2).sum() * (yc**2).sum()))


def lipsync_correlation(frames: np.ndarray, amplitude: np.ndarray, kps_per_frame=None) -> float:
    """Pearson correlation between measured mouth openness and the amplitude.

    ``kps_per_frame`` supplies the keypoints for the mouth search window; when
    omitted they are extracted from each frame's markers.
    """
    frames = np.asarray(frames)
    amplitude = np.asarray(amplitude, dtype=np.float64)
    if frames.shape[0] < 3:
        raise InvalidInputError("need at least 3 frames for a correlation")
    if frames.shape[0] != amplitude.shape[0]:
        raise InvalidInputError("frames and amplitude lengths differ")
    measured = measure_openness_series(frames, kps_per_frame)
    return pearson(measured, amplitude)


def measure_openness_series(frames: np.ndarray, kps_per_frame=None) -> np.ndarray:
    """Per-frame mouth openness; keypoints extracted from markers when absent."""
    out = []
    for i, frame in enumerate(frames):
        kps = kps_per_frame[i] if kps_per_frame is not None else extract_kps_from_synth(frame)
        out.append(measure_mouth_openness(frame, kps))
    return np.array(out)


def mouth_motion_energy(frames: np.ndarray, kps_per_frame=None) -> float:
    """Variance over frames of the measured mouth openness."""
    series = measure_openness_series(frames, kps_per_frame)
    return float(series.var())


def lambda_sweep(generate_fn, lambda_values) -> list[tuple[float, float]]:
    """Mouth-motion energy per audio attention weight.

    ``generate_fn(lambda_audio)`` must return (frames, kps_per_frame) generated
    with identical seed and inputs; only the attention weight varies.
    """
    rows = []
    for lam in lambda_values:
        frames, kps = generate_fn(lam)
        rows.append((float(lam), mouth_motion_energy(frames, kps)))
    return rows


def sweep_to_csv(rows) -> str:
    lines = ["lambda,energy"]
    for lam, energy in rows:
        lines.append(f"{lam},{energy}")
    return "\n".join(lines) + "\n"
