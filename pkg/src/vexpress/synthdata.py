"""Procedural talking-face dataset with analytically known ground truth.

Each sample is a colored blob face: a skin ellipse, three distinctly colored
keypoint markers, and a mouth rectangle whose pixel height tracks a smooth
amplitude signal. The matching waveform is noise scaled so every 20 ms window
has RMS equal to the frame's amplitude, which makes lip sync exactly learnable
from the audio embeddings and exactly measurable from the rendered pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import HOP_SAMPLES, align_waveform_to_frames
from .errors import DataError, InvalidInputError
from .geometry import FaceKeypoints, VKpsSequence
from .vxt import read_vxt, write_vxt

DEFAULT_FPS = 25  # 640 samples per frame at 16 kHz -> exactly two hops
SAMPLES_PER_FRAME = 2 * HOP_SAMPLES

LEFT_EYE_COLOR = (1.0, 1.0, 0.0)
RIGHT_EYE_COLOR = (0.0, 1.0, 1.0)
NOSE_COLOR = (1.0, 0.0, 1.0)
MOUTH_COLOR = (0.0, 0.0, 1.0)
MARKER_RADIUS = 1  # 3x3 squares
COLOR_MATCH_TOL = 0.4  # L2 distance for pixel classification


@dataclass(frozen=True)
class IdentityParams:
    skin_rgb: tuple[float, float, float]
    iod: float  # inter-ocular distance, pixels
    nose_drop: float  # eyes-to-nose vertical distance, pixels
    nose_skew: float  # horizontal nose offset, pixels


@dataclass(frozen=True)
class SynthSample:
    frames: np.ndarray  # (f, 3, H, W) float32 in [0, 1]
    kps_seq: VKpsSequence
    audio_context: np.ndarray  # (f, 2(2k+1), d_a) float32
    reference_frame: np.ndarray  # (3, H, W) float32
    mouth_openness: np.ndarray  # (f,) ground-truth amplitude in [0, 1]
    waveform: np.ndarray  # (f * 640,) float32 at 16 kHz
    identity: IdentityParams


def sample_identity(rng: np.random.Generator, canvas_min: int = 64) -> IdentityParams:
    skin = (rng.uniform(0.45, 0.75), rng.uniform(0.28, 0.5), rng.uniform(0.08, 0.28))
    # IOD scales with the canvas so the whole face (mouth included) stays inside
    iod = rng.uniform(14.0, 20.0) * canvas_min / 64.0
    return IdentityParams(
        skin_rgb=skin,
        iod=iod,
        nose_drop=iod * rng.uniform(0.75, 0.95),
        nose_skew=iod * rng.uniform(-0.08, 0.08),
    )


def amplitude_signal(rng: np.random.Generator, n_frames: int, fps: float = DEFAULT_FPS):
    """Smooth [0, 1] signal: three seeded sinusoids with |coef| summing to 1."""
    freqs = rng.uniform(0.6, 3.2, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    coefs = rng.uniform(0.2, 1.0, size=3)
    coefs = coefs / coefs.sum()
    t = np.arange(n_frames) / fps
    raw = sum(c * np.sin(2 * math.pi * f * t + p) for c, f, p in zip(coefs, freqs, phases))
    return 0.5 + 0.5 * raw


def _rect_pixels(lo: float, hi: float, limit: int) -> tuple[int, int]:
    # half-open pixel range whose centers fall inside [lo, hi)
    first = max(0, math.ceil(lo - 0.5))
    last = min(limit, math.ceil(hi - 0.5))
    return first, max(first, last)


def mouth_box(kps: FaceKeypoints, canvas: tuple[int, int]):
    """Mouth geometry in pixels: column range, row band, and max-open height.

    Returns (x0, x1, y0, y1, max_h) where [x0, x1) spans 0.8 * IOD centered on
    the nose, [y0, y1) spans 0.5 * IOD centered 0.6 * IOD below the nose, and
    max_h = y1 - y0 is the fully open mouth height in rows.
    """
    w, h = canvas
    iod = kps.interocular_distance()
    cx = kps.nose[0]
    cy = kps.nose[1] + 0.6 * iod
    x0, x1 = _rect_pixels(cx - 0.4 * iod, cx + 0.4 * iod, w)
    y0, y1 = _rect_pixels(cy - 0.25 * iod, cy + 0.25 * iod, h)
    return x0, x1, y0, y1, y1 - y0


def _draw_marker(img: np.ndarray, center: tuple[float, float], color) -> None:
    h, w = img.shape[:2]
    cx = int(math.floor(center[0] + 0.5))
    cy = int(math.floor(center[1] + 0.5))
    r = MARKER_RADIUS
    img[max(0, cy - r) : min(h, cy + r + 1), max(0, cx - r) : min(w, cx + r + 1)] = color


def render_face(kps: FaceKeypoints, canvas: tuple[int, int], identity: IdentityParams, amplitude: float) -> np.ndarray:
    """Render one frame; returns (3, H, W) float32 in [0, 1]."""
    w, h = canvas
    img = np.zeros((h, w, 3), dtype=np.float32)

    # skin ellipse below the eye line
    ex, ey = kps.eye_midpoint()
    cx, cy = ex, ey + 0.55 * identity.iod
    ax, ay = 1.05 * identity.iod, 1.35 * identity.iod
    ys, xs = np.mgrid[0:h, 0:w]
    inside = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    img[inside] = identity.skin_rgb

    # mouth: centered rows of the fully-open band, height = round(a * max_h)
    x0, x1, y0, y1, max_h = mouth_box(kps, canvas)
    rows = int(round(float(amplitude) * max_h))
    if rows > 0 and x1 > x0:
        start = y0 + (max_h - rows) // 2
        img[start : start + rows, x0:x1] = MOUTH_COLOR

    _draw_marker(img, kps.left_eye, LEFT_EYE_COLOR)
    _draw_marker(img, kps.right_eye, RIGHT_EYE_COLOR)
    _draw_marker(img, kps.nose, NOSE_COLOR)
    return img.transpose(2, 0, 1)


def measure_mouth_openness(frame: np.ndarray, kps: FaceKeypoints) -> float:
    """Fraction of the fully open mouth present in the frame, in [0, 1].

    Counts mouth-colored pixels in a search window below the nose and divides
    by the keypoint-derived max-open pixel count. Returns 0 when nothing
    matches.
    """
    img = np.asarray(frame, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidInputError(f"expected (3, H, W) frame, got {img.shape}")
    _, h, w = img.shape
    x0, x1, y0, y1, max_h = mouth_box(kps, (w, h))
    if max_h <= 0 or x1 <= x0:
        return 0.0
    iod = kps.interocular_distance()
    # generous window around the mouth band
    wx0, wx1 = _rect_pixels(kps.nose[0] - 0.7 * iod, kps.nose[0] + 0.7 * iod, w)
    wy0, wy1 = _rect_pixels(kps.nose[1] + 0.6 * iod - 0.45 * iod, kps.nose[1] + 0.6 * iod + 0.45 * iod, h)
    window = img[:, wy0:wy1, wx0:wx1]
    if window.size == 0:
        return 0.0
    target = np.array(MOUTH_COLOR, dtype=np.float32).reshape(3, 1, 1)
    dist = np.sqrt(((window - target) ** 2).sum(axis=0))
    count = int((dist < COLOR_MATCH_TOL).sum())
    return float(min(1.0, count / ((x1 - x0) * max_h)))


def synth_waveform(rng: np.random.Generator, amplitude: np.ndarray) -> np.ndarray:
    """Noise waveform whose every 20 ms window has RMS equal to the frame amplitude."""
    blocks = []
    for a in amplitude:
        for _ in range(SAMPLES_PER_FRAME // HOP_SAMPLES):
            g = rng.standard_normal(HOP_SAMPLES)
            rms = math.sqrt(float((g**2).mean()))
            blocks.append(g * (float(a) / rms) if rms > 0 and a > 0 else np.zeros(HOP_SAMPLES))
    return np.concatenate(blocks).astype(np.float32)


def generate_sample(
    seed: int,
    n_frames: int = 12,
    height: int = 64,
    width: int = 64,
    identity: IdentityParams | None = None,
    d_a: int = 32,
    audio_seed: int = 1234,
    context_radius: int = 2,
    fps: float = DEFAULT_FPS,
) -> SynthSample:
    """Deterministically generate one clip with exact ground truth."""
    if height < 32 or width < 32:
        raise InvalidInputError(f"canvas must be at least 32x32, got {width}x{height}")
    rng = np.random.default_rng(seed)
    ident = identity if identity is not None else sample_identity(rng, min(height, width))

    # smooth face-center walk, bounded so the face stays inside the canvas
    margin_x = 1.1 * ident.iod + 3
    margin_y = 1.9 * ident.iod + 3
    base = np.array([width / 2, height / 2 - 0.35 * ident.iod])
    wander = np.minimum(
        np.array([width / 2 - margin_x, height / 2 - margin_y]), 0.35 * ident.iod
    )
    wander = np.maximum(wander, 0.0)
    t = np.arange(n_frames) / fps
    center = np.empty((n_frames, 2))
    for axis in range(2):
        freqs = rng.uniform(0.3, 1.6, size=3)
        phases = rng.uniform(0, 2 * math.pi, size=3)
        coefs = rng.uniform(0.2, 1.0, size=3)
        coefs = coefs / coefs.sum()
        raw = sum(c * np.sin(2 * math.pi * f * t + p) for c, f, p in zip(coefs, freqs, phases))
        center[:, axis] = base[axis] + wander[axis] * raw

    frames_kps = []
    for i in range(n_frames):
        cx, cy = center[i]
        frames_kps.append(
            FaceKeypoints(
                (cx - ident.iod / 2, cy),
                (cx + ident.iod / 2, cy),
                (cx + ident.nose_skew, cy + ident.nose_drop),
            )
        )
    kps_seq = VKpsSequence(tuple(frames_kps), (width, height))

    amplitude = amplitude_signal(rng, n_frames, fps)
    frames = np.stack(
        [render_face(k, (width, height), ident, a) for k, a in zip(frames_kps, amplitude)]
    )
    waveform = synth_waveform(rng, amplitude)
    context = align_waveform_to_frames(waveform, n_frames, d_a, audio_seed, context_radius)
    return SynthSample(
        frames=frames.astype(np.float32),
        kps_seq=kps_seq,
        audio_context=context.astype(np.float32),
        reference_frame=frames[0].astype(np.float32),
        mouth_openness=amplitude,
        waveform=waveform,
        identity=ident,
    )


def save_sample(directory: str | Path, name: str, sample: SynthSample) -> None:
    """Persist one sample as a VXT container plus a keypoint JSON sidecar."""
    directory = Path(directory)
    write_vxt(
        directory / f"{name}.vxt",
        {
            "frames": sample.frames,
            "audio_context": sample.audio_context,
            "reference_frame": sample.reference_frame,
            "mouth_openness": sample.mouth_openness,
            "waveform": sample.waveform,
            "identity": np.array(
                [*sample.identity.skin_rgb, sample.identity.iod, sample.identity.nose_drop, sample.identity.nose_skew],
                dtype=np.float32,
            ),
        },
    )
    sample.kps_seq.save(directory / f"{name}.kps.json")


def load_sample(directory: str | Path, name: str) -> SynthSample:
    directory = Path(directory)
    arrays = read_vxt(directory / f"{name}.vxt")
    ident_row = arrays["identity"]
    kps_seq = VKpsSequence.load(directory / f"{name}.kps.json")
    return SynthSample(
        frames=arrays["frames"],
        kps_seq=kps_seq,
        audio_context=arrays["audio_context"],
        reference_frame=arrays["reference_frame"],
        mouth_openness=arrays["mouth_openness"].astype(np.float64),
        waveform=arrays["waveform"],
        identity=IdentityParams(
            skin_rgb=tuple(float(v) for v in ident_row[:3]),
            iod=float(ident_row[3]),
            nose_drop=float(ident_row[4]),
            nose_skew=float(ident_row[5]),
        ),
    )


def write_dataset(
    directory: str | Path,
    count: int,
    seed: int,
    n_frames: int = 12,
    height: int = 64,
    width: int = 64,
    d_a: int = 32,
    audio_seed: int = 1234,
    context_radius: int = 2,
    fps: float = DEFAULT_FPS,
) -> list[str]:
    """Generate ``count`` clips into a directory with an index file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        name = f"sample_{i:05d}"
        sample = generate_sample(
            seed=seed + i,
            n_frames=n_frames,
            height=height,
            width=width,
            d_a=d_a,
            audio_seed=audio_seed,
            context_radius=context_radius,
            fps=fps,
        )
        save_sample(directory, name, sample)
        names.append(name)
    index = {
        "samples": names,
        "meta": {
            "count": count,
            "seed": seed,
            "n_frames": n_frames,
            "height": height,
            "width": width,
            "d_a": d_a,
            "audio_seed": audio_seed,
            "context_radius": context_radius,
            "fps": fps,
        },
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return names


def load_dataset(directory: str | Path) -> list[SynthSample]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise DataError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    return [load_sample(directory, name) for name in index["samples"]]
