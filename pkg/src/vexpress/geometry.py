"""Facial keypoint geometry: the V-shaped three-point control signal.

A control image renders two line segments (left eye to nose in red, right eye
to nose in green) on a black canvas. Sequences of keypoints can be linearly
interpolated to a target frame count and retargeted to a reference identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, FormatError, InvalidInputError

# Segment colors in the control raster (RGB in [0, 1]).
LEFT_SEGMENT_COLOR = (1.0, 0.0, 0.0)
RIGHT_SEGMENT_COLOR = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class FaceKeypoints:
    """Three 2-D facial landmarks in pixel coordinates (x, y)."""

    left_eye: tuple[float, float]
    right_eye: tuple[float, float]
    nose: tuple[float, float]

    def __post_init__(self):
        for name in ("left_eye", "right_eye", "nose"):
            x, y = getattr(self, name)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InvalidInputError(f"{name} coordinate is not finite: ({x}, {y})")
            object.__setattr__(self, name, (float(x), float(y)))

    def as_array(self) -> np.ndarray:
        return np.array([self.left_eye, self.right_eye, self.nose], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "FaceKeypoints":
        a = np.asarray(arr, dtype=np.float64)
        return FaceKeypoints(tuple(a[0]), tuple(a[1]), tuple(a[2]))

    def eye_midpoint(self) -> tuple[float, float]:
        return (
            0.5 * (self.left_eye[0] + self.right_eye[0]),
            0.5 * (self.left_eye[1] + self.right_eye[1]),
        )

    def interocular_distance(self) -> float:
        return math.dist(self.left_eye, self.right_eye)


@dataclass(frozen=True)
class VKpsImage:
    """Rasterized control image: H x W x 3 floats in [0, 1], black background."""

    raster: np.ndarray


@dataclass(frozen=True)
class VKpsSequence:
    """Ordered keypoint frames sharing one canvas of (width, height) pixels."""

    frames: tuple[FaceKeypoints, ...]
    canvas: tuple[int, int]

    def __post_init__(self):
        if len(self.frames) == 0:
            raise InvalidInputError("VKpsSequence must contain at least one frame")
        object.__setattr__(self, "frames", tuple(self.frames))
        w, h = self.canvas
        object.__setattr__(self, "canvas", (int(w), int(h)))

    def __len__(self) -> int:
        return len(self.frames)

    def to_json(self) -> str:
        w, h = self.canvas
        doc = {
            "width": w,
            "height": h,
            "frames": [
                {
                    "left_eye": list(f.left_eye),
                    "right_eye": list(f.right_eye),
                    "nose": list(f.nose),
                }
                for f in self.frames
            ],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "VKpsSequence":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"kps JSON is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError("kps JSON: top level must be an object")
        for field in ("width", "height", "frames"):
            if field not in doc:
                raise FormatError(f"kps JSON: missing field {field!r}")
        if not isinstance(doc["frames"], list) or not doc["frames"]:
            raise FormatError("kps JSON: field 'frames' must be a non-empty array")
        frames = []
        for i, obj in enumerate(doc["frames"]):
            for field in ("left_eye", "right_eye", "nose"):
                if field not in obj:
                    raise FormatError(f"kps JSON: frame {i} missing field {field!r}")
                pt = obj[field]
                if not (isinstance(pt, list) and len(pt) == 2):
                    raise FormatError(f"kps JSON: frame {i} field {field!r} must be [x, y]")
            try:
                frames.append(
                    FaceKeypoints(tuple(obj["left_eye"]), tuple(obj["right_eye"]), tuple(obj["nose"]))
                )
            except (TypeError, InvalidInputError) as exc:
                raise FormatError(f"kps JSON: frame {i} has invalid coordinates: {exc}") from exc
        return VKpsSequence(tuple(frames), (int(doc["width"]), int(doc["height"])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path) -> "VKpsSequence":
        return VKpsSequence.from_json(Path(path).read_text())


def bresenham_line(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer Bresenham rasterization of the segment (x0,y0)-(x1,y1), inclusive.

    All-octant error-accumulator form; a zero-length segment yields one pixel.
    """
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    points = []
    while True:
        points.append((x, y))
        if x == x1 and y == y1:
            return points
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def _to_pixel(coord: tuple[float, float], canvas: tuple[int, int]) -> tuple[int, int]:
    # Clamp out-of-canvas coordinates to the edge, then round half away from zero.
    w, h = canvas
    x = min(max(coord[0], 0.0), float(w - 1))
    y = min(max(coord[1], 0.0), float(h - 1))
    return int(math.floor(x + 0.5)), int(math.floor(y + 0.5))


def render_vkps(kps: FaceKeypoints, canvas: tuple[int, int], line_width: int = 2) -> VKpsImage:
    """Rasterize the two colored eye-to-nose segments onto a black canvas.

    Out-of-canvas keypoints are clamped to the nearest edge. The segments are
    Bresenham lines thickened to ``line_width`` pixels.
    """
    w, h = int(canvas[0]), int(canvas[1])
    if w < 8 or h < 8:
        raise InvalidInputError(f"canvas dims must be >= 8, got {canvas}")
    if line_width < 1:
        raise InvalidInputError(f"line_width must be >= 1, got {line_width}")
    for name in ("left_eye", "right_eye", "nose"):
        x, y = getattr(kps, name)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InvalidInputError(f"{name} coordinate is not finite")

    raster = np.zeros((h, w, 3), dtype=np.float64)
    nose_px = _to_pixel(kps.nose, (w, h))
    offsets = range(-(line_width // 2), -(line_width // 2) + line_width)
    for start, color in (
        (kps.left_eye, LEFT_SEGMENT_COLOR),
        (kps.right_eye, RIGHT_SEGMENT_COLOR),
    ):
        start_px = _to_pixel(start, (w, h))
        for px, py in bresenham_line(start_px[0], start_px[1], nose_px[0], nose_px[1]):
            for ox in offsets:
                for oy in offsets:
                    qx, qy = px + ox, py + oy
                    if 0 <= qx < w and 0 <= qy < h:
                        raster[qy, qx] = np.maximum(raster[qy, qx], color)
    return VKpsImage(raster)


def render_sequence(seq: VKpsSequence, line_width: int = 2) -> np.ndarray:
    """Render every frame; returns (f, 3, H, W) float32 in [0, 1]."""
    rasters = [render_vkps(f, seq.canvas, line_width).raster for f in seq.frames]
    return np.stack(rasters).transpose(0, 3, 1, 2).astype(np.float32)


def interpolate_sequence(seq: VKpsSequence, target_len: int) -> VKpsSequence:
    """Resample a keypoint sequence to ``target_len`` frames.

    Each coordinate is piecewise-linear in the normalized frame index; the
    first and last frames are preserved exactly.
    """
    if target_len < 1:
        raise InvalidInputError(f"target_len must be >= 1, got {target_len}")
    n_in = len(seq)
    if target_len == n_in:
        return VKpsSequence(seq.frames, seq.canvas)
    coords = np.stack([f.as_array() for f in seq.frames])  # (n_in, 3, 2)
    frames = []
    for j in range(target_len):
        pos = 0.0 if target_len == 1 else j * (n_in - 1) / (target_len - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n_in - 1)
        frac = pos - lo
        pt = coords[lo] if frac == 0.0 else (1.0 - frac) * coords[lo] + frac * coords[hi]
        frames.append(FaceKeypoints.from_array(pt))
    return VKpsSequence(tuple(frames), seq.canvas)


def _eye_nose_ratio(kps: FaceKeypoints) -> float:
    dr = math.dist(kps.right_eye, kps.nose)
    if dr == 0.0:
        raise DegenerateGeometryError("right_eye coincides with nose; distance ratio undefined")
    return math.dist(kps.left_eye, kps.nose) / dr


def _face_size(kps: FaceKeypoints) -> float:
    # Scale measure: inter-ocular distance plus eyes-midpoint-to-nose distance.
    return kps.interocular_distance() + math.dist(kps.eye_midpoint(), kps.nose)


def retarget_sequence(seq: VKpsSequence, ref_kps: FaceKeypoints) -> VKpsSequence:
    """Rescale a keypoint sequence to match a reference face.

    The frame whose left/right eye-to-nose distance ratio is closest to the
    reference picks the rescaling factor (reference size over that frame's
    size); every frame is then scaled about its own nose, which keeps the
    original per-frame nose trace. Results are clamped to the canvas.
    """
    ref_ratio = _eye_nose_ratio(ref_kps)
    ratios = [_eye_nose_ratio(f) for f in seq.frames]
    best = min(range(len(seq)), key=lambda i: abs(ratios[i] - ref_ratio))
    best_size = _face_size(seq.frames[best])
    if best_size == 0.0:
        raise DegenerateGeometryError("selected frame has zero face size")
    scale = _face_size(ref_kps) / best_size

    w, h = seq.canvas
    frames = []
    for f in seq.frames:
        nose = np.array(f.nose)
        pts = nose + scale * (f.as_array() - nose)  # scale about the frame's own nose
        pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
        pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
        frames.append(FaceKeypoints.from_array(pts))
    return VKpsSequence(tuple(frames), seq.canvas)


def kps_from_json_file(path: str | Path) -> VKpsSequence:
    return VKpsSequence.load(path)
