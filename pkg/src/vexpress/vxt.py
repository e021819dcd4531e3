"""VXT tensor container: a minimal single-file format for named float32 arrays.

Layout, byte-exact:

    bytes 0..7    magic b"VXTENSOR"
    bytes 8..11   header length (unsigned 32-bit little-endian)
    header        UTF-8 JSON  {name: {"dtype": "f32", "shape": [...], "offset": int}}
    payload       concatenated row-major little-endian float32 data

Offsets are byte offsets into the payload. Only "f32" is supported.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VXTENSOR"


def write_vxt(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path``. Values are cast to float32; iteration
    order of ``arrays`` fixes the payload layout, so writes are deterministic."""
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        data = np.asarray(arr, dtype="<f4")
        raw = data.tobytes()  # always row-major regardless of memory layout
        header[name] = {"dtype": "f32", "shape": list(data.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for raw in chunks:
            fh.write(raw)


def read_vxt(path: str | Path) -> dict[str, np.ndarray]:
    """Read a VXT container, validating magic, offsets, and extents."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a VXT container (bad magic)")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if 12 + header_len > len(blob):
        raise FormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON: {exc}") from exc
    payload = blob[12 + header_len :]

    out: dict[str, np.ndarray] = {}
    extents: list[tuple[int, int]] = []
    for name, meta in header.items():
        if meta.get("dtype") != "f32":
            raise FormatError(f"{path}: entry {name!r} has unsupported dtype {meta.get('dtype')!r}")
        shape = tuple(int(s) for s in meta["shape"])
        if any(s < 0 for s in shape):
            raise FormatError(f"{path}: entry {name!r} has negative dimension")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(meta["offset"])
        end = start + 4 * count
        if start < 0 or end > len(payload):
            raise FormatError(f"{path}: entry {name!r} extends past payload end")
        extents.append((start, end))
        out[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    extents.sort()
    for (_, prev_end), (next_start, _) in zip(extents, extents[1:]):
        if next_start < prev_end:
            raise FormatError(f"{path}: overlapping payload extents")
    return out
