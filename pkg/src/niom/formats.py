"""Little-endian binary containers used for interop with external models.

NIOH  heatmap:            "NIOH" u32 version u32 width u32 height, f32[h*w]
NIOK  keypoints:          "NIOK" u32 version u32 n u32 d u8 has_weights,
                          f32[n*2] positions, f32[n] responses, f32[n*d]
                          descriptors, optionally f32[n] weights
NIOW  projection weights: "NIOW" u32 d, f32[d*d] W_q, f32[d*d] W_k
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NIOH_MAGIC = b"NIOH"
NIOK_MAGIC = b"NIOK"
NIOW_MAGIC = b"NIOW"
VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised for bad magic, unsupported versions and truncated payloads."""


def _take(buf: bytes, offset: int, count: int, what: str) -> np.ndarray:
    nbytes = count * 4
    if offset + nbytes > len(buf):
        raise FormatError(f"truncated payload while reading {what}")
    return np.frombuffer(buf, dtype=_F32, count=count, offset=offset)


# --- NIOH ----------------------------------------------------------------


def read_nioh(path: str | Path) -> np.ndarray:
    """Return the raw (height, width) float32 grid stored in a NIOH file."""
    buf = Path(path).read_bytes()
    if buf[:4] != NIOH_MAGIC:
        raise FormatError(f"{path}: not a NIOH file")
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header")
    version, width, height = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported NIOH version {version}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: empty heatmap {width}x{height}")
    values = _take(buf, 16, width * height, "heatmap values")
    return values.reshape(height, width).copy()


def write_nioh(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    height, width = values.shape
    header = NIOH_MAGIC + struct.pack("<III", VERSION, width, height)
    Path(path).write_bytes(header + values.astype(_F32).tobytes())


# --- NIOK ----------------------------------------------------------------


@dataclass
class KeypointFile:
    positions: np.ndarray  # (n, 2) x, y
    responses: np.ndarray  # (n,)
    descriptors: np.ndarray  # (n, d)
    weights: np.ndarray | None = None  # (n,)


def read_niok(path: str | Path) -> KeypointFile:
    buf = Path(path).read_bytes()
    if buf[:4] != NIOK_MAGIC:
        raise FormatError(f"{path}: not a NIOK file")
    if len(buf) < 17:
        raise FormatError(f"{path}: truncated header")
    version, n, d = struct.unpack_from("<III", buf, 4)
    has_weights = buf[16]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported NIOK version {version}")
    if has_weights not in (0, 1):
        raise FormatError(f"{path}: has_weights flag must be 0 or 1")
    offset = 17
    positions = _take(buf, offset, 2 * n, "positions").reshape(n, 2)
    offset += 8 * n
    responses = _take(buf, offset, n, "responses")
    offset += 4 * n
    descriptors = _take(buf, offset, n * d, "descriptors").reshape(n, d)
    offset += 4 * n * d
    weights = None
    if has_weights:
        weights = _take(buf, offset, n, "weights").astype(np.float64)
        offset += 4 * n
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes")
    return KeypointFile(
        positions.astype(np.float64),
        responses.astype(np.float64),
        descriptors.astype(np.float64),
        weights,
    )


def write_niok(path: str | Path, kf: KeypointFile) -> None:
    positions = np.asarray(kf.positions, dtype=np.float64).reshape(-1, 2)
    n = positions.shape[0]
    descriptors = np.asarray(kf.descriptors, dtype=np.float64)
    d = descriptors.shape[1] if descriptors.ndim == 2 else 0
    descriptors = descriptors.reshape(n, d)
    responses = np.asarray(kf.responses, dtype=np.float64).reshape(n)
    has_weights = kf.weights is not None
    parts = [
        NIOK_MAGIC,
        struct.pack("<IIIB", VERSION, n, d, int(has_weights)),
        positions.astype(_F32).tobytes(),
        responses.astype(_F32).tobytes(),
        descriptors.astype(_F32).tobytes(),
    ]
    if has_weights:
        parts.append(np.asarray(kf.weights).reshape(n).astype(_F32).tobytes())
    Path(path).write_bytes(b"".join(parts))


# --- NIOW ----------------------------------------------------------------


def read_niow(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != NIOW_MAGIC:
        raise FormatError(f"{path}: not a NIOW file")
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header")
    (d,) = struct.unpack_from("<I", buf, 4)
    w = _take(buf, 8, 2 * d * d, "projection weights").astype(np.float64)
    if 8 + 8 * d * d != len(buf):
        raise FormatError(f"{path}: trailing bytes after weights")
    return w[: d * d].reshape(d, d), w[d * d :].reshape(d, d)


def write_niow(path: str | Path, w_q: np.ndarray, w_k: np.ndarray) -> None:
    d = w_q.shape[0]
    payload = np.concatenate([np.ravel(w_q), np.ravel(w_k)]).astype(_F32)
    Path(path).write_bytes(NIOW_MAGIC + struct.pack("<I", d) + payload.tobytes())
