"""Per-pixel semantic importance maps.

A heatmap stands in for the detector + class-activation pair: either it is
exported by an external model (NIOH file, or an 8-bit PGM), or it is
synthesized from detection boxes as one Gaussian blob per box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import formats


@dataclass(frozen=True)
class Heatmap:
    """Immutable (height, width) grid of importance scores in [0, 1]."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"heatmap must be a non-empty 2-D grid, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("heatmap contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("heatmap values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def zeros(cls, size: tuple[int, int]) -> "Heatmap":
        width, height = size
        return cls(np.zeros((height, width)))


@dataclass(frozen=True)
class DetectionBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate detection box {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # clipping keeps the result inside [min(a, b), max(a, b)] despite rounding
    out = a + t * (b - a)
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def _bilinear(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at pixel-index coordinates, clamped to the edge pixels."""
    h, w = grid.shape
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = _lerp(grid[y0, x0], grid[y0, x1], fx)
    bottom = _lerp(grid[y1, x0], grid[y1, x1], fx)
    return _lerp(top, bottom, fy)


def resample(values: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment; identity at equal size."""
    width, height = target_size
    if width < 1 or height < 1:
        raise ValueError(f"target size must be at least 1x1, got {target_size}")
    src_h, src_w = values.shape
    if (src_w, src_h) == (width, height):
        return np.array(values, dtype=np.float64)
    xs = (np.arange(width) + 0.5) * (src_w / width) - 0.5
    ys = (np.arange(height) + 0.5) * (src_h / height) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear(np.asarray(values, dtype=np.float64), gx, gy)


def _read_pgm(buf: bytes, path) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise formats.FormatError(f"{path}: truncated PGM header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise formats.FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise formats.FormatError(f"{path}: only 8-bit PGM (maxval 255) is supported")
    if width < 1 or height < 1:
        raise formats.FormatError(f"{path}: empty PGM")
    raster = buf[pos : pos + width * height]
    if len(raster) < width * height:
        raise formats.FormatError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width) / 255.0


def load_heatmap(path: str | Path, target_size: tuple[int, int]) -> Heatmap:
    """Read a NIOH or binary PGM heatmap and resample it to ``target_size``.

    ``target_size`` is ``(width, height)``. NIOH float values are clamped to
    [0, 1]; PGM pixels are divided by 255.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    buf = path.read_bytes()
    if buf[:4] == formats.NIOH_MAGIC:
        raw = formats.read_nioh(path).astype(np.float64)
        if not np.all(np.isfinite(raw)):
            raise formats.FormatError(f"{path}: non-finite heatmap values")
    elif buf[:2] == b"P5":
        raw = _read_pgm(buf, path)
    else:
        raise formats.FormatError(f"{path}: neither a NIOH nor a P5 PGM file")
    values = resample(np.clip(raw, 0.0, 1.0), target_size)
    return Heatmap(np.clip(values, 0.0, 1.0))


def save_heatmap(path: str | Path, h: Heatmap) -> None:
    formats.write_nioh(path, h.values)


def synth_heatmap(boxes: Iterable[DetectionBox], size: tuple[int, int]) -> Heatmap:
    """Max-combination of one axis-aligned Gaussian per box.

    Each blob is centred on its (image-clamped) box, with sigma equal to a
    quarter of the box extent per axis and peak equal to the box score.
    """
    width, height = size
    if width < 1 or height < 1:
        raise ValueError(f"heatmap size must be at least 1x1, got {size}")
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    out = np.zeros((height, width))
    for box in boxes:
        x0, x1 = np.clip([box.x_min, box.x_max], 0.0, width - 1)
        y0, y1 = np.clip([box.y_min, box.y_max], 0.0, height - 1)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {box} is degenerate after clamping to the image")
        sx, sy = (x1 - x0) / 4.0, (y1 - y0) / 4.0
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        gx = np.exp(-0.5 * ((xs - cx) / sx) ** 2)
        gy = np.exp(-0.5 * ((ys - cy) / sy) ** 2)
        np.maximum(out, box.score * np.outer(gy, gx), out=out)
    return Heatmap(np.clip(out, 0.0, 1.0))


def aggregate(heatmaps: Sequence[Heatmap]) -> Heatmap:
    """Pixelwise maximum over per-object heatmaps."""
    if len(heatmaps) == 0:
        raise ValueError("cannot aggregate an empty list of heatmaps")
    shape = heatmaps[0].values.shape
    for h in heatmaps[1:]:
        if h.values.shape != shape:
            raise ValueError(f"heatmap size mismatch: {h.values.shape} vs {shape}")
    if len(heatmaps) == 1:
        return heatmaps[0]
    return Heatmap(np.maximum.reduce([h.values for h in heatmaps]))


def sample_many(h: Heatmap, positions: np.ndarray) -> np.ndarray:
    """Vectorised :func:`sample` for an ``(n, 2)`` array of ``(x, y)``."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(positions)):
        raise ValueError("non-finite sample position")
    if positions.shape[0] == 0:
        return np.zeros(0)
    return _bilinear(h.values, positions[:, 0], positions[:, 1])


def sample(h: Heatmap, p: Sequence[float]) -> float:
    """Heatmap value at subpixel position ``p = (x, y)``; borders clamp."""
    return float(sample_many(h, np.asarray(p, dtype=np.float64))[0])
