"""Classical keypoints: Harris corners with an upright 128-d gradient descriptor.

Descriptors are non-negative and unit-norm (or all-zero on flat patches),
so they live in [0, 1]^128 as the weighting step expects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

DESCRIPTOR_DIM = 128
PATCH_SIZE = 16
DESCRIPTOR_MARGIN = 12
HARRIS_K = 0.04
_CLIP = 0.2
_REC601 = np.array([0.299, 0.587, 0.114])


class Keypoint(NamedTuple):
    x: float
    y: float
    response: float


@dataclass(frozen=True)
class DescriptorSet:
    positions: np.ndarray  # (n, 2) as x, y
    responses: np.ndarray  # (n,)
    descriptors: np.ndarray  # (n, d)

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.responses.shape[0] != n or self.descriptors.shape[0] != n:
            raise ValueError("positions, responses and descriptors must share length")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(float(x), float(y), float(r))
                for (x, y), r in zip(self.positions, self.responses)]

    @classmethod
    def empty(cls, dim: int = DESCRIPTOR_DIM) -> "DescriptorSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim)))


@dataclass(frozen=True)
class FeatureConfig:
    max_keypoints: int = 2048
    nms_radius: float = 4.0
    # responses scale with the 4th power of gradients of [0, 1] intensities
    threshold: float = 1e-9
    # Gaussian pre-smoothing applied before detection and description;
    # 0 disables it.
    blur_sigma: float = 1.0


def to_gray(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma for RGB input; 2-D input is returned as float64."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image[..., :3] @ _REC601
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D or RGB image, got shape {image.shape}")
    return image


def _check_image(image: np.ndarray, min_size: int = 1) -> np.ndarray:
    image = to_gray(image)
    if min(image.shape) < min_size:
        raise ValueError(f"image {image.shape} smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")
    return image


def harris_response(image: np.ndarray) -> np.ndarray:
    """Harris measure with Sobel gradients and a 3x3 Gaussian window."""
    gx = ndimage.sobel(image, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(image, axis=0, mode="nearest") / 8.0
    window = np.array([0.25, 0.5, 0.25])

    def smooth(a):
        a = ndimage.correlate1d(a, window, axis=0, mode="nearest")
        return ndimage.correlate1d(a, window, axis=1, mode="nearest")

    sxx, syy, sxy = smooth(gx * gx), smooth(gy * gy), smooth(gx * gy)
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def _subpixel_offset(minus, centre, plus):
    denom = minus - 2.0 * centre + plus
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom < 0, 0.5 * (minus - plus) / denom, 0.0)
    return np.clip(off, -0.5, 0.5)


def _greedy_nms(xy: np.ndarray, radius: float, limit: int) -> list[int]:
    """Indices of ``xy`` (already sorted by priority) kept by radius NMS."""
    if radius <= 0:
        return list(range(min(limit, len(xy))))
    cell = float(radius)
    grid: dict[tuple[int, int], list[int]] = {}
    kept: list[int] = []
    r2 = radius * radius
    for i, (x, y) in enumerate(xy):
        gx, gy = int(x // cell), int(y // cell)
        clash = False
        for nx in (gx - 1, gx, gx + 1):
            for ny in (gy - 1, gy, gy + 1):
                for j in grid.get((nx, ny), ()):
                    dx, dy = xy[j, 0] - x, xy[j, 1] - y
                    if dx * dx + dy * dy < r2:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if clash:
            continue
        grid.setdefault((gx, gy), []).append(i)
        kept.append(i)
        if len(kept) >= limit:
            break
    return kept


def detect(
    image: np.ndarray,
    max_keypoints: int = 2048,
    nms_radius: float = 4.0,
    threshold: float = 1e-9,
) -> list[Keypoint]:
    """Harris corners, strongest first, refined to subpixel accuracy.

    No two returned keypoints are closer than ``nms_radius`` pixels.
    """
    if max_keypoints < 1:
        raise ValueError("max_keypoints must be >= 1")
    image = _check_image(image, min_size=32)
    r = harris_response(image)
    peaks = (r == ndimage.maximum_filter(r, size=3, mode="nearest")) & (r > 0) & (r >= threshold)
    peaks[0, :] = peaks[-1, :] = False
    peaks[:, 0] = peaks[:, -1] = False
    ys, xs = np.nonzero(peaks)
    if ys.size == 0:
        return []
    resp = r[ys, xs]
    dx = _subpixel_offset(r[ys, xs - 1], resp, r[ys, xs + 1])
    dy = _subpixel_offset(r[ys - 1, xs], resp, r[ys + 1, xs])
    xy = np.stack([xs + dx, ys + dy], axis=1)
    # strongest first; ties broken by raster order for determinism
    order = np.lexsort((xs, ys, -resp))
    xy, resp = xy[order], resp[order]
    kept = _greedy_nms(xy, nms_radius, max_keypoints)
    return [Keypoint(float(xy[i, 0]), float(xy[i, 1]), float(resp[i])) for i in kept]


def _patch_offsets() -> np.ndarray:
    half = PATCH_SIZE / 2.0
    o = np.arange(PATCH_SIZE) - half + 0.5
    ox, oy = np.meshgrid(o, o)
    return np.stack([ox.ravel(), oy.ravel()], axis=1)  # (256, 2)


def _spatial_weights(offsets: np.ndarray) -> np.ndarray:
    """(256, 16) bilinear weights of each sample into the 4x4 cell grid."""
    cells = 4
    width = PATCH_SIZE / cells
    out = np.zeros((offsets.shape[0], cells * cells))
    cx = (offsets[:, 0] + PATCH_SIZE / 2.0) / width - 0.5
    cy = (offsets[:, 1] + PATCH_SIZE / 2.0) / width - 0.5
    x0, y0 = np.floor(cx).astype(int), np.floor(cy).astype(int)
    fx, fy = cx - x0, cy - y0
    for ix, wx in ((x0, 1 - fx), (x0 + 1, fx)):
        for iy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            ok = (ix >= 0) & (ix < cells) & (iy >= 0) & (iy < cells)
            rows = np.nonzero(ok)[0]
            out[rows, iy[ok] * cells + ix[ok]] += wx[ok] * wy[ok]
    return out


_OFFSETS = _patch_offsets()
_SPATIAL = _spatial_weights(_OFFSETS)
_GAUSS = np.exp(-np.sum(_OFFSETS**2, axis=1) / (2.0 * (PATCH_SIZE / 2.0) ** 2))


def _gather(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx, fy = xs - x0, ys - y0
    return ((1 - fy) * ((1 - fx) * grid[y0, x0] + fx * grid[y0, x0 + 1])
            + fy * ((1 - fx) * grid[y0 + 1, x0] + fx * grid[y0 + 1, x0 + 1]))


def _positions(keypoints) -> np.ndarray:
    if isinstance(keypoints, np.ndarray):
        return np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)[:, :2]
    return np.array([(k[0], k[1]) for k in keypoints], dtype=np.float64).reshape(-1, 2)


def describe(image: np.ndarray, keypoints: Sequence[Keypoint] | np.ndarray) -> DescriptorSet:
    """Upright 4x4x8 gradient-orientation histograms over a 16x16 patch.

    Samples are binned trilinearly (two spatial axes plus orientation),
    then the vector is L2-normalized, clipped at 0.2 and renormalized.
    Keypoints closer than 12 px to the border are clamped inward first.
    Patches without gradient energy give the all-zero descriptor.
    """
    image = _check_image(image)
    positions = _positions(keypoints)
    if isinstance(keypoints, np.ndarray) or len(keypoints) == 0:
        responses = np.zeros(positions.shape[0])
    else:
        responses = np.array([k[2] for k in keypoints], dtype=np.float64)
    n = positions.shape[0]
    if n == 0:
        return DescriptorSet.empty()
    if not np.all(np.isfinite(positions)):
        raise ValueError("non-finite keypoint position")
    h, w = image.shape
    if min(h, w) <= 2 * DESCRIPTOR_MARGIN:
        raise ValueError(f"image {image.shape} too small for {PATCH_SIZE}px patches")
    centres = np.empty_like(positions)
    centres[:, 0] = np.clip(positions[:, 0], DESCRIPTOR_MARGIN, w - 1 - DESCRIPTOR_MARGIN)
    centres[:, 1] = np.clip(positions[:, 1], DESCRIPTOR_MARGIN, h - 1 - DESCRIPTOR_MARGIN)

    gx = np.zeros_like(image)
    gy = np.zeros_like(image)
    gx[:, 1:-1] = (image[:, 2:] - image[:, :-2]) * 0.5
    gy[1:-1, :] = (image[2:, :] - image[:-2, :]) * 0.5

    sx = centres[:, :1] + _OFFSETS[None, :, 0]
    sy = centres[:, 1:] + _OFFSETS[None, :, 1]
    vx = _gather(gx, sx, sy)
    vy = _gather(gy, sx, sy)
    mag = np.hypot(vx, vy) * _GAUSS
    obin = (np.arctan2(vy, vx) % (2 * np.pi)) * (8 / (2 * np.pi))
    o0 = np.floor(obin).astype(np.intp) % 8
    fo = obin - np.floor(obin)
    o1 = (o0 + 1) % 8

    orient = np.zeros((n, _OFFSETS.shape[0], 8))
    rows = np.arange(n)[:, None]
    cols = np.arange(_OFFSETS.shape[0])[None, :]
    orient[rows, cols, o0] += mag * (1 - fo)
    orient[rows, cols, o1] += mag * fo
    # (n, 8, 256) @ (256, 16) -> (n, 8, 16) -> cell-major (n, 16, 8)
    hist = np.matmul(orient.transpose(0, 2, 1), _SPATIAL).transpose(0, 2, 1)
    desc = hist.reshape(n, DESCRIPTOR_DIM)
    desc = _normalize_clip(desc)
    return DescriptorSet(positions.copy(), responses, desc)


def _normalize_clip(desc: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    live = norm[:, 0] > 1e-12
    out = np.zeros_like(desc)
    out[live] = np.minimum(desc[live] / norm[live], _CLIP)
    norm2 = np.linalg.norm(out[live], axis=1, keepdims=True)
    out[live] = out[live] / norm2
    return out


def detect_and_describe(image: np.ndarray, config: FeatureConfig | None = None) -> DescriptorSet:
    """Detect, drop keypoints whose patch would leave the image, describe."""
    config = config or FeatureConfig()
    gray = _check_image(image, min_size=32)
    if config.blur_sigma > 0:
        gray = ndimage.gaussian_filter(gray, config.blur_sigma, mode="nearest")
    h, w = gray.shape
    candidates = detect(gray, max_keypoints=h * w, nms_radius=config.nms_radius,
                        threshold=config.threshold)
    m = DESCRIPTOR_MARGIN
    kept = [k for k in candidates if m <= k.x <= w - 1 - m and m <= k.y <= h - 1 - m]
    kept = kept[: config.max_keypoints]
    if not kept:
        return DescriptorSet.empty()
    return describe(gray, kept)
