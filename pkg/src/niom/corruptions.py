"""Seeded common corruptions at severities 0-5.

Images are float RGB arrays in [0, 1] with shape (H, W, 3). Severity 0 is
the exact identity. Per-severity parameters come from a versioned table in
``data/corruptions_v1.txt``; every random draw comes from a Philox
(counter-based) generator keyed on the spec seed, so results never depend
on scheduling.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from PIL import Image
from scipy import ndimage

from .imageio import to_uint8

MIN_SIZE = 32
TABLE_NAME = "corruptions_v1.txt"


class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    GLASS_BLUR = "glass_blur"
    MOTION_BLUR = "motion_blur"
    ZOOM_BLUR = "zoom_blur"
    SNOW = "snow"
    FROST = "frost"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    ELASTIC_TRANSFORM = "elastic_transform"
    PIXELATE = "pixelate"
    JPEG_COMPRESSION = "jpeg_compression"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    CorruptionKind.GAUSSIAN_NOISE: "Gaussian Noise",
    CorruptionKind.SHOT_NOISE: "Shot Noise",
    CorruptionKind.IMPULSE_NOISE: "Impulse Noise",
    CorruptionKind.DEFOCUS_BLUR: "Defocus Blur",
    CorruptionKind.GLASS_BLUR: "Frosted Glass Blur",
    CorruptionKind.MOTION_BLUR: "Motion Blur",
    CorruptionKind.ZOOM_BLUR: "Zoom Blur",
    CorruptionKind.SNOW: "Snow",
    CorruptionKind.FROST: "Frost",
    CorruptionKind.FOG: "Fog",
    CorruptionKind.BRIGHTNESS: "Brightness",
    CorruptionKind.CONTRAST: "Contrast",
    CorruptionKind.ELASTIC_TRANSFORM: "Elastic Transform",
    CorruptionKind.PIXELATE: "Pixelate",
    CorruptionKind.JPEG_COMPRESSION: "JPEG Compression",
}


class Side(str, enum.Enum):
    BOTH = "both"
    A_ONLY = "a"
    B_ONLY = "b"


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in 0..5, got {self.severity!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def with_seed(self, seed: int) -> "CorruptionSpec":
        return CorruptionSpec(self.kind, self.severity, seed)


def parse_table(text: str) -> dict[tuple[CorruptionKind, int], dict[str, float]]:
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, severity, *params = line.split()
        try:
            entry = {k: float(v) for k, v in (p.split("=", 1) for p in params)}
            table[(CorruptionKind(kind), int(severity))] = entry
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return table


@lru_cache(maxsize=None)
def severity_table() -> dict[tuple[CorruptionKind, int], dict[str, float]]:
    text = resources.files("niom.data").joinpath(TABLE_NAME).read_text()
    table = parse_table(text)
    missing = [(k, s) for k in CorruptionKind for s in range(1, 6) if (k, s) not in table]
    if missing:
        raise RuntimeError(f"severity table lacks entries for {missing}")
    return table


def params(kind: CorruptionKind | str, severity: int) -> dict[str, float]:
    return dict(severity_table()[(CorruptionKind(kind), severity)])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def derive_seed(seed: int, *parts) -> int:
    """``seed`` XOR a stable 64-bit hash of ``parts``."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(h, "little")) & (2**64 - 1)


def _per_channel(img: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(img[..., c]) for c in range(img.shape[2])], axis=2)


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _per_channel(img, lambda ch: ndimage.convolve(ch, kernel, mode="reflect"))


def disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = (x**2 + y**2 <= radius**2).astype(np.float64)
    k = ndimage.gaussian_filter(k, 0.5)
    return k / k.sum()


def line_kernel(length: float, angle_deg: float) -> np.ndarray:
    """Anti-aliased line of ``length`` px through the kernel centre."""
    half = int(np.ceil(length / 2.0)) + 1
    size = 2 * half + 1
    k = np.zeros((size, size))
    theta = np.deg2rad(angle_deg)
    steps = np.linspace(-length / 2.0, length / 2.0, int(4 * length) + 1)
    xs = half + steps * np.cos(theta)
    ys = half - steps * np.sin(theta)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    np.add.at(k, (y0, x0), (1 - fx) * (1 - fy))
    np.add.at(k, (y0, x0 + 1), fx * (1 - fy))
    np.add.at(k, (y0 + 1, x0), (1 - fx) * fy)
    np.add.at(k, (y0 + 1, x0 + 1), fx * fy)
    return k / k.sum()


def plasma_fractal(size: int, rng: np.random.Generator, decay: float = 3.0) -> np.ndarray:
    """Diamond-square fractal on a toroidal ``size x size`` grid, scaled to [0, 1]."""
    if size & (size - 1):
        raise ValueError("plasma size must be a power of two")
    grid = np.zeros((size, size))
    step = size
    wibble = 100.0
    while step >= 2:
        half = step // 2
        corners = grid[0:size:step, 0:size:step]
        acc = corners + np.roll(corners, -1, axis=0)
        acc = acc + np.roll(acc, -1, axis=1)
        grid[half:size:step, half:size:step] = acc / 4 + rng.uniform(-wibble, wibble, acc.shape)
        # diamonds: points between two corners, horizontally and vertically
        centres = grid[half:size:step, half:size:step]
        corners = grid[0:size:step, 0:size:step]
        ltsum = corners + np.roll(corners, -1, axis=1)
        cdsum = centres + np.roll(centres, 1, axis=0)
        grid[0:size:step, half:size:step] = (ltsum + cdsum) / 4 + rng.uniform(
            -wibble, wibble, ltsum.shape)
        ttsum = corners + np.roll(corners, -1, axis=0)
        lrsum = centres + np.roll(centres, 1, axis=1)
        grid[half:size:step, 0:size:step] = (ttsum + lrsum) / 4 + rng.uniform(
            -wibble, wibble, ttsum.shape)
        step = half
        wibble /= decay
    grid -= grid.min()
    return grid / grid.max()


def _fractal_field(shape: tuple[int, int], rng: np.random.Generator, decay: float = 3.0) -> np.ndarray:
    size = 1
    while size < max(shape):
        size *= 2
    return plasma_fractal(size, rng, decay)[: shape[0], : shape[1]]


def _zoom_centre(img: np.ndarray, z: float) -> np.ndarray:
    h, w = img.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - centre / z
    return _per_channel(img, lambda ch: ndimage.affine_transform(
        ch, np.diag([1.0 / z, 1.0 / z]), offset=offset, order=1, mode="nearest"))


# --- individual corruptions ----------------------------------------------


def _gaussian_noise(img, p, rng):
    return img + rng.standard_normal(img.shape) * p["sigma"]


def _shot_noise(img, p, rng):
    lam = p["lam"]
    return rng.poisson(np.clip(img, 0, 1) * lam) / lam


def _impulse_noise(img, p, rng):
    hit = rng.random(img.shape) < p["p"]
    salt = rng.random(img.shape) < 0.5
    out = img.copy()
    out[hit] = salt[hit].astype(np.float64)
    return out


def _defocus_blur(img, p, rng):
    return _convolve(img, disk_kernel(p["radius"]))


def _local_swaps(img: np.ndarray, delta: int, rng: np.random.Generator) -> np.ndarray:
    """One round of disjoint random swaps, each within ``delta`` px.

    Anchors sit on a lattice of stride ``2*delta+1``; each swaps with a
    random partner inside its own cell, so swaps never collide. Every
    lattice phase is visited once per round.
    """
    out = img.copy()
    h, w = img.shape[:2]
    stride = 2 * delta + 1
    for py in range(stride):
        for px in range(stride):
            ay, ax = np.mgrid[py:h:stride, px:w:stride]
            ay, ax = ay.ravel(), ax.ravel()
            dy = rng.integers(-delta, delta + 1, ay.size)
            dx = rng.integers(-delta, delta + 1, ax.size)
            by, bx = ay + dy, ax + dx
            # partners must stay inside the image and inside the anchor's cell
            ok = (by >= 0) & (by < h) & (bx >= 0) & (bx < w)
            ok &= (by >= ay - delta) & (by <= ay + delta) & (bx >= ax - delta) & (bx <= ax + delta)
            ay, ax, by, bx = ay[ok], ax[ok], by[ok], bx[ok]
            a_val = out[ay, ax].copy()
            out[ay, ax] = out[by, bx]
            out[by, bx] = a_val
    return out


def _glass_blur(img, p, rng):
    sigma, delta, rounds = p["sigma"], int(p["delta"]), int(p["rounds"])
    blur = lambda x: _per_channel(x, lambda ch: ndimage.gaussian_filter(ch, sigma, mode="nearest"))
    out = blur(img)
    for _ in range(rounds):
        out = _local_swaps(out, delta, rng)
    return blur(out)


def _motion_blur(img, p, rng):
    angle = rng.uniform(-45.0, 45.0)
    return _convolve(img, line_kernel(p["length"], angle))


def _zoom_blur(img, p, rng):
    zooms = np.arange(1.0, p["zmax"] + 1e-9, 0.01)
    acc = np.zeros_like(img)
    for z in zooms:
        acc += img if z == 1.0 else _zoom_centre(img, z)
    return acc / len(zooms)


def _snow(img, p, rng):
    h, w = img.shape[:2]
    flakes = (rng.random((h, w)) < p["density"]).astype(np.float64)
    flakes = ndimage.gaussian_filter(flakes, 0.6) * 4.0
    angle = rng.uniform(-135.0, -45.0)
    layer = np.clip(ndimage.convolve(flakes, line_kernel(p["blur"], angle), mode="wrap") * 3.0, 0, 1)
    gray = img.mean(axis=2, keepdims=True)
    lighten = p["lighten"]
    base = (1 - lighten) * img + lighten * np.maximum(img, gray * 1.5 + 0.5)
    return base + layer[..., None]


def _frost(img, p, rng):
    h, w = img.shape[:2]
    field = _fractal_field((h, w), rng, decay=1.8)
    crystals = np.clip((field - 0.45) / 0.3, 0.0, 1.0)
    fine = rng.random((h, w))
    texture = np.clip(0.75 * crystals + 0.25 * fine * crystals, 0.0, 1.0)
    ice = np.array([0.85, 0.92, 1.0])
    mask = (p["amount"] * (0.35 + 0.65 * texture))[..., None]
    return img * (1.0 - mask) + mask * ice


def _fog(img, p, rng):
    h, w = img.shape[:2]
    field = 0.55 + 0.45 * _fractal_field((h, w), rng, decay=2.0)
    return (1.0 - p["f"]) * img + p["f"] * field[..., None]


def _brightness(img, p, rng):
    value = img.max(axis=2, keepdims=True)
    new_value = np.clip(value + p["b"], 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = img * (new_value / value)
    return np.where(value > 0, scaled, new_value)


def _contrast(img, p, rng):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * p["c"] + mean


def _elastic(img, p, rng):
    h, w = img.shape[:2]
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), p["smooth"], mode="reflect")
        fields.append(f / max(np.abs(f).max(), 1e-12) * p["magnitude"])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + fields[0], xx + fields[1]]
    return _per_channel(img, lambda ch: ndimage.map_coordinates(ch, coords, order=1, mode="nearest"))


def _pixelate(img, p, rng):
    f = int(p["factor"])
    h, w = img.shape[:2]
    rows = np.arange(0, h, f)
    cols = np.arange(0, w, f)
    sums = np.add.reduceat(np.add.reduceat(img, rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))[..., None]
    blocks = sums / counts
    return np.repeat(np.repeat(blocks, f, axis=0), f, axis=1)[:h, :w]


def _jpeg(img, p, rng):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), "RGB").save(
        buf, format="JPEG", quality=int(p["quality"]), subsampling=2, optimize=False, progressive=False)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


_IMPLS = {
    CorruptionKind.GAUSSIAN_NOISE: _gaussian_noise,
    CorruptionKind.SHOT_NOISE: _shot_noise,
    CorruptionKind.IMPULSE_NOISE: _impulse_noise,
    CorruptionKind.DEFOCUS_BLUR: _defocus_blur,
    CorruptionKind.GLASS_BLUR: _glass_blur,
    CorruptionKind.MOTION_BLUR: _motion_blur,
    CorruptionKind.ZOOM_BLUR: _zoom_blur,
    CorruptionKind.SNOW: _snow,
    CorruptionKind.FROST: _frost,
    CorruptionKind.FOG: _fog,
    CorruptionKind.BRIGHTNESS: _brightness,
    CorruptionKind.CONTRAST: _contrast,
    CorruptionKind.ELASTIC_TRANSFORM: _elastic,
    CorruptionKind.PIXELATE: _pixelate,
    CorruptionKind.JPEG_COMPRESSION: _jpeg,
}


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to an RGB float image in [0, 1]; output is clamped to [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got {image.shape}")
    if min(image.shape[:2]) < MIN_SIZE:
        raise ValueError(f"image {image.shape[:2]} smaller than {MIN_SIZE}x{MIN_SIZE}")
    if spec.severity == 0:
        return image.copy()
    img = image.astype(np.float64)
    out = _IMPLS[spec.kind](img, params(spec.kind, spec.severity), _rng(spec.seed))
    return np.clip(out, 0.0, 1.0)


def corrupt_pair(
    pair_id: str,
    image_a: np.ndarray,
    image_b: np.ndarray,
    spec: CorruptionSpec,
    side: Side | str = Side.BOTH,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt one or both images of a pair with independent derived seeds.

    The untouched image of a one-sided pair is returned as-is.
    """
    side = Side(side)
    out_a, out_b = image_a, image_b
    if side in (Side.BOTH, Side.A_ONLY):
        out_a = corrupt(image_a, spec.with_seed(derive_seed(spec.seed, pair_id, 0)))
    if side in (Side.BOTH, Side.B_ONLY):
        out_b = corrupt(image_b, spec.with_seed(derive_seed(spec.seed, pair_id, 1)))
    return out_a, out_b
