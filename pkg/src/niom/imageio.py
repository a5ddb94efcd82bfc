"""PNG/PGM image I/O as float RGB arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        Image.fromarray(to_uint8(image), "L").save(path)
    else:
        Image.fromarray(to_uint8(image), "RGB").save(path)
