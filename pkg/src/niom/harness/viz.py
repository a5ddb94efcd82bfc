"""Side-by-side match rendering."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..imageio import to_uint8
from ..matching import MatchSet


def confidence_colour(c: float) -> tuple[int, int, int]:
    """Linear red (0) to green (1)."""
    c = float(np.clip(c, 0.0, 1.0))
    return int(round(255 * (1 - c))), int(round(255 * c)), 0


def render_matches(image_a, image_b, positions_a, positions_b, matches: MatchSet,
                   out_path: str | Path | None = None, radius: float = 1.5) -> Image.Image:
    """Composite of A left of B with keypoint dots and one line per match.

    Output size is ``(width_a + width_b, max(height_a, height_b))``.
    """
    a = to_uint8(np.asarray(image_a))
    b = to_uint8(np.asarray(image_b))
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if b.ndim == 2:
        b = np.repeat(b[..., None], 3, axis=2)
    pa = np.asarray(positions_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(positions_b, dtype=np.float64).reshape(-1, 2)
    idx = matches.indices
    if idx.size and (idx[:, 0].max() >= len(pa) or idx[:, 1].max() >= len(pb)):
        raise IndexError("match index outside the keypoint sets")

    ha, wa = a.shape[:2]
    hb, wb = b.shape[:2]
    canvas = Image.new("RGB", (wa + wb, max(ha, hb)))
    canvas.paste(Image.fromarray(a), (0, 0))
    canvas.paste(Image.fromarray(b), (wa, 0))
    draw = ImageDraw.Draw(canvas)
    for x, y in pa:
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=(255, 255, 0))
    for x, y in pb:
        draw.ellipse([wa + x - radius, y - radius, wa + x + radius, y + radius], fill=(255, 255, 0))
    for m in matches:
        (xa, ya), (xb, yb) = pa[m.index_a], pb[m.index_b]
        draw.line([(xa, ya), (wa + xb, yb)], fill=confidence_colour(m.confidence), width=1)
    if out_path is not None:
        canvas.save(out_path, format="PNG")
    return canvas
