"""Synthetic two-view scenes with known relative pose.

Each scene is a textured 3D box seen by two calibrated cameras, over a
background of clutter. The clutter is drawn independently per image from a
motif pool shared across the whole benchmark, so the same motif can appear
at unrelated places in both views and produce confident but geometrically
wrong matches. A heatmap per image covers the projected object.

The box is non-planar on purpose: a single plane is a degenerate
configuration for the 8-point essential matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from ..corruptions import derive_seed
from ..geometry import CameraIntrinsics, RelativePose
from ..heatmap import DetectionBox, save_heatmap, synth_heatmap
from ..imageio import save_image

WIDTH, HEIGHT = 320, 240
INTRINSICS = CameraIntrinsics(300.0, 300.0, 160.0, 120.0)
TEXTURE_SIZE = 256
MOTIF_SIZE = 40
SUPERSAMPLE = 2
CATEGORIES = ("SameObject", "SameAppearance", "SameClass", "ClassDiscrepancy", "DomainShift")


@dataclass
class Scene:
    image_a: np.ndarray  # (H, W, 3) float in [0, 1]
    image_b: np.ndarray
    box_a: DetectionBox
    box_b: DetectionBox
    pose: RelativePose
    intrinsics: CameraIntrinsics
    category: str
    depth_a: np.ndarray  # (H, W) z-depth of the object in view A, inf off the object
    baseline: float  # distance between the camera centres

    def transfer(self, points_a: np.ndarray) -> np.ndarray:
        """Ground-truth positions in B of object pixels ``(x, y)`` of A; NaN off the object."""
        pts = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
        k = self.intrinsics
        xi = np.clip(np.round(pts[:, 0]).astype(int), 0, WIDTH - 1)
        yi = np.clip(np.round(pts[:, 1]).astype(int), 0, HEIGHT - 1)
        z = self.depth_a[yi, xi]
        cam = np.stack([(pts[:, 0] - k.cx) / k.fx * z, (pts[:, 1] - k.cy) / k.fy * z, z], axis=1)
        with np.errstate(invalid="ignore"):
            cam_b = cam @ self.pose.rotation.T + self.baseline * self.pose.translation
            out = np.stack([k.fx * cam_b[:, 0] / cam_b[:, 2] + k.cx,
                            k.fy * cam_b[:, 1] / cam_b[:, 2] + k.cy], axis=1)
        out[~np.isfinite(z)] = np.nan
        return out


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _random_color(rng) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(0, 256, 3))


def _shapes_texture(rng, size: int, n_shapes: int) -> np.ndarray:
    """Smooth colour field with sharp rectangles, triangles and ellipses."""
    base = ndimage.gaussian_filter(rng.random((size, size, 3)), (size / 8, size / 8, 0))
    base = (base - base.min()) / max(np.ptp(base), 1e-9)
    img = Image.fromarray((base * 120 + 60).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    for _ in range(n_shapes):
        x0, y0 = rng.uniform(-0.1, 0.95, 2) * size
        w, h = rng.uniform(0.03, 0.12, 2) * size
        kind = rng.integers(3)
        fill = _random_color(rng)
        if kind == 0:
            draw.rectangle([x0, y0, x0 + w, y0 + h], fill=fill)
        elif kind == 1:
            pts = [(x0 + rng.uniform(0, w), y0 + rng.uniform(0, h)) for _ in range(3)]
            draw.polygon(pts, fill=fill)
        else:
            draw.ellipse([x0, y0, x0 + w, y0 + h], fill=fill)
    return np.asarray(img, dtype=np.float64) / 255.0


def motif_pool(seed: int, count: int = 28) -> list[np.ndarray]:
    rng = _rng(derive_seed(seed, "motifs"))
    return [_shapes_texture(rng, MOTIF_SIZE, 14) for _ in range(count)]


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def _look_at(centre: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at ``centre`` facing ``target`` (y down)."""
    z = target - centre
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, -1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


@dataclass
class _Box:
    centre: np.ndarray
    rotation: np.ndarray  # box-to-world
    half: np.ndarray
    textures: list  # six (T, T, 3) arrays, order: -x +x -y +y -z +z

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return (signs * self.half) @ self.rotation.T + self.centre


def _bilinear_rgb(tex: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    t = tex.shape[0]
    x = np.clip(u * (t - 1), 0, t - 1)
    y = np.clip(v * (t - 1), 0, t - 1)
    x0 = np.minimum(np.floor(x).astype(int), t - 2)
    y0 = np.minimum(np.floor(y).astype(int), t - 2)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    return ((1 - fx) * (1 - fy) * tex[y0, x0] + fx * (1 - fy) * tex[y0, x0 + 1]
            + (1 - fx) * fy * tex[y0 + 1, x0] + fx * fy * tex[y0 + 1, x0 + 1])


_LIGHT = np.array([0.4, -0.6, -0.7]) / np.linalg.norm([0.4, -0.6, -0.7])


def _cast(box: _Box, rotation: np.ndarray, centre: np.ndarray, k: CameraIntrinsics, s: int):
    """Intersect pixel rays (``s`` x ``s`` samples per pixel) with ``box``.

    Returns hit mask, box-frame hit points and camera-frame depth per ray.
    """
    h, w = HEIGHT * s, WIDTH * s
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs + 0.5) / s - 0.5
    py = (ys + 0.5) / s - 0.5
    dirs_cam = np.stack([(px - k.cx) / k.fx, (py - k.cy) / k.fy, np.ones_like(px)], -1).reshape(-1, 3)
    to_box = box.rotation.T
    dirs = dirs_cam @ rotation @ to_box.T
    origin = to_box @ (centre - box.centre)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-box.half - origin) / dirs
        t2 = (box.half - origin) / dirs
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    points = origin + dirs * np.where(hit, t_near, 0.0)[:, None]
    # dirs_cam has unit z, so the ray parameter is the depth
    depth = np.where(hit, t_near, np.inf)
    return hit, points, depth


def _render_box(box: _Box, rotation: np.ndarray, centre: np.ndarray, k: CameraIntrinsics,
                background: np.ndarray, tint: np.ndarray) -> np.ndarray:
    """Ray-cast ``box`` over ``background`` for a camera (world-to-camera ``rotation``)."""
    s = SUPERSAMPLE
    hit, points, _ = _cast(box, rotation, centre, k, s)
    out = np.repeat(np.repeat(background, s, axis=0), s, axis=1).reshape(-1, 3).copy()
    idx = np.nonzero(hit)[0]
    rel = points[idx] / box.half
    axis = np.argmax(np.abs(rel), axis=1)
    sign = rel[np.arange(idx.size), axis] > 0
    colours = np.zeros((idx.size, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        for sg in (False, True):
            sel = (axis == a) & (sign == sg)
            if not np.any(sel):
                continue
            u = (rel[sel, others[0]] + 1) / 2
            v = (rel[sel, others[1]] + 1) / 2
            normal = np.zeros(3)
            normal[a] = 1.0 if sg else -1.0
            shade = 0.55 + 0.45 * max(0.0, float(-(box.rotation @ normal) @ _LIGHT))
            colours[sel] = _bilinear_rgb(box.textures[2 * a + int(sg)], u, v) * shade
    out[idx] = np.clip(colours * tint, 0, 1)
    return out.reshape(HEIGHT, s, WIDTH, s, 3).mean(axis=(1, 3))


def _background(rng, motifs: list[np.ndarray], n_motifs: int) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.random((HEIGHT, WIDTH, 3)), (24, 24, 0))
    base = (base - base.min()) / max(np.ptp(base), 1e-9) * 0.35 + 0.3
    chosen = rng.choice(len(motifs), size=min(n_motifs, len(motifs)), replace=False)
    for m in chosen:
        y = int(rng.integers(0, HEIGHT - MOTIF_SIZE))
        x = int(rng.integers(0, WIDTH - MOTIF_SIZE))
        base[y : y + MOTIF_SIZE, x : x + MOTIF_SIZE] = motifs[m]
    return base


def _project_bbox(corners: np.ndarray, rotation, centre, k: CameraIntrinsics, score: float) -> DetectionBox:
    cam = (corners - centre) @ rotation.T
    u = k.fx * cam[:, 0] / cam[:, 2] + k.cx
    v = k.fy * cam[:, 1] / cam[:, 2] + k.cy
    x0, x1 = np.clip([u.min(), u.max()], 0, WIDTH - 1)
    y0, y1 = np.clip([v.min(), v.max()], 0, HEIGHT - 1)
    return DetectionBox(float(x0), float(y0), float(x1), float(y1), score)


def make_scene(seed: int, motifs: list[np.ndarray] | None = None, category: str | None = None,
               n_motifs: int = 22) -> Scene:
    """Render one seeded scene. Camera A sits at the world origin."""
    rng = _rng(seed)
    motifs = motif_pool(seed) if motifs is None else motifs
    category = category or CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    distance = rng.uniform(3.8, 4.3)
    target = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), distance])
    textures = [_shapes_texture(rng, TEXTURE_SIZE, 150) for _ in range(6)]
    box = _Box(
        centre=target,
        # yaw near 45 degrees and a downward pitch show three faces
        rotation=_rotation(rng.uniform(0.55, 1.0) * rng.choice([-1, 1]), rng.uniform(-0.6, -0.4),
                           rng.uniform(-0.2, 0.2)),
        half=rng.uniform([0.8, 0.6, 0.6], [1.1, 0.9, 0.9]),
        textures=textures,
    )
    # camera B orbits the object
    yaw = np.deg2rad(rng.uniform(8, 14)) * rng.choice([-1, 1])
    pitch = np.deg2rad(rng.uniform(-6, 6))
    orbit = _rotation(yaw, pitch, 0.0)
    centre_b = target + orbit @ (np.zeros(3) - target) * rng.uniform(0.9, 1.1)
    rot_b = _look_at(centre_b, target + rng.uniform(-0.2, 0.2, 3))
    rot_a = np.eye(3)
    centre_a = np.zeros(3)

    tint_a = np.ones(3)
    tint_b = np.ones(3)
    if category == "SameAppearance":
        tint_b = rng.uniform(0.85, 1.15, 3)
    elif category in ("SameClass", "ClassDiscrepancy"):
        # a partly different instance: one face re-textured in view B
        tint_b = rng.uniform(0.9, 1.1, 3)
    bg_a = _background(rng, motifs, n_motifs)
    bg_b = _background(rng, motifs, n_motifs)
    image_a = _render_box(box, rot_a, centre_a, INTRINSICS, bg_a, tint_a)
    if category in ("SameClass", "ClassDiscrepancy"):
        face = int(rng.integers(6))
        box.textures = list(textures)
        box.textures[face] = _shapes_texture(rng, TEXTURE_SIZE, 150)
    image_b = _render_box(box, rot_b, centre_b, INTRINSICS, bg_b, tint_b)
    if category == "DomainShift":
        gray = image_b.mean(axis=2, keepdims=True)
        image_b = np.clip(0.4 * image_b + 0.6 * np.round(gray * 6) / 6, 0, 1)

    score = float(rng.uniform(0.85, 1.0))
    corners = box.corners()
    pose = RelativePose(rot_b, -rot_b @ centre_b)
    return Scene(
        image_a=image_a,
        image_b=image_b,
        box_a=_project_bbox(corners, rot_a, centre_a, INTRINSICS, score),
        box_b=_project_bbox(corners, rot_b, centre_b, INTRINSICS, score),
        pose=pose,
        intrinsics=INTRINSICS,
        category=category,
        depth_a=_cast(box, rot_a, centre_a, INTRINSICS, 1)[2].reshape(HEIGHT, WIDTH),
        baseline=float(np.linalg.norm(centre_b)),
    )


def build_benchmark(out_dir: str | Path, n_pairs: int = 50, seed: int = 0) -> Path:
    """Write ``n_pairs`` scenes (PNG + NIOH heatmaps) and a manifest; return its path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    motifs = motif_pool(seed)
    size = (WIDTH, HEIGHT)
    lines = []
    for i in range(n_pairs):
        pair_id = f"synth_{i:04d}"
        scene = make_scene(derive_seed(seed, pair_id), motifs, CATEGORIES[i % len(CATEGORIES)])
        record = {"pair_id": pair_id, "category": scene.category}
        for side, image, box in (("a", scene.image_a, scene.box_a), ("b", scene.image_b, scene.box_b)):
            img_rel = f"images/{pair_id}_{side}.png"
            hm_rel = f"heatmaps/{pair_id}_{side}.nioh"
            save_image(out_dir / img_rel, image)
            save_heatmap(out_dir / hm_rel, synth_heatmap([box], size))
            k = scene.intrinsics
            record[f"image_{side}"] = img_rel
            record[f"intrinsics_{side}"] = [k.fx, k.fy, k.cx, k.cy]
            record[f"heatmaps_{side}"] = [hm_rel]
        record["gt_pose"] = {
            "rotation": scene.pose.rotation.reshape(-1).tolist(),
            "translation": scene.pose.translation.tolist(),
        }
        lines.append(json.dumps(record))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
