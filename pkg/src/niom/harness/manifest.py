"""JSON-lines pair manifests.

One object per line::

    {"pair_id": "p0", "image_a": "a.png", "image_b": "b.png",
     "intrinsics_a": [fx, fy, cx, cy], "intrinsics_b": [fx, fy, cx, cy],
     "category": "SameObject",
     "gt_pose": {"rotation": [9 floats, row-major], "translation": [3 floats]},
     "keypoints_a": "a.niok", "heatmaps_a": ["a.nioh", ...], ...}

``gt_pose``, ``keypoints_*`` and ``heatmaps_*`` are optional. Relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import CameraIntrinsics, RelativePose


class Category(str, enum.Enum):
    SAME_OBJECT = "SameObject"
    SAME_APPEARANCE = "SameAppearance"
    SAME_CLASS = "SameClass"
    CLASS_DISCREPANCY = "ClassDiscrepancy"
    DOMAIN_SHIFT = "DomainShift"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    image_a: Path
    image_b: Path
    intrinsics_a: CameraIntrinsics
    intrinsics_b: CameraIntrinsics
    category: Category = Category.SAME_OBJECT
    gt_pose: RelativePose | None = None
    keypoints_a: Path | None = None
    keypoints_b: Path | None = None
    heatmaps_a: tuple[Path, ...] = field(default=())
    heatmaps_b: tuple[Path, ...] = field(default=())

    def to_json(self, base: Path | None = None) -> dict:
        def rel(p: Path) -> str:
            if base is not None:
                try:
                    return str(Path(p).resolve().relative_to(base.resolve()))
                except ValueError:
                    pass
            return str(p)

        k_a, k_b = self.intrinsics_a, self.intrinsics_b
        out = {
            "pair_id": self.pair_id,
            "image_a": rel(self.image_a),
            "image_b": rel(self.image_b),
            "intrinsics_a": [k_a.fx, k_a.fy, k_a.cx, k_a.cy],
            "intrinsics_b": [k_b.fx, k_b.fy, k_b.cx, k_b.cy],
            "category": self.category.value,
        }
        if self.gt_pose is not None:
            out["gt_pose"] = {
                "rotation": self.gt_pose.rotation.reshape(-1).tolist(),
                "translation": self.gt_pose.translation.tolist(),
            }
        for side in "ab":
            kp = getattr(self, f"keypoints_{side}")
            if kp is not None:
                out[f"keypoints_{side}"] = rel(kp)
            hms = getattr(self, f"heatmaps_{side}")
            if hms:
                out[f"heatmaps_{side}"] = [rel(h) for h in hms]
        return out


def _intrinsics(value, key: str) -> CameraIntrinsics:
    if isinstance(value, dict):
        value = [value.get(k) for k in ("fx", "fy", "cx", "cy")]
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ValueError(f"{key} must be [fx, fy, cx, cy]")
    return CameraIntrinsics(*(float(v) for v in value))


def _pose(value) -> RelativePose:
    r = np.asarray(value["rotation"], dtype=np.float64)
    t = np.asarray(value["translation"], dtype=np.float64)
    if r.size != 9 or t.size != 3:
        raise ValueError("gt_pose needs 9 rotation and 3 translation values")
    # rotations written with float text round-tripping are orthonormal to ~1e-16
    return RelativePose(r.reshape(3, 3), t)


def _existing(base: Path, value, key: str) -> Path:
    if not isinstance(value, str):
        raise ValueError(f"{key} must be a path string")
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise FileNotFoundError(f"{key}: {path} does not exist")
    return path


def parse_record(obj: dict, base: Path, require_pose: bool = False) -> PairRecord:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    for key in ("pair_id", "image_a", "image_b"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    for key in ("intrinsics_a", "intrinsics_b"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    if require_pose and "gt_pose" not in obj:
        raise ValueError("missing gt_pose but pose evaluation was requested")

    def heatmaps(side):
        value = obj.get(f"heatmaps_{side}", [])
        if isinstance(value, str):
            value = [value]
        return tuple(_existing(base, v, f"heatmaps_{side}") for v in value)

    def keypoints(side):
        value = obj.get(f"keypoints_{side}")
        return None if value is None else _existing(base, value, f"keypoints_{side}")

    return PairRecord(
        pair_id=str(obj["pair_id"]),
        image_a=_existing(base, obj["image_a"], "image_a"),
        image_b=_existing(base, obj["image_b"], "image_b"),
        intrinsics_a=_intrinsics(obj["intrinsics_a"], "intrinsics_a"),
        intrinsics_b=_intrinsics(obj["intrinsics_b"], "intrinsics_b"),
        category=Category(obj.get("category", Category.SAME_OBJECT.value)),
        gt_pose=_pose(obj["gt_pose"]) if obj.get("gt_pose") is not None else None,
        keypoints_a=keypoints("a"),
        keypoints_b=keypoints("b"),
        heatmaps_a=heatmaps("a"),
        heatmaps_b=heatmaps("b"),
    )


def load_manifest(path: str | Path, require_pose: bool = False) -> list[PairRecord]:
    """Parse and validate a manifest; errors name the offending line."""
    path = Path(path)
    base = path.parent
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = parse_record(json.loads(line), base, require_pose)
            except (ValueError, KeyError, TypeError, FileNotFoundError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.pair_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate pair_id {rec.pair_id!r}")
            seen.add(rec.pair_id)
            records.append(rec)
    return records


def write_manifest(path: str | Path, records) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(path.parent)) + "\n")
