"""Pair-level pipeline: detect, heatmap, weight, match, evaluate.

Every pair gets its own seed derived from the global seed and its id, and
results are collected in pair_id order, so the worker count never changes
a report. Any exception inside a pair is caught and recorded as a flagged
180 degree failure.
"""

from __future__ import annotations

import json
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import formats
from ..corruptions import CorruptionKind, CorruptionSpec, Side, corrupt_pair, derive_seed
from ..features import FeatureConfig, detect_and_describe
from ..geometry import (
    FAILED_POSE_ERROR,
    NoModelFound,
    auc,
    normalize_points,
    pose_error,
    ransac_essential,
    sampson_distance,
)
from ..heatmap import Heatmap, aggregate, load_heatmap
from ..imageio import load_image
from ..matching import MatchSet, extract_matches, mnn_match, similarity_matrix, sinkhorn_assign
from ..weighting import WeightedDescriptorSet, WeightMode, compute_weights
from .manifest import PairRecord

THRESHOLDS = (5.0, 10.0, 20.0)
MATCHERS = ("mnn", "sinkhorn")


@dataclass(frozen=True)
class RunConfig:
    weight_mode: WeightMode = WeightMode.PAPER
    matcher: str = "mnn"
    corruption: CorruptionSpec | None = None
    side: Side = Side.BOTH
    max_keypoints: int = 2048
    detector_threshold: float = 1e-9
    nms_radius: float = 4.0
    blur_sigma: float = 1.0
    ratio: float = 0.9
    min_similarity: float = 0.3
    dustbin_score: float = 0.0
    temperature: float = 0.1
    sinkhorn_iterations: int = 50
    min_confidence: float = 0.0
    ransac_threshold_px: float = 2.0
    ransac_max_iters: int = 2000
    ransac_confidence: float = 0.999
    inlier_threshold_px: float = 2.0
    global_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "side", Side(self.side))
        if isinstance(self.corruption, dict):
            object.__setattr__(self, "corruption", CorruptionSpec(**self.corruption))
        if self.matcher not in MATCHERS:
            raise ValueError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be positive")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.ransac_threshold_px <= 0 or self.inlier_threshold_px <= 0:
            raise ValueError("pixel thresholds must be positive")

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(self.max_keypoints, self.nms_radius, self.detector_threshold, self.blur_sigma)

    @property
    def method(self) -> str:
        return f"{self.matcher}+{self.weight_mode.value}"

    @property
    def condition(self) -> str:
        """Row label: the corruption kind, or Clean."""
        c = self.corruption
        if c is None or c.severity == 0:
            return "Clean"
        return c.kind.label

    def to_json(self) -> dict:
        out = asdict(self)
        out["weight_mode"] = self.weight_mode.value
        out["side"] = self.side.value
        if self.corruption is not None:
            c = self.corruption
            out["corruption"] = {"kind": c.kind.value, "severity": int(c.severity), "seed": int(c.seed)}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        return cls(**obj)


@dataclass(frozen=True)
class PairResult:
    pair_id: str
    category: str
    num_keypoints_a: int = 0
    num_keypoints_b: int = 0
    num_matches: int = 0
    num_correct: int = 0
    pose_error: float | None = None
    time_ms: float = 0.0
    failed: bool = False
    message: str = ""

    @property
    def inlier_precision(self) -> float | None:
        """Fraction of matches consistent with the true pose; 0 without matches."""
        if self.pose_error is None and self.num_correct == 0 and not self.num_matches:
            return None
        return self.num_correct / self.num_matches if self.num_matches else 0.0

    def without_time(self) -> "PairResult":
        return replace(self, time_ms=0.0)


@dataclass
class RunReport:
    config: RunConfig
    records: list[PairResult] = field(default_factory=list)

    @property
    def condition(self) -> str:
        return self.config.condition

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def errors(self) -> list[float]:
        return [r.pose_error for r in self.records if r.pose_error is not None]

    def auc(self) -> list[float] | None:
        errs = self.errors
        return auc(errs, THRESHOLDS) if errs else None

    @property
    def mean_matches(self) -> float:
        return float(np.mean([r.num_matches for r in self.records])) if self.records else 0.0

    @property
    def median_time_ms(self) -> float:
        return statistics.median(r.time_ms for r in self.records) if self.records else 0.0

    def aggregates(self) -> dict:
        return {
            "condition": self.condition,
            "method": self.method,
            "auc": None if self.auc() is None else dict(zip(("5", "10", "20"), self.auc())),
            "mean_matches": self.mean_matches,
            "median_time_ms": self.median_time_ms,
            "num_failed": sum(r.failed for r in self.records),
        }

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunReport":
        return cls(RunConfig.from_json(obj["config"]), [PairResult(**r) for r in obj["records"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def worker_count(requested: int | None = None) -> int:
    """Requested workers (default: CPU count), capped by ``NIOM_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("NIOM_THREADS")
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ValueError(f"NIOM_THREADS must be a positive integer, got {cap!r}") from None
        if cap_n < 1:
            raise ValueError(f"NIOM_THREADS must be a positive integer, got {cap!r}")
        n = min(n, cap_n)
    return max(1, n)


def _heatmap(paths, size) -> Heatmap:
    if not paths:
        return Heatmap.zeros(size)
    return aggregate([load_heatmap(p, size) for p in paths])


def _features(path, image, config: RunConfig):
    if path is not None:
        kf = formats.read_niok(path)
        return kf.positions.astype(np.float64), kf.descriptors.astype(np.float64)
    ds = detect_and_describe(image, config.features)
    return ds.positions, ds.descriptors


def match_sets(set_a: WeightedDescriptorSet, set_b: WeightedDescriptorSet, config: RunConfig) -> MatchSet:
    if config.matcher == "mnn":
        return mnn_match(set_a, set_b, ratio=config.ratio, min_similarity=config.min_similarity)
    scores = similarity_matrix(set_a, set_b)
    assignment = sinkhorn_assign(scores, config.dustbin_score, config.temperature, config.sinkhorn_iterations)
    return extract_matches(assignment, min_confidence=config.min_confidence)


def prepare_pair(rec: PairRecord, config: RunConfig):
    """Load (and corrupt) the images and build both weighted descriptor sets."""
    image_a, image_b = load_image(rec.image_a), load_image(rec.image_b)
    if config.corruption is not None:
        image_a, image_b = corrupt_pair(rec.pair_id, image_a, image_b, config.corruption, config.side)
    sets = []
    for image, kp_path, hm_paths in ((image_a, rec.keypoints_a, rec.heatmaps_a),
                                     (image_b, rec.keypoints_b, rec.heatmaps_b)):
        size = (image.shape[1], image.shape[0])
        positions, descriptors = _features(kp_path, image, config)
        weights = compute_weights(positions, _heatmap(hm_paths, size), config.weight_mode)
        sets.append(WeightedDescriptorSet.build(positions, descriptors, weights))
    return image_a, image_b, sets[0], sets[1]


def _correct_matches(rec: PairRecord, set_a, set_b, matches: MatchSet, threshold_px: float) -> int:
    if rec.gt_pose is None or len(matches) == 0:
        return 0
    idx = matches.indices
    x_a = normalize_points(set_a.positions[idx[:, 0]], rec.intrinsics_a)
    x_b = normalize_points(set_b.positions[idx[:, 1]], rec.intrinsics_b)
    focal = 0.5 * (rec.intrinsics_a.mean_focal + rec.intrinsics_b.mean_focal)
    return int(np.sum(sampson_distance(rec.gt_pose.essential, x_a, x_b) < threshold_px / focal))


def process_pair(rec: PairRecord, config: RunConfig) -> PairResult:
    start = time.perf_counter()
    counts = {}
    try:
        _, _, set_a, set_b = prepare_pair(rec, config)
        counts = {"num_keypoints_a": len(set_a), "num_keypoints_b": len(set_b)}
        matches = match_sets(set_a, set_b, config)
        counts["num_matches"] = len(matches)
        counts["num_correct"] = _correct_matches(rec, set_a, set_b, matches, config.inlier_threshold_px)
        err, failed, message = None, False, ""
        if rec.gt_pose is not None:
            idx = matches.indices
            focal = 0.5 * (rec.intrinsics_a.mean_focal + rec.intrinsics_b.mean_focal)
            try:
                if len(matches) < 8:
                    raise NoModelFound(f"only {len(matches)} matches")
                est = ransac_essential(
                    normalize_points(set_a.positions[idx[:, 0]], rec.intrinsics_a),
                    normalize_points(set_b.positions[idx[:, 1]], rec.intrinsics_b),
                    threshold=config.ransac_threshold_px / focal,
                    max_iters=config.ransac_max_iters,
                    confidence=config.ransac_confidence,
                    seed=derive_seed(config.global_seed, rec.pair_id),
                )
                err = pose_error(est.pose, rec.gt_pose)
            except NoModelFound as exc:
                err, failed, message = FAILED_POSE_ERROR, True, f"no model: {exc}"
    except Exception as exc:  # crash isolation: record and move on
        err = FAILED_POSE_ERROR if rec.gt_pose is not None else None
        failed, message = True, f"{type(exc).__name__}: {exc}"
    elapsed = (time.perf_counter() - start) * 1e3
    return PairResult(rec.pair_id, rec.category.value, pose_error=err, time_ms=elapsed,
                      failed=failed, message=message, **counts)


def run_pipeline(pairs: list[PairRecord], config: RunConfig, workers: int | None = None,
                 warmup: bool = True) -> RunReport:
    """Run every pair; results are ordered by pair_id.

    One untimed warm-up pass over the first pair runs before the timed
    ones, so lazy imports and caches do not inflate the first timing.
    """
    if not pairs:
        raise ValueError("run_pipeline needs at least one pair")
    if warmup:
        process_pair(pairs[0], config)
    n = min(worker_count(workers), len(pairs))
    if n == 1:
        results = [process_pair(p, config) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda p: process_pair(p, config), pairs))
    return RunReport(config, sorted(results, key=lambda r: r.pair_id))


def corruption_runs(pairs, base: RunConfig, kinds, severity: int, side: Side | str,
                    workers: int | None = None) -> list[RunReport]:
    """One run per corruption kind at a fixed severity."""
    return [
        run_pipeline(pairs, replace(base, corruption=CorruptionSpec(CorruptionKind(k), severity,
                                                                     base.global_seed), side=Side(side)),
                     workers)
        for k in kinds
    ]
