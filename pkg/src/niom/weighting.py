"""Heatmap-driven descriptor weighting.

With ``H_i`` the aggregated heatmap sampled at keypoint ``i`` of one image,
the default mode scales each descriptor by ``(1 + H_i) / max_j (1 + H_j)``.
The maximum runs over the keypoints of a single image, so weights lie in
[0.5, 1] and the most salient keypoint keeps its descriptor untouched.

Two ablations are kept for comparison runs: the raw heatmap score as the
weight, and ``1 + H_i`` without normalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .heatmap import Heatmap, sample_many


class WeightMode(str, enum.Enum):
    PAPER = "paper"
    RAW = "raw"
    PLUS_ONE = "plus-one"
    NONE = "none"


def weights_from_scores(scores: np.ndarray, mode: WeightMode | str) -> np.ndarray:
    mode = WeightMode(mode)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite heatmap score")
    if scores.size == 0:
        return np.zeros(0)
    if mode is WeightMode.PAPER:
        shifted = 1.0 + scores
        return shifted / shifted.max()
    if mode is WeightMode.RAW:
        return scores.copy()
    if mode is WeightMode.PLUS_ONE:
        return 1.0 + scores
    return np.ones_like(scores)


def compute_weights(positions, h: Heatmap, mode: WeightMode | str) -> np.ndarray:
    """Per-keypoint weights for ``positions`` (an ``(n, 2)`` array of x, y)."""
    return weights_from_scores(sample_many(h, positions), mode)


def apply_weights(descriptors, weights) -> np.ndarray:
    descriptors = np.asarray(descriptors, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if descriptors.shape[0] != weights.shape[0]:
        raise ValueError(
            f"{descriptors.shape[0]} descriptors but {weights.shape[0]} weights"
        )
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("weights must be finite and non-negative")
    return descriptors * weights[:, None]


@dataclass(frozen=True)
class WeightedDescriptorSet:
    """Keypoints with their raw descriptors, weights and weighted descriptors.

    The weights are retained next to the product so that score identities
    can be checked from both sides.
    """

    positions: np.ndarray
    descriptors: np.ndarray
    weights: np.ndarray
    weighted: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        if not (self.descriptors.shape[0] == self.weights.shape[0] == self.weighted.shape[0] == n):
            raise ValueError("positions, descriptors and weights must share length")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @classmethod
    def build(cls, positions, descriptors, weights=None) -> "WeightedDescriptorSet":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        descriptors = np.asarray(descriptors, dtype=np.float64)
        if descriptors.ndim != 2:
            descriptors = descriptors.reshape(positions.shape[0], -1)
        if weights is None:
            weights = np.ones(positions.shape[0])
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        return cls(positions, descriptors, weights, apply_weights(descriptors, weights))


def weight_descriptors(
    positions, descriptors, h: Heatmap, mode: WeightMode | str = WeightMode.PAPER
) -> WeightedDescriptorSet:
    weights = compute_weights(positions, h, mode)
    return WeightedDescriptorSet.build(positions, descriptors, weights)
