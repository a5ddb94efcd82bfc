"""Score matrices, partial assignment and match extraction.

Attention scores follow a single transformer matching layer: queries and keys are
linear projections of the (weighted) descriptors, and self-attention applies
a rotary encoding of the relative keypoint position. Because projection is
linear and the rotary map is a rotation, per-keypoint descriptor weights
come out of every score as the product of the two weights involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from . import formats
from .weighting import WeightedDescriptorSet

MIN_WAVELENGTH = 4.0
MAX_WAVELENGTH = 1024.0


def rotary_frequencies(d: int) -> np.ndarray:
    """``(d/2, 2)`` angular frequency vectors, one per 2-block.

    Wavelengths are log-spaced from 4 px to 1024 px; successive blocks
    alternate between the x and y axis.
    """
    if d % 2:
        raise ValueError(f"rotary encoding needs an even dimension, got {d}")
    blocks = d // 2
    if blocks == 1:
        wavelengths = np.array([MIN_WAVELENGTH])
    else:
        wavelengths = np.geomspace(MIN_WAVELENGTH, MAX_WAVELENGTH, blocks)
    freqs = np.zeros((blocks, 2))
    axis = np.arange(blocks) % 2
    freqs[np.arange(blocks), axis] = 2.0 * np.pi / wavelengths
    return freqs


def rotary_rotate(v: np.ndarray, delta_p, frequencies: np.ndarray | None = None) -> np.ndarray:
    """Apply the block-diagonal rotation ``R(delta_p)`` to ``v``.

    ``v`` may be a single d-vector or an ``(n, d)`` batch; ``delta_p`` is a
    2-vector or an ``(n, 2)`` batch of pixel displacements.
    """
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    if d % 2:
        raise ValueError(f"rotary encoding needs an even dimension, got {d}")
    if frequencies is None:
        frequencies = rotary_frequencies(d)
    delta_p = np.asarray(delta_p, dtype=np.float64)
    if not np.all(np.isfinite(delta_p)):
        raise ValueError("non-finite displacement")
    theta = delta_p @ frequencies.T  # (..., d/2)
    c, s = np.cos(theta), np.sin(theta)
    x, y = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, c.shape[:-1] + (d,)))
    out[..., 0::2] = c * x - s * y
    out[..., 1::2] = s * x + c * y
    return out


@dataclass(frozen=True)
class ProjectionWeights:
    w_q: np.ndarray
    w_k: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite entries")
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k must have the same shape")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random(cls, d: int, seed: int = 0) -> "ProjectionWeights":
        """Seeded Gaussian projections with standard deviation 1/sqrt(d)."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d)
        return cls(rng.normal(0.0, scale, (d, d)), rng.normal(0.0, scale, (d, d)))

    @classmethod
    def identity(cls, d: int) -> "ProjectionWeights":
        return cls(np.eye(d), np.eye(d))

    @classmethod
    def load(cls, path: str | Path) -> "ProjectionWeights":
        return cls(*formats.read_niow(path))

    def save(self, path: str | Path) -> None:
        formats.write_niow(path, self.w_q, self.w_k)


def _check_dim(set_: WeightedDescriptorSet, d: int) -> None:
    if len(set_) and set_.dim != d:
        raise ValueError(f"descriptor dimension {set_.dim} does not match {d}")


def self_attention_scores(set_: WeightedDescriptorSet, proj: ProjectionWeights) -> np.ndarray:
    """Pre-softmax self-attention ``q_i^T R(p_j - p_i) k_j`` of one image.

    Uses ``R(p_j - p_i) = R(p_i)^T R(p_j)``, so each side is rotated once.
    """
    _check_dim(set_, proj.dim)
    n = len(set_)
    if n == 0:
        return np.zeros((0, 0))
    freqs = rotary_frequencies(proj.dim)
    q = set_.weighted @ proj.w_q.T
    k = set_.weighted @ proj.w_k.T
    return rotary_rotate(q, set_.positions, freqs) @ rotary_rotate(k, set_.positions, freqs).T


def cross_attention_scores(
    set_a: WeightedDescriptorSet, set_b: WeightedDescriptorSet, proj: ProjectionWeights
) -> np.ndarray:
    """Key-key cross-attention scores between two images."""
    _check_dim(set_a, proj.dim)
    _check_dim(set_b, proj.dim)
    if len(set_a) == 0 or len(set_b) == 0:
        return np.zeros((len(set_a), len(set_b)))
    return (set_a.weighted @ proj.w_k.T) @ (set_b.weighted @ proj.w_k.T).T


def similarity_matrix(set_a: WeightedDescriptorSet, set_b: WeightedDescriptorSet) -> np.ndarray:
    """Dot-product similarity of the weighted descriptors."""
    if len(set_a) and len(set_b) and set_a.dim != set_b.dim:
        raise ValueError(f"descriptor dimensions differ: {set_a.dim} vs {set_b.dim}")
    if len(set_a) == 0 or len(set_b) == 0:
        return np.zeros((len(set_a), len(set_b)))
    return set_a.weighted @ set_b.weighted.T


@dataclass(frozen=True)
class Assignment:
    """Soft partial assignment with one trailing dustbin row and column.

    The dustbin column of row ``k`` holds ``1 - sum_l m_kl`` (the unmatched
    mass of keypoint ``k``); the dustbin row is defined symmetrically and
    the dustbin corner is zero.
    """

    matrix: np.ndarray
    tolerance: float = 1e-3

    @property
    def core(self) -> np.ndarray:
        return self.matrix[:-1, :-1]

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.matrix.shape
        return rows - 1, cols - 1

    def check(self) -> None:
        m, eps = self.matrix, self.tolerance
        if np.any(m < 0) or np.any(m > 1):
            raise AssertionError("assignment entry outside [0, 1]")
        if np.any(self.core.sum(axis=1) > 1 + eps) or np.any(self.core.sum(axis=0) > 1 + eps):
            raise AssertionError("assignment row or column sum exceeds 1")


def sinkhorn_assign(
    scores: np.ndarray,
    dustbin_score: float = 0.0,
    temperature: float = 0.1,
    iterations: int = 50,
) -> Assignment:
    """Entropic partial assignment with dustbins, solved in the log domain.

    Every real keypoint carries unit mass; the dustbin of each image can
    absorb up to all keypoints of the other image. After the Sinkhorn
    rounds, rows and then columns whose real mass still exceeds one are
    scaled down, so the sub-stochastic constraints hold exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_a, n_b = scores.shape
    if n_a == 0 or n_b == 0:
        m = np.zeros((n_a + 1, n_b + 1))
        m[:n_a, n_b] = 1.0
        m[n_a, :n_b] = 1.0
        return Assignment(m)

    couplings = np.full((n_a + 1, n_b + 1), float(dustbin_score))
    couplings[:n_a, :n_b] = scores
    logk = couplings / temperature
    log_mu = np.concatenate([np.zeros(n_a), [np.log(n_b)]])
    log_nu = np.concatenate([np.zeros(n_b), [np.log(n_a)]])
    u = np.zeros(n_a + 1)
    v = np.zeros(n_b + 1)
    for _ in range(iterations):
        # logsumexp subtracts the per-row maximum before exponentiating
        u = log_mu - logsumexp(logk + v[None, :], axis=1)
        v = log_nu - logsumexp(logk + u[:, None], axis=0)
    p = np.exp(logk + u[:, None] + v[None, :])[:n_a, :n_b]

    rows = p.sum(axis=1)
    p /= np.maximum(rows, 1.0)[:, None]
    cols = p.sum(axis=0)
    p /= np.maximum(cols, 1.0)[None, :]
    p = np.clip(p, 0.0, 1.0)

    m = np.zeros((n_a + 1, n_b + 1))
    m[:n_a, :n_b] = p
    m[:n_a, n_b] = np.clip(1.0 - p.sum(axis=1), 0.0, 1.0)
    m[n_a, :n_b] = np.clip(1.0 - p.sum(axis=0), 0.0, 1.0)
    return Assignment(m)


class Match(NamedTuple):
    index_a: int
    index_b: int
    confidence: float


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple[Match, ...] = ()

    def __post_init__(self):
        a = [m.index_a for m in self.pairs]
        b = [m.index_b for m in self.pairs]
        if len(set(a)) != len(a) or len(set(b)) != len(b):
            raise ValueError("match set is not one-to-one")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def indices(self) -> np.ndarray:
        return np.array([(m.index_a, m.index_b) for m in self.pairs], dtype=np.intp).reshape(-1, 2)

    @property
    def confidences(self) -> np.ndarray:
        return np.array([m.confidence for m in self.pairs], dtype=np.float64)

    @classmethod
    def from_arrays(cls, ia, ib, conf) -> "MatchSet":
        return cls(tuple(Match(int(i), int(j), float(c)) for i, j, c in zip(ia, ib, conf)))

    def to_csv(self, path: str | Path) -> None:
        lines = ["index_a,index_b,confidence"]
        lines += [f"{m.index_a},{m.index_b},{m.confidence:.9g}" for m in self.pairs]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "MatchSet":
        rows = Path(path).read_text().splitlines()
        if not rows or rows[0].strip() != "index_a,index_b,confidence":
            raise ValueError(f"{path}: missing index_a,index_b,confidence header")
        out = []
        for line in rows[1:]:
            if line.strip():
                i, j, c = line.split(",")
                out.append(Match(int(i), int(j), float(c)))
        return cls(tuple(out))


def extract_matches(
    assignment: Assignment, scores: np.ndarray | None = None, min_confidence: float = 0.0
) -> MatchSet:
    """Keep ``(k, l)`` when ``m_kl`` is the strict maximum of its row and column."""
    core = assignment.core
    n_a, n_b = core.shape
    if scores is not None and np.shape(scores) != (n_a, n_b):
        raise ValueError(f"scores shape {np.shape(scores)} does not match assignment {core.shape}")
    if n_a == 0 or n_b == 0:
        return MatchSet()
    best_l = np.argmax(core, axis=1)
    best_k = np.argmax(core, axis=0)
    rows = np.arange(n_a)
    val = core[rows, best_l]
    mutual = best_k[best_l] == rows
    # strictness: the maximum must be unique in both its row and its column
    row_unique = (core == val[:, None]).sum(axis=1) == 1
    col_unique = (core[:, best_l] == val[None, :]).sum(axis=0) == 1
    keep = mutual & row_unique & col_unique & (val >= min_confidence)
    idx = np.nonzero(keep)[0]
    return MatchSet.from_arrays(idx, best_l[idx], val[idx])


def mnn_match(
    set_a: WeightedDescriptorSet,
    set_b: WeightedDescriptorSet,
    ratio: float = 0.9,
    min_similarity: float = 0.5,
) -> MatchSet:
    """Mutual nearest neighbours by dot similarity with a ratio test.

    A pair survives when the second-best similarity of the A-side keypoint
    is at most ``ratio`` times the best, and the best is at least
    ``min_similarity``.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    sim = similarity_matrix(set_a, set_b)
    n_a, n_b = sim.shape
    if n_a == 0 or n_b == 0:
        return MatchSet()
    best_j = np.argmax(sim, axis=1)
    best_i = np.argmax(sim, axis=0)
    rows = np.arange(n_a)
    best = sim[rows, best_j]
    if n_b > 1:
        second = np.partition(sim, n_b - 2, axis=1)[:, n_b - 2]
        ratio_ok = second <= ratio * best
    else:
        ratio_ok = np.ones(n_a, dtype=bool)
    keep = (best_i[best_j] == rows) & ratio_ok & (best >= min_similarity)
    idx = np.nonzero(keep)[0]
    return MatchSet.from_arrays(idx, best_j[idx], np.clip(best[idx], 0.0, 1.0))
