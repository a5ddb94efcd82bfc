"""Calibrated two-view geometry and the pose-AUC metric.

Conventions: a point ``X`` in camera-A coordinates maps to ``R X + t`` in
camera B, the essential matrix is ``E = [t]_x R`` and corresponding
normalized image points satisfy ``x_b^T E x_a = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

FAILED_POSE_ERROR = 180.0
_BATCH = 64


class DegenerateConfiguration(ValueError):
    pass


class NoModelFound(RuntimeError):
    """RANSAC found no model with enough support."""


class CheiralityError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not all(math.isfinite(v) for v in (self.fx, self.fy, self.cx, self.cy)):
            raise ValueError("intrinsics must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        norm = np.linalg.norm(t)
        if norm == 0:
            raise ValueError("translation direction must be non-zero")
        if abs(norm - 1.0) > 1e-9:
            t = t / norm
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def essential(self) -> np.ndarray:
        return skew(self.translation) @ self.rotation


@dataclass
class PoseEstimate:
    essential: np.ndarray
    pose: RelativePose
    inlier_indices: np.ndarray
    num_iterations: int


def normalize_points(points, k: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([(pts[:, 0] - k.cx) / k.fx, (pts[:, 1] - k.cy) / k.fy], axis=1)


def denormalize_points(points, k: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([pts[:, 0] * k.fx + k.cx, pts[:, 1] * k.fy + k.cy], axis=1)


def _homogeneous(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def project_to_essential(e: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values (1, 1, 0), so ``||E||_F = sqrt(2)``."""
    u, s, vt = np.linalg.svd(e)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def essential_8pt(x_a, x_b, row_weights=None) -> np.ndarray:
    """Linear least-squares essential matrix from >= 8 normalized pairs.

    ``row_weights`` optionally scales each epipolar equation; the RANSAC
    refit uses it to turn the algebraic error into a Sampson error.
    """
    x_a = np.asarray(x_a, dtype=np.float64).reshape(-1, 2)
    x_b = np.asarray(x_b, dtype=np.float64).reshape(-1, 2)
    n = x_a.shape[0]
    if n < 8 or x_b.shape[0] != n:
        raise ValueError(f"need at least 8 correspondences, got {n}")
    t_a, t_b = _conditioning(x_a), _conditioning(x_b)
    ha = _homogeneous(x_a) @ t_a.T
    hb = _homogeneous(x_b) @ t_b.T
    # row i is kron(x_b, x_a) so that A @ vec(E) = x_b^T E x_a
    design = (hb[:, :, None] * ha[:, None, :]).reshape(n, 9)
    if row_weights is not None:
        design = design * np.asarray(row_weights, dtype=np.float64).reshape(n, 1)
    _, s, vt = np.linalg.svd(design, full_matrices=True)
    # full_matrices keeps all 9 right singular vectors even for n = 8
    s = np.concatenate([s, np.zeros(9 - s.size)])
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("design matrix has a multi-dimensional null space")
    e = t_b.T @ vt[-1].reshape(3, 3) @ t_a
    return project_to_essential(e)


def _essential_8pt_batch(x_a: np.ndarray, x_b: np.ndarray):
    """:func:`essential_8pt` on ``k`` minimal samples at once.

    ``x_a`` and ``x_b`` are ``(k, 8, 2)``. Returns the ``(k, 3, 3)`` models and
    a mask of the non-degenerate samples.
    """
    k, n, _ = x_a.shape

    def conditioned(x):
        centre = x.mean(axis=1, keepdims=True)
        radius = np.mean(np.linalg.norm(x - centre, axis=2), axis=1)
        scale = np.where(radius > 0, np.sqrt(2.0) / np.where(radius > 0, radius, 1.0), 1.0)
        t = np.zeros((k, 3, 3))
        t[:, 0, 0] = t[:, 1, 1] = scale
        t[:, :2, 2] = -scale[:, None] * centre[:, 0, :]
        t[:, 2, 2] = 1.0
        h = np.concatenate([(x - centre) * scale[:, None, None], np.ones((k, n, 1))], axis=2)
        return t, h

    t_a, ha = conditioned(x_a)
    t_b, hb = conditioned(x_b)
    design = (hb[:, :, :, None] * ha[:, :, None, :]).reshape(k, n, 9)
    _, s, vt = np.linalg.svd(design, full_matrices=True)
    s = np.concatenate([s, np.zeros((k, 9 - s.shape[1]))], axis=1)
    ok = s[:, 7] > 1e-10 * s[:, 0]
    e = np.transpose(t_b, (0, 2, 1)) @ vt[:, -1].reshape(k, 3, 3) @ t_a
    u, _, vt3 = np.linalg.svd(e)
    return u @ (np.array([1.0, 1.0, 0.0])[None, :, None] * vt3), ok


def _sampson_batch(e: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """Sampson distances of all points under ``k`` models, ``(k, n)``."""
    ha, hb = _homogeneous(x_a), _homogeneous(x_b)
    ex = np.einsum("kij,nj->kni", e, ha)
    etx = np.einsum("kji,nj->kni", e, hb)
    num = np.einsum("nj,knj->kn", hb, ex)
    den = ex[..., 0] ** 2 + ex[..., 1] ** 2 + etx[..., 0] ** 2 + etx[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(den > 0, d, np.inf)


def _conditioning(x: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean radius to sqrt(2)."""
    centre = x.mean(axis=0)
    radius = np.mean(np.linalg.norm(x - centre, axis=1))
    scale = np.sqrt(2.0) / radius if radius > 0 else 1.0
    return np.array([[scale, 0, -scale * centre[0]], [0, scale, -scale * centre[1]], [0, 0, 1.0]])


def epipolar_residuals(e: np.ndarray, x_a, x_b) -> np.ndarray:
    ha, hb = _homogeneous(np.asarray(x_a).reshape(-1, 2)), _homogeneous(np.asarray(x_b).reshape(-1, 2))
    return np.einsum("ni,ij,nj->n", hb, e, ha)


def _sampson_terms(e, x_a, x_b):
    ha = _homogeneous(np.asarray(x_a, dtype=np.float64).reshape(-1, 2))
    hb = _homogeneous(np.asarray(x_b, dtype=np.float64).reshape(-1, 2))
    ex = ha @ e.T  # rows E x_a
    etx = hb @ e  # rows E^T x_b
    num = np.einsum("ni,ni->n", hb, ex)
    den = ex[:, 0] ** 2 + ex[:, 1] ** 2 + etx[:, 0] ** 2 + etx[:, 1] ** 2
    return num, den


def sampson_distance(e: np.ndarray, x_a, x_b) -> np.ndarray:
    """First-order geometric epipolar error, in normalized image units."""
    num, den = _sampson_terms(e, x_a, x_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(den > 0, d, np.inf)


def triangulate(r: np.ndarray, t: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """Linear (DLT) triangulation in camera-A coordinates, ``(n, 3)``; NaN at infinity."""
    p_a = np.hstack([np.eye(3), np.zeros((3, 1))])
    p_b = np.hstack([r, t.reshape(3, 1)])
    rows = np.stack(
        [
            x_a[:, 0:1] * p_a[2] - p_a[0],
            x_a[:, 1:2] * p_a[2] - p_a[1],
            x_b[:, 0:1] * p_b[2] - p_b[0],
            x_b[:, 1:2] * p_b[2] - p_b[1],
        ],
        axis=1,
    )  # (n, 4, 4)
    _, _, vt = np.linalg.svd(rows)
    xh = vt[:, -1, :]
    # unit-norm solutions with a vanishing last coordinate lie at infinity
    w = np.where(np.abs(xh[:, 3:4]) > 1e-10, xh[:, 3:4], np.nan)
    return xh[:, :3] / w


def _positive_depth_count(r, t, x_a, x_b) -> int:
    pts = triangulate(r, t, x_a, x_b)
    finite = np.all(np.isfinite(pts), axis=1)
    depth_a = pts[:, 2]
    depth_b = pts @ r[2] + t[2]
    return int(np.sum(finite & (depth_a > 0) & (depth_b > 0)))


def decompose_essential(e: np.ndarray, x_a, x_b) -> RelativePose:
    """Pick the (R, t) of the four candidates with most points in front of both cameras."""
    x_a = np.asarray(x_a, dtype=np.float64).reshape(-1, 2)
    x_b = np.asarray(x_b, dtype=np.float64).reshape(-1, 2)
    if x_a.shape[0] < 1:
        raise ValueError("need at least one correspondence for the cheirality test")
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    r1, r2 = u @ w @ vt, u @ w.T @ vt
    t = u[:, 2] / np.linalg.norm(u[:, 2])
    best, best_count = None, 0
    for r in (r1, r2):
        for sign in (1.0, -1.0):
            count = _positive_depth_count(r, sign * t, x_a, x_b)
            if count > best_count:
                best, best_count = (r, sign * t), count
    if best is None:
        raise CheiralityError("no decomposition puts any point in front of both cameras")
    r, t = best
    # re-orthonormalize to remove SVD round-off
    ur, _, vtr = np.linalg.svd(r)
    return RelativePose(ur @ vtr, t)


def _msac_cost(dist: np.ndarray, threshold: float) -> float:
    return float(np.sum(np.minimum(dist, threshold) ** 2))


def _refine(e, x_a, x_b, threshold, rounds):
    """IRLS refit: Sampson-normalized rows with Tukey weights on the residual.

    Intermediate rounds may score worse than their start; the lowest-cost
    model seen is returned.
    """
    best_e = cur = e
    best_cost = _msac_cost(sampson_distance(e, x_a, x_b), threshold)
    for _ in range(rounds):
        num, den = _sampson_terms(cur, x_a, x_b)
        dist = np.abs(num) / np.sqrt(np.maximum(den, 1e-300))
        tukey = np.clip(1.0 - (dist / threshold) ** 2, 0.0, None) ** 2
        use = tukey > 0
        if use.sum() < 8:
            break
        row_w = np.sqrt(tukey[use]) / np.sqrt(np.maximum(den[use], 1e-300))
        try:
            cand = essential_8pt(x_a[use], x_b[use], row_weights=row_w)
        except DegenerateConfiguration:
            break
        cost = _msac_cost(sampson_distance(cand, x_a, x_b), threshold)
        if cost < best_cost:
            best_e, best_cost = cand, cost
        cur = cand
    return best_e, best_cost


def _local_optimize(e, x_a, x_b, threshold, rounds, rng, inner=10, widen=3.0):
    """Inner RANSAC on non-minimal samples of the widened inlier set, then IRLS.

    Minimal 8-point fits are very noise sensitive, so a good sample often
    yields a mediocre model; refitting from larger random inlier subsets
    recovers the consensus it only partly explains.
    """
    best_e, best_cost = _refine(e, x_a, x_b, threshold, rounds)
    pool = np.nonzero(sampson_distance(best_e, x_a, x_b) < widen * threshold)[0]
    size = min(max(pool.size // 2, 8), 16)
    if pool.size <= size:
        return best_e, best_cost
    for _ in range(inner):
        subset = rng.choice(pool, size, replace=False)
        try:
            cand = essential_8pt(x_a[subset], x_b[subset])
        except DegenerateConfiguration:
            continue
        cand, cost = _refine(cand, x_a, x_b, threshold, rounds)
        if cost < best_cost:
            best_e, best_cost = cand, cost
    return best_e, best_cost


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    """Two unit vectors orthogonal to ``t`` and to each other, as rows."""
    helper = np.eye(3)[np.argmin(np.abs(t))]
    b1 = np.cross(t, helper)
    b1 /= np.linalg.norm(b1)
    return np.stack([b1, np.cross(t, b1)])


def refine_pose(pose: RelativePose, x_a, x_b, threshold: float) -> RelativePose:
    """Minimize the robust (Huber) Sampson error over the 5-dof pose.

    The rotation is updated by a rotation vector, the translation direction
    in the tangent plane of the unit sphere; the result stays on the
    essential manifold by construction.
    """
    x_a = np.asarray(x_a, dtype=np.float64).reshape(-1, 2)
    x_b = np.asarray(x_b, dtype=np.float64).reshape(-1, 2)
    r0, t0 = pose.rotation, pose.translation
    basis = _tangent_basis(t0)

    def unpack(p):
        r = Rotation.from_rotvec(p[:3]).as_matrix() @ r0
        t = t0 + p[3:] @ basis
        return r, t / np.linalg.norm(t)

    def residuals(p):
        r, t = unpack(p)
        num, den = _sampson_terms(skew(t) @ r, x_a, x_b)
        return num / np.sqrt(np.maximum(den, 1e-300))

    sol = least_squares(residuals, np.zeros(5), loss="huber", f_scale=threshold, x_scale=1.0,
                        method="trf", max_nfev=50)
    r, t = unpack(sol.x)
    u, _, vt = np.linalg.svd(r)
    return RelativePose(u @ vt, t)


def ransac_essential(
    x_a,
    x_b,
    threshold: float = 1e-3,
    max_iters: int = 2000,
    confidence: float = 0.999,
    seed: int = 0,
    min_support: int = 8,
    refit_rounds: int = 10,
    nonlinear: bool = True,
) -> PoseEstimate:
    """Seeded 8-point RANSAC with Sampson scoring and an iterated inlier refit.

    Hypotheses are ranked by the truncated-quadratic (MSAC) Sampson cost.
    A hypothesis only counts if at least ``min_support`` correspondences
    outside its own minimal sample agree with it; an 8-point sample always
    fits itself, so pure-outlier data would otherwise always "succeed".
    Every new best hypothesis is locally optimized: an inner RANSAC over
    larger samples of its inliers, each refit by reweighted least squares
    with weights vanishing at the threshold. With ``nonlinear`` the final
    pose is polished by :func:`refine_pose` on the inliers, and kept only if
    it lowers the MSAC cost.
    """
    x_a = np.asarray(x_a, dtype=np.float64).reshape(-1, 2)
    x_b = np.asarray(x_b, dtype=np.float64).reshape(-1, 2)
    n = x_a.shape[0]
    if n < 8 or x_b.shape[0] != n:
        raise ValueError(f"need at least 8 correspondences, got {n}")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    best_e, best_cost, best_count = None, np.inf, 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        # hypotheses are fitted and scored in batches, then accepted in order
        batch = min(_BATCH, max_iters - it)
        samples = np.stack([rng.choice(n, 8, replace=False) for _ in range(batch)])
        models, ok = _essential_8pt_batch(x_a[samples], x_b[samples])
        dist = _sampson_batch(models, x_a, x_b)
        mask = dist < threshold
        support = mask.sum(axis=1) - np.take_along_axis(mask, samples, axis=1).sum(axis=1)
        costs = np.sum(np.minimum(dist, threshold) ** 2, axis=1)
        for j in range(batch):
            if it >= min(needed, max_iters):
                break
            it += 1
            if not ok[j] or support[j] < min_support or costs[j] >= best_cost:
                continue
            best_e, best_cost = _local_optimize(models[j], x_a, x_b, threshold, refit_rounds, rng)
            count = int(np.sum(sampson_distance(best_e, x_a, x_b) < threshold))
            if count > best_count:
                best_count = count
                w = count / n
                denom = math.log(max(1e-12, 1.0 - w**8))
                needed = 0 if denom >= 0 else math.ceil(math.log(1.0 - confidence) / denom)
    if best_e is None:
        raise NoModelFound("no essential matrix with enough inlier support")

    inliers = np.nonzero(sampson_distance(best_e, x_a, x_b) < threshold)[0]
    if inliers.size < 8:
        raise NoModelFound("refined model lost its inlier support")
    pose = decompose_essential(best_e, x_a[inliers], x_b[inliers])
    if nonlinear:
        refined = refine_pose(pose, x_a[inliers], x_b[inliers], threshold)
        e = refined.essential
        if _msac_cost(sampson_distance(e, x_a, x_b), threshold) < best_cost:
            best_e, pose = e, refined
            inliers = np.nonzero(sampson_distance(best_e, x_a, x_b) < threshold)[0]
    return PoseEstimate(best_e, pose, inliers, it)


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Angle in radians of ``r_a^T r_b``, accurate near zero."""
    d = r_a.T @ r_b
    cos = (np.trace(d) - 1.0) / 2.0
    axis = np.array([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
    return math.atan2(np.linalg.norm(axis) / 2.0, cos)


def pose_error(est: RelativePose | None, gt: RelativePose) -> float:
    """max(rotation error, translation-direction error) in degrees.

    The translation comparison ignores sign. ``est=None`` marks a failed
    estimation and scores 180 degrees.
    """
    if est is None:
        return FAILED_POSE_ERROR
    rot = rotation_angle(gt.rotation, est.rotation)
    ta, tb = gt.translation, est.translation
    trans = math.atan2(np.linalg.norm(np.cross(ta, tb)), abs(float(ta @ tb)))
    return math.degrees(max(rot, trans))


def auc(errors: Sequence[float], thresholds: Sequence[float] = (5.0, 10.0, 20.0)) -> list[float]:
    """Normalized area under the cumulative error curve up to each threshold.

    The cumulative curve is the right-continuous step function
    ``F(e) = #{errors <= e} / n``; its integral over [0, tau] is the sum of
    the step rectangles between consecutive sorted errors.
    """
    errs = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if errs.size == 0:
        raise ValueError("auc needs at least one error")
    if np.any(errs < 0) or not np.all(np.isfinite(errs)):
        raise ValueError("errors must be finite and non-negative")
    n = errs.size
    out = []
    for tau in thresholds:
        if tau <= 0:
            raise ValueError("thresholds must be positive")
        # F = k/n on [errs[k-1], errs[k]), clipped to [0, tau]
        left = np.minimum(errs, tau)
        right = np.minimum(np.append(errs[1:], tau), tau)
        steps = np.arange(1, n + 1) / n
        area = float(np.sum(steps * (right - left)))
        out.append(area / tau)
    return out
