"""Two-view relative pose from bearing matches.

Estimates the essential matrix with a RANSAC-wrapped 8-point solve
operating directly on unit bearing vectors, so full 360-degree fields of
view are handled without any planar-image assumptions. The recovered
pose (R, t_hat) maps frame-a coordinates into frame b:

    p_b = R @ p_a + s * t_hat        (s > 0 is the unknown metric scale)

which makes E = [t_hat]x @ R satisfy b_b^T E b_a = 0 for true matches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import check_rotation, check_unit, skew
from .panorama import BearingMatchSet

PARALLEL_RAY_TOL = 1e-8


class EstimationError(RuntimeError):
    """RANSAC could not produce a model meeting the inlier requirements."""


class CheiralityError(RuntimeError):
    """Pose disambiguation failed: no candidate wins the depth vote."""


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 1e-3      # |b_b^T E b_a| bound, E normalized to ||E||_F = sqrt(2)
    iterations: int = 2000
    min_inliers: int = 8

    def __post_init__(self):
        if self.threshold <= 0 or self.iterations <= 0 or self.min_inliers < 8:
            raise ValueError(f"invalid RANSAC config: {self}")


@dataclass(frozen=True)
class EssentialEstimate:
    """RANSAC output: projected essential matrix plus its support."""

    matrix: np.ndarray
    inlier_indices: np.ndarray
    low_confidence: bool


@dataclass(frozen=True)
class RelativePose:
    """Rotation and unit translation direction taking frame a into frame b."""

    rotation: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "direction", check_unit(self.direction, 1e-9))


@dataclass(frozen=True)
class TriangulatedSet:
    """Points in frame a at the estimator's unit-baseline scale."""

    points: np.ndarray
    inlier_indices: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


def _eight_point(ba: np.ndarray, bb: np.ndarray) -> np.ndarray | None:
    """Least-squares essential matrix from >= 8 bearing pairs.

    Returns the matrix projected onto the essential manifold
    (singular values (1, 1, 0), Frobenius norm sqrt(2)), or None when
    the constraint system is rank-deficient.
    """
    # Row for pair i is outer(b_b, b_a) flattened row-major, matching E.ravel().
    A = np.einsum("ni,nj->nij", bb, ba).reshape(-1, 9)
    try:
        _, s, vt = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    if s[7] < 1e-12:
        return None  # sample does not constrain all 8 degrees of freedom
    E = vt[-1].reshape(3, 3)
    u, _, v = np.linalg.svd(E)
    return u @ np.diag([1.0, 1.0, 0.0]) @ v


def _residuals(E: np.ndarray, ba: np.ndarray, bb: np.ndarray) -> np.ndarray:
    return np.abs(np.einsum("ni,ij,nj->n", bb, E, ba))


_RANSAC_BATCH = 512


def _batched_candidates(ba: np.ndarray, bb: np.ndarray,
                        idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Essential-manifold candidates for a batch of 8-point samples.

    Returns (E, valid) with E of shape (C, 3, 3); invalid rows come from
    rank-deficient samples.
    """
    sa = ba[idx]                                   # (C, 8, 3)
    sb = bb[idx]
    A = np.einsum("cni,cnj->cnij", sb, sa).reshape(idx.shape[0], 8, 9)
    _, s, vt = np.linalg.svd(A)
    valid = s[:, 7] >= 1e-12
    E = vt[:, -1].reshape(-1, 3, 3)
    u3, _, v3 = np.linalg.svd(E)
    E = u3 @ np.diag([1.0, 1.0, 0.0])[None, :, :] @ v3
    return E, valid


def estimate_essential(matches: BearingMatchSet, cfg: RansacConfig = RansacConfig(),
                       seed: int = 0) -> EssentialEstimate:
    """RANSAC essential-matrix fit over minimal 8-point bearing samples.

    The largest-support sample model is refit once by least squares on its
    inliers, projected back to the essential manifold, and the inlier set
    is re-evaluated against the refit model so every reported inlier
    respects cfg.threshold. Identical (matches, cfg, seed) inputs always
    reproduce the same result. A low_confidence flag marks best models
    supported by under 30% of the matches. Candidate evaluation is
    batched internally; the result is still a pure function of the seed.
    """
    ba, bb = matches.bearings_a, matches.bearings_b
    n = len(matches)
    if n < 8:
        raise EstimationError(f"need at least 8 matches, got {n}")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask: np.ndarray | None = None
    done = 0
    while done < cfg.iterations:
        count = min(_RANSAC_BATCH, cfg.iterations - done)
        done += count
        # Distinct indices per sample via the 8 smallest of n random keys
        # (kth=7 places the 8 smallest in the leading positions).
        keys = rng.random((count, n))
        idx = np.argpartition(keys, 7, axis=1)[:, :8]
        E, valid = _batched_candidates(ba, bb, idx)
        res = np.abs(np.einsum("ni,cij,nj->cn", bb, E, ba))
        counts = (res <= cfg.threshold).sum(axis=1)
        counts[~valid] = 0
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count = int(counts[j])
            best_mask = res[j] <= cfg.threshold

    if best_mask is None or best_count < cfg.min_inliers:
        raise EstimationError(
            f"no model with >= {cfg.min_inliers} inliers after {cfg.iterations} iterations")

    E = _eight_point(ba[best_mask], bb[best_mask])
    if E is None:
        raise EstimationError("inlier refit is degenerate")
    mask = _residuals(E, ba, bb) <= cfg.threshold
    if int(mask.sum()) < cfg.min_inliers:
        raise EstimationError("refit model lost its inlier support")
    inliers = np.flatnonzero(mask)
    return EssentialEstimate(matrix=E, inlier_indices=inliers,
                             low_confidence=len(inliers) / n < 0.3)


def _factorize(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t_hat) candidates of an essential matrix."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ W @ vt
    r2 = u @ W.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _midpoint_depths(ba: np.ndarray, bb: np.ndarray, R: np.ndarray,
                     t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized midpoint triangulation at unit baseline.

    Rays in frame a: lam_a * b_a from the origin and c + lam_b * (R^T b_b)
    from camera b's center c = -R^T t. Returns (points, lam_a, lam_b);
    near-parallel rays get lam values of 0 (rejected by depth tests).
    """
    da = ba
    db = bb @ R  # == (R.T @ bb_i) row-wise
    c = -(R.T @ t)
    dot = np.einsum("ni,ni->n", da, db)
    det = 1.0 - dot * dot
    ca = da @ c
    cb = db @ c
    ok = det >= PARALLEL_RAY_TOL ** 2
    lam_a = np.zeros(len(da))
    lam_b = np.zeros(len(da))
    # Solve [[1, -dot], [-dot, 1]] [lam_a, lam_b] = [ca, -cb] per pair.
    lam_a[ok] = (ca[ok] - dot[ok] * cb[ok]) / det[ok]
    lam_b[ok] = (dot[ok] * ca[ok] - cb[ok]) / det[ok]
    pts = 0.5 * (lam_a[:, None] * da + c[None, :] + lam_b[:, None] * db)
    lam_a[~ok] = 0.0
    lam_b[~ok] = 0.0
    return pts, lam_a, lam_b


def decompose_essential(E: np.ndarray, matches: BearingMatchSet,
                        inlier_indices) -> RelativePose:
    """Pick the (R, t_hat) factorization by the positive-depth vote.

    Each candidate is scored by how many inlier pairs triangulate with
    positive depth along both rays; the winner must beat every other
    candidate and hold a strict majority of the inliers.
    """
    idx = np.asarray(inlier_indices, dtype=np.int64)
    if idx.size < 2:
        raise ValueError(f"need at least 2 inliers to disambiguate, got {idx.size}")
    ba = matches.bearings_a[idx]
    bb = matches.bearings_b[idx]

    counts = []
    candidates = _factorize(np.asarray(E, dtype=np.float64))
    for R, t in candidates:
        _, la, lb = _midpoint_depths(ba, bb, R, t)
        counts.append(int(np.sum((la > 0) & (lb > 0))))

    order = np.argsort(counts)[::-1]
    best, runner_up = order[0], order[1]
    if counts[best] <= counts[runner_up] or counts[best] * 2 <= idx.size:
        raise CheiralityError(
            f"depth vote is ambiguous: candidate supports {counts}")
    R, t = candidates[best]
    return RelativePose(R, t / np.linalg.norm(t))


def triangulate(pair: tuple[np.ndarray, np.ndarray],
                pose: RelativePose) -> np.ndarray | None:
    """Midpoint triangulation of one bearing pair at unit baseline.

    Returns the frame-a point minimizing summed squared ray distance, or
    None when the rays are parallel or either depth is non-positive.
    """
    ba = np.asarray(pair[0], dtype=np.float64).reshape(1, 3)
    bb = np.asarray(pair[1], dtype=np.float64).reshape(1, 3)
    pts, la, lb = _midpoint_depths(ba, bb, pose.rotation, pose.direction)
    if la[0] <= 0 or lb[0] <= 0:
        return None
    return pts[0]


def triangulate_set(matches: BearingMatchSet, pose: RelativePose,
                    indices=None) -> TriangulatedSet:
    """Triangulate many pairs, keeping only cheirality-positive points."""
    idx = (np.arange(len(matches)) if indices is None
           else np.asarray(indices, dtype=np.int64))
    pts, la, lb = _midpoint_depths(matches.bearings_a[idx], matches.bearings_b[idx],
                                   pose.rotation, pose.direction)
    keep = (la > 0) & (lb > 0)
    return TriangulatedSet(points=pts[keep], inlier_indices=idx[keep])


def essential_from_pose(pose: RelativePose) -> np.ndarray:
    """E = [t_hat]x R for a relative pose (Frobenius norm sqrt(2))."""
    return skew(pose.direction) @ pose.rotation
