"""Point-to-plane ICP refinement.

Minimizes the one-sided geometric error

    E = sum_i ((T @ p_a_i - q_i) . n_i)^2

where q_i is the nearest target point to the transformed source point
and n_i the target normal at q_i. Each iteration solves the small-angle
6-dof linearization of E (normal equations), so a good initial pose is
assumed; the coarse panorama-derived pose provides it in the pipeline.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (Aabb, PointCloud, PointIndex, RigidTransform, compose,
                       rotation_exp)

SINGULAR_COND = 1e12


class IcpError(RuntimeError):
    """Registration failed (no correspondences or singular system)."""


def worker_count() -> int:
    """Threads for batched nearest-neighbor queries.

    Honors the PANOSTITCH_THREADS cap; results are identical regardless
    of the value, it only affects speed.
    """
    cap = os.environ.get("PANOSTITCH_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            pass
    return -1


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    rel_tol: float = 1e-6
    max_corr_dist: float | None = None   # None: 3x median initial residual
    normal_angle_max_deg: float = 45.0
    normal_k: int = 20
    overlap_margin: float = 0.5          # AABB-intersection expansion, meters

    def __post_init__(self):
        if self.max_iterations <= 0 or not (0 < self.rel_tol < 1):
            raise ValueError(f"invalid ICP config: {self}")
        if self.max_corr_dist is not None and self.max_corr_dist <= 0:
            raise ValueError("max_corr_dist must be positive")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    final_error: float
    initial_error: float
    iterations: int
    correspondence_count: int
    converged: bool
    error_trace: tuple[float, ...]
    max_corr_dist: float


def estimate_normals(cloud: PointCloud, k: int = 20,
                     viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point normals from the k-nearest-neighbor covariance.

    The normal is the smallest-eigenvalue eigenvector of the local
    covariance (neighborhood includes the point itself), flipped so it
    faces the viewpoint: normal . (viewpoint - p) >= 0.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError("normal estimation needs k >= 3")
    if n < k:
        raise IcpError(f"cloud has {n} points, needs >= k = {k}")
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)

    index = PointIndex(cloud.points)
    nbr, _ = index.knn(cloud.points, k=k, workers=worker_count())
    nbr_pts = cloud.points[nbr]                       # (n, k, 3)
    centered = nbr_pts - nbr_pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)                     # ascending eigenvalues
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, vp[None, :] - cloud.points) < 0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, normals)


def _overlap_crop(src: np.ndarray, dst: PointCloud, T: RigidTransform,
                  margin: float) -> np.ndarray:
    """Indices of source points whose T-image lies in the expanded AABB
    intersection of the two clouds. Falls back to all points when the
    boxes do not intersect (distance gating rejects those pairs later)."""
    moved = T.apply(src)
    box = Aabb.from_points(moved).intersection(Aabb.from_points(dst.points))
    if box is None:
        return np.arange(src.shape[0])
    keep = np.flatnonzero(box.expanded(margin).contains(moved))
    if keep.size == 0:
        return np.arange(src.shape[0])
    return keep


def _correspond(moved: np.ndarray, moved_normals: np.ndarray | None,
                dst: PointCloud, index: PointIndex, max_dist: float,
                cos_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor pairs surviving distance and normal gating.

    Returns (source row indices, target indices). The normal gate uses
    |n_src . n_dst| so PCA sign flips cannot starve the match set; it
    only applies when the source carries normals.
    """
    idx, dist = index.query_many(moved, workers=worker_count())
    ok = dist <= max_dist
    if moved_normals is not None and dst.normals is not None:
        agree = np.abs(np.einsum("ni,ni->n", moved_normals, dst.normals[idx]))
        ok &= agree >= cos_max
    rows = np.flatnonzero(ok)
    return rows, idx[rows]


def _residuals(moved: np.ndarray, q: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.einsum("ni,ni->n", moved - q, n)


def correspondence_error(src_pts: np.ndarray, dst_pts: np.ndarray,
                         dst_normals: np.ndarray, T: RigidTransform) -> float:
    """Sum of squared point-to-plane residuals for fixed correspondences."""
    r = _residuals(T.apply(src_pts), dst_pts, dst_normals)
    return float(r @ r)


def correspondence_gradient(src_pts: np.ndarray, dst_pts: np.ndarray,
                            dst_normals: np.ndarray,
                            T: RigidTransform) -> np.ndarray:
    """Gradient of the fixed-correspondence error w.r.t. the 6 pose
    parameters (rotation vector, translation) of a left-multiplied
    increment exp(xi) @ T, evaluated at xi = 0. Equals 2 J^T r for the
    Jacobian rows [ (T p) x n , n ]."""
    moved = T.apply(src_pts)
    r = _residuals(moved, dst_pts, dst_normals)
    J = np.hstack([np.cross(moved, dst_normals), dst_normals])
    return 2.0 * (J.T @ r)


def _solve_step(moved: np.ndarray, q: np.ndarray, n: np.ndarray) -> np.ndarray:
    """One Gauss-Newton step of the linearized objective; returns xi (6,)."""
    r = _residuals(moved, q, n)
    J = np.hstack([np.cross(moved, n), n])
    H = J.T @ J
    if np.linalg.cond(H) > SINGULAR_COND:
        raise IcpError(
            "normal system is singular; correspondences do not constrain "
            "all 6 degrees of freedom")
    return np.linalg.solve(H, -(J.T @ r))


def _resolve_max_dist(cfg: IcpConfig, moved: np.ndarray,
                      index: PointIndex) -> float:
    if cfg.max_corr_dist is not None:
        return cfg.max_corr_dist
    _, dist = index.query_many(moved, workers=worker_count())
    med = float(np.median(dist))
    return 3.0 * med if med > 0 else 1e-9


def point_to_plane_icp(source: PointCloud, target: PointCloud,
                       T_init: RigidTransform = RigidTransform.identity(),
                       cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Refine T_init so the source cloud lands on the target surfaces.

    Iterates correspondence search (distance- and normal-gated nearest
    neighbors inside the overlap region) with the 6-dof normal-equation
    solve, stopping when the relative error change drops below
    cfg.rel_tol or the iteration cap is hit. Deterministic for identical
    inputs and config.
    """
    if len(source) == 0 or len(target) == 0:
        raise IcpError("registration inputs must be nonempty")
    if not target.has_normals():
        raise IcpError("target cloud needs normals (see estimate_normals)")

    index = PointIndex(target.points)
    crop = _overlap_crop(source.points, target, T_init, cfg.overlap_margin)
    src = source.points[crop]
    src_normals = source.normals[crop] if source.has_normals() else None
    max_dist = _resolve_max_dist(cfg, T_init.apply(src), index)
    cos_max = float(np.cos(np.deg2rad(cfg.normal_angle_max_deg)))

    T = T_init
    prev_err: float | None = None
    initial_err: float | None = None
    trace: list[float] = []
    corr_count = 0
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        moved = T.apply(src)
        moved_n = None if src_normals is None else src_normals @ T.rotation.T
        rows, tgt_idx = _correspond(moved, moved_n, target, index, max_dist, cos_max)
        if rows.size == 0:
            raise IcpError(
                f"zero correspondences within {max_dist:.3g} m; clouds do not overlap")
        corr_count = int(rows.size)
        p = moved[rows]
        q = target.points[tgt_idx]
        n = target.normals[tgt_idx]

        if prev_err is None:
            r0 = _residuals(p, q, n)
            initial_err = float(r0 @ r0)
            prev_err = initial_err

        xi = _solve_step(p, q, n)
        T = compose(RigidTransform(rotation_exp(xi[:3]), xi[3:]), T)

        r = _residuals(T.apply(src[rows]), q, n)
        err = float(r @ r)
        trace.append(err)
        if abs(prev_err - err) / max(prev_err, 1e-12) < cfg.rel_tol:
            converged = True
            break
        prev_err = err

    final_err = eval_icp_error(source, target, T,
                               replace(cfg, max_corr_dist=max_dist))
    return IcpResult(transform=T, final_error=final_err,
                     initial_error=float(initial_err), iterations=iterations,
                     correspondence_count=corr_count, converged=converged,
                     error_trace=tuple(trace), max_corr_dist=max_dist)


def eval_icp_error(source: PointCloud, target: PointCloud, T: RigidTransform,
                   cfg: IcpConfig = IcpConfig()) -> float:
    """Point-to-plane error of a pose; evaluation only, no optimization.

    Uses the same overlap crop, correspondence search, and gating as
    point_to_plane_icp. An empty correspondence set returns 0.0 with a
    warning rather than raising.
    """
    if len(source) == 0 or len(target) == 0:
        raise IcpError("registration inputs must be nonempty")
    if not target.has_normals():
        raise IcpError("target cloud needs normals (see estimate_normals)")
    index = PointIndex(target.points)
    crop = _overlap_crop(source.points, target, T, cfg.overlap_margin)
    src = source.points[crop]
    moved = T.apply(src)
    max_dist = cfg.max_corr_dist if cfg.max_corr_dist is not None \
        else _resolve_max_dist(cfg, moved, index)
    moved_n = None
    if source.has_normals():
        moved_n = source.normals[crop] @ T.rotation.T
    rows, tgt_idx = _correspond(moved, moved_n, target, index, max_dist,
                                float(np.cos(np.deg2rad(cfg.normal_angle_max_deg))))
    if rows.size == 0:
        warnings.warn("eval_icp_error: empty correspondence set, returning 0.0")
        return 0.0
    r = _residuals(moved[rows], target.points[tgt_idx], target.normals[tgt_idx])
    return float(r @ r)
