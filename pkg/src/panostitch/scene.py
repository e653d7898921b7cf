"""Scene assembly: merge registered rooms, extract support planes,
and place assets with physically valid alignment.

The registration graph must be a spanning tree over the rooms; pairwise
transforms map the first room's frame into the second's, and world
transforms are composed along tree paths from the chosen root room.

Manifest mutation (placement, registration appends) is single-writer;
reads are safe from any thread.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._plane_search import best_plane_support
from .geometry import (Aabb, GeometryError, Plane, PointCloud, PointIndex,
                       RigidTransform, as_vec3, compose, fit_plane_lsq, rot_z,
                       unit)

SCHEMA_VERSION = 1
FLATTEN_STDDEV_LIMIT = 0.01  # meters; pre-flatten inlier spread contract
ASSET_SNAP_TOL = 1e-3        # meters; bottom face must sit on the plane
PLACE_MAX_ATTEMPTS = 100


class SceneGraphError(RuntimeError):
    """Registration graph is not a spanning tree (disconnected or cyclic)."""


class PlaneFitError(RuntimeError):
    """RANSAC could not find a supported plane."""


class PlacementError(RuntimeError):
    """No valid pose for the requested asset."""


class ManifestError(ValueError):
    """Manifest contents violate the schema or its invariants."""


# ---------------------------------------------------------------------------
# Manifest types
# ---------------------------------------------------------------------------

@dataclass
class RoomNode:
    id: str
    cloud: PointCloud | None = None
    cloud_path: str | None = None
    local_to_world: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass
class PairRegistration:
    room_a: str
    room_b: str
    T_coarse: RigidTransform       # frame a -> frame b
    T_fine: RigidTransform
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SupportPlane:
    """A fitted plane plus the rectangle of its supported region.

    center/u_axis/v_axis span the inlier bounding rectangle in plane
    coordinates; half_extent holds the rectangle half widths along
    (u_axis, v_axis).
    """

    id: str
    plane: Plane
    center: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_extent: tuple[float, float]

    def frame_rotation(self) -> np.ndarray:
        """World-from-plane rotation with columns (u, v, normal)."""
        return np.column_stack([self.u_axis, self.v_axis, self.plane.normal])

    def point_at(self, u: float, v: float) -> np.ndarray:
        return self.center + u * self.u_axis + v * self.v_axis


@dataclass
class AssetInstance:
    asset_id: str
    aabb_local: Aabb
    pose: RigidTransform
    support_plane_id: str
    semantic_label: str = ""

    def world_aabb(self) -> Aabb:
        """Conservative world-axis-aligned box of the posed asset."""
        mn, mx = self.aabb_local.min, self.aabb_local.max
        corners = np.array([[x, y, z] for x in (mn[0], mx[0])
                            for y in (mn[1], mx[1]) for z in (mn[2], mx[2])])
        return Aabb.from_points(self.pose.apply(corners))


@dataclass
class SceneManifest:
    rooms: list[RoomNode] = field(default_factory=list)
    pair_registrations: list[PairRegistration] = field(default_factory=list)
    planes: list[SupportPlane] = field(default_factory=list)
    assets: list[AssetInstance] = field(default_factory=list)
    root_room: str | None = None

    def __post_init__(self):
        ids = [r.id for r in self.rooms]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"duplicate room ids: {ids}")
        plane_ids = {p.id for p in self.planes}
        for a in self.assets:
            if a.support_plane_id not in plane_ids:
                raise ManifestError(
                    f"asset {a.asset_id!r} references unknown plane "
                    f"{a.support_plane_id!r}")

    def room(self, room_id: str) -> RoomNode:
        for r in self.rooms:
            if r.id == room_id:
                return r
        raise ManifestError(f"unknown room {room_id!r}")

    def support_plane(self, plane_id: str) -> SupportPlane:
        for p in self.planes:
            if p.id == plane_id:
                return p
        raise ManifestError(f"unknown plane {plane_id!r}")


# ---------------------------------------------------------------------------
# Room merging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MergeResult:
    cloud: PointCloud
    room_ids: np.ndarray                      # integer label per point
    room_id_names: tuple[str, ...]            # label -> room id
    world_transforms: dict[str, RigidTransform]


def resolve_world_transforms(manifest: SceneManifest) -> dict[str, RigidTransform]:
    """World pose per room from the pairwise registration tree.

    For a pair (a, b) with transform T mapping a-frame into b-frame,
    world(b) = world(a) o T^-1, which keeps the tree-exactness identity
    world(b)^-1 o world(a) = T. Raises when the graph has a cycle or
    does not reach every room.
    """
    if not manifest.rooms:
        raise SceneGraphError("manifest has no rooms")
    ids = [r.id for r in manifest.rooms]
    root = manifest.root_room or ids[0]
    if root not in ids:
        raise ManifestError(f"root room {root!r} is not in the manifest")

    adj: dict[str, list[tuple[int, str, RigidTransform, bool]]] = {i: [] for i in ids}
    for k, reg in enumerate(manifest.pair_registrations):
        for endpoint in (reg.room_a, reg.room_b):
            if endpoint not in adj:
                raise ManifestError(f"registration references unknown room {endpoint!r}")
        adj[reg.room_a].append((k, reg.room_b, reg.T_fine, True))
        adj[reg.room_b].append((k, reg.room_a, reg.T_fine, False))

    world = {root: RigidTransform.identity()}
    stack = [root]
    visited_edges: set[int] = set()
    while stack:
        cur = stack.pop()
        for edge_key, other, T, forward in adj[cur]:
            if edge_key in visited_edges:
                continue
            visited_edges.add(edge_key)
            if other in world:
                raise SceneGraphError(
                    f"registration graph has a cycle through {cur!r} and {other!r}")
            # forward: cur == room_a, T: cur -> other; world(other) = world(cur) o T^-1
            world[other] = compose(world[cur], T.inverse() if forward else T)
            stack.append(other)

    missing = [i for i in ids if i not in world]
    if missing:
        raise SceneGraphError(f"registration graph disconnected; unreachable: {missing}")
    return world


def merge_rooms(manifest: SceneManifest) -> MergeResult:
    """Concatenate room clouds in the unified frame, labeling each point
    with its source room."""
    world = resolve_world_transforms(manifest)
    parts = []
    labels = []
    names = []
    for i, room in enumerate(manifest.rooms):
        if room.cloud is None:
            raise ManifestError(f"room {room.id!r} has no loaded cloud")
        moved = room.cloud.transformed(world[room.id])
        parts.append(moved.points)
        labels.append(np.full(len(moved), i, dtype=np.int64))
        names.append(room.id)
    merged = PointCloud(np.vstack(parts))
    return MergeResult(cloud=merged, room_ids=np.concatenate(labels),
                       room_id_names=tuple(names), world_transforms=world)


def overlap_rms(cloud_a: PointCloud, cloud_b: PointCloud,
                max_dist: float = 0.2) -> float:
    """RMS nearest-neighbor distance between two clouds over their
    overlap region (pairs within max_dist)."""
    index = PointIndex(cloud_b.points)
    _, dist = index.query_many(cloud_a.points)
    near = dist[dist <= max_dist]
    if near.size == 0:
        return float("inf")
    return float(np.sqrt(np.mean(near ** 2)))


# ---------------------------------------------------------------------------
# Plane extraction and flattening
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneFitConfig:
    distance_threshold: float = 0.01   # meters
    iterations: int = 1000
    min_inliers: int = 50


def fit_plane_ransac(cloud: PointCloud, cfg: PlaneFitConfig = PlaneFitConfig(),
                     seed: int = 0) -> tuple[Plane, np.ndarray]:
    """Largest-support plane in the cloud.

    Random 3-point candidates are scored by inlier count under the
    distance threshold; the winner is refit by least squares on its
    inliers and the inlier set re-evaluated once against the refit.
    """
    pts = cloud.points
    n = pts.shape[0]
    if n < 3:
        raise PlaneFitError(f"plane fit needs >= 3 points, got {n}")

    rng = np.random.default_rng(seed)
    found = best_plane_support(pts, cfg.iterations if n > 3 else 1,
                               cfg.distance_threshold, rng)
    if found is None or found[1] < min(cfg.min_inliers, n):
        raise PlaneFitError(
            f"no plane with >= {min(cfg.min_inliers, n)} inliers "
            f"(best support: {0 if found is None else found[1]})")
    best_mask = found[0]
    try:
        plane = fit_plane_lsq(pts[best_mask])
    except GeometryError as e:
        raise PlaneFitError(str(e)) from e
    dist = np.abs(plane.signed_distance(pts))
    inliers = np.flatnonzero(dist <= cfg.distance_threshold)
    if inliers.size < min(cfg.min_inliers, n):
        raise PlaneFitError("refit plane lost its inlier support")
    return plane, inliers


def inlier_stddev(cloud: PointCloud, plane: Plane, inliers) -> float:
    """Standard deviation of signed inlier distances to the plane."""
    d = plane.signed_distance(cloud.points[np.asarray(inliers)])
    return float(np.std(d))


def flatten_to_plane(cloud: PointCloud, plane: Plane, inliers) -> PointCloud:
    """Project inlier points orthogonally onto the plane.

    Idempotent, and leaves non-inlier points untouched. The pre-flatten
    inlier spread is expected to be within FLATTEN_STDDEV_LIMIT (1 cm);
    a larger spread triggers a warning rather than an error. After
    flattening the recomputed inlier distances, and hence their
    variance, are exactly zero: the projection is iterated to its
    floating-point fixed point, so one rounding pass of the plane dot
    product cannot leave a residual behind.
    """
    idx = np.asarray(inliers, dtype=np.int64)
    spread = inlier_stddev(cloud, plane, idx)
    if spread > FLATTEN_STDDEV_LIMIT:
        warnings.warn(
            f"pre-flatten inlier stddev {spread * 100:.2f} cm exceeds "
            f"{FLATTEN_STDDEV_LIMIT * 100:.0f} cm; plane fit may be poor")
    pts = cloud.points.copy()
    flat = pts[idx]
    for _ in range(8):
        s = plane.signed_distance(flat)
        if not np.any(s):
            break
        flat = flat - np.outer(s, plane.normal)
    pts[idx] = flat
    normals = cloud.normals.copy() if cloud.has_normals() else None
    return PointCloud(pts, normals)


def support_plane_from_inliers(plane_id: str, cloud: PointCloud, plane: Plane,
                               inliers) -> SupportPlane:
    """Build the placement rectangle for a fitted plane.

    The rectangle is the principal-axis bounding box of the inliers
    projected into plane coordinates, so placement sampling covers the
    supported region tightly.
    """
    pts = plane.project(cloud.points[np.asarray(inliers)])
    centroid = pts.mean(axis=0)
    n = plane.normal
    # In-plane principal axes from the projected covariance.
    centered = pts - centroid
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    u = vecs[:, 2] - (vecs[:, 2] @ n) * n
    u = unit(u)
    v = np.cross(n, u)
    cu = centered @ u
    cv = centered @ v
    center = centroid + ((cu.min() + cu.max()) / 2) * u + ((cv.min() + cv.max()) / 2) * v
    return SupportPlane(id=plane_id, plane=plane, center=center, u_axis=u,
                        v_axis=v,
                        half_extent=((cu.max() - cu.min()) / 2,
                                     (cv.max() - cv.min()) / 2))


# ---------------------------------------------------------------------------
# Asset placement
# ---------------------------------------------------------------------------

def _footprint_half_extent(aabb: Aabb, yaw: float) -> tuple[float, float]:
    """Half extents of the yawed box footprint re-fit to the plane axes."""
    hx, hy = (aabb.max[0] - aabb.min[0]) / 2, (aabb.max[1] - aabb.min[1]) / 2
    c, s = abs(np.cos(yaw)), abs(np.sin(yaw))
    return hx * c + hy * s, hx * s + hy * c


def place_asset(manifest: SceneManifest, plane_id: str, asset_id: str,
                aabb_local: Aabb, semantic_label: str = "",
                seed: int = 0) -> AssetInstance:
    """Sample a collision-free pose on a support plane.

    Position and yaw are drawn uniformly (seeded) over the plane's
    supported rectangle; the asset's bottom face is snapped onto the
    plane. Candidate poses overlapping an existing asset on the same
    plane are rejected and resampled, up to PLACE_MAX_ATTEMPTS times.
    The accepted instance is appended to the manifest.
    """
    sp = manifest.support_plane(plane_id)
    rng = np.random.default_rng(seed)
    existing = [a.world_aabb() for a in manifest.assets
                if a.support_plane_id == plane_id]
    base = sp.frame_rotation()
    mn, mx = aabb_local.min, aabb_local.max
    bottom_center = np.array([(mn[0] + mx[0]) / 2, (mn[1] + mx[1]) / 2, mn[2]])

    hx, hy = (mx[0] - mn[0]) / 2, (mx[1] - mn[1]) / 2
    hu, hv = sp.half_extent
    if not ((hx <= hu and hy <= hv) or (hy <= hu and hx <= hv)):
        raise PlacementError(
            f"asset {asset_id!r} does not fit the supported region of "
            f"plane {plane_id!r} at any axis-aligned yaw")

    for _ in range(PLACE_MAX_ATTEMPTS):
        yaw = float(rng.uniform(0.0, 2.0 * np.pi))
        fu, fv = _footprint_half_extent(aabb_local, yaw)
        if fu > sp.half_extent[0] or fv > sp.half_extent[1]:
            continue  # this yaw does not fit; costs one attempt
        du = float(rng.uniform(-(sp.half_extent[0] - fu), sp.half_extent[0] - fu))
        dv = float(rng.uniform(-(sp.half_extent[1] - fv), sp.half_extent[1] - fv))
        rotation = base @ rot_z(yaw)
        target = sp.point_at(du, dv)
        translation = target - rotation @ bottom_center
        candidate = AssetInstance(asset_id=asset_id, aabb_local=aabb_local,
                                  pose=RigidTransform(rotation, translation),
                                  support_plane_id=plane_id,
                                  semantic_label=semantic_label)
        box = candidate.world_aabb()
        if any(box.overlaps(other) for other in existing):
            continue
        manifest.assets.append(candidate)
        return candidate

    raise PlacementError(
        f"no collision-free pose for {asset_id!r} on plane {plane_id!r} "
        f"after {PLACE_MAX_ATTEMPTS} attempts")


def asset_snap_error(manifest: SceneManifest, asset: AssetInstance) -> float:
    """Distance from the asset's posed bottom face to its support plane."""
    sp = manifest.support_plane(asset.support_plane_id)
    mn, mx = asset.aabb_local.min, asset.aabb_local.max
    corners = np.array([[x, y, mn[2]] for x in (mn[0], mx[0]) for y in (mn[1], mx[1])])
    d = sp.plane.signed_distance(asset.pose.apply(corners))
    return float(np.max(np.abs(d)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _aabb_to_dict(a: Aabb) -> dict:
    return {"min_xyz": [float(v) for v in a.min],
            "max_xyz": [float(v) for v in a.max]}


def _aabb_from_dict(d: dict) -> Aabb:
    return Aabb(as_vec3(d["min_xyz"]), as_vec3(d["max_xyz"]))


def manifest_to_dict(m: SceneManifest) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "root_room": m.root_room,
        "rooms": [{
            "id": r.id,
            "cloud": r.cloud_path,
            "local_to_world": r.local_to_world.to_quat_xyz(),
        } for r in m.rooms],
        "pair_registrations": [{
            "room_a": p.room_a,
            "room_b": p.room_b,
            "T_coarse": p.T_coarse.to_quat_xyz(),
            "T_fine": p.T_fine.to_quat_xyz(),
            "diagnostics": p.diagnostics,
        } for p in m.pair_registrations],
        "planes": [{
            "id": sp.id,
            "normal_xyz": [float(v) for v in sp.plane.normal],
            "d": float(sp.plane.d),
            "center_xyz": [float(v) for v in sp.center],
            "u_axis_xyz": [float(v) for v in sp.u_axis],
            "v_axis_xyz": [float(v) for v in sp.v_axis],
            "half_extent_uv": [float(sp.half_extent[0]), float(sp.half_extent[1])],
        } for sp in m.planes],
        "assets": [{
            "asset_id": a.asset_id,
            "aabb_local": _aabb_to_dict(a.aabb_local),
            "pose": a.pose.to_quat_xyz(),
            "support_plane_id": a.support_plane_id,
            "semantic_label": a.semantic_label,
        } for a in m.assets],
    }


def manifest_from_dict(d: dict) -> SceneManifest:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(
            f"unsupported manifest schema version: {d.get('schema_version')}")
    rooms = [RoomNode(id=r["id"], cloud=None, cloud_path=r.get("cloud"),
                      local_to_world=RigidTransform.from_quat_xyz(r["local_to_world"]))
             for r in d.get("rooms", [])]
    pairs = [PairRegistration(
        room_a=p["room_a"], room_b=p["room_b"],
        T_coarse=RigidTransform.from_quat_xyz(p["T_coarse"]),
        T_fine=RigidTransform.from_quat_xyz(p["T_fine"]),
        diagnostics=p.get("diagnostics", {}),
    ) for p in d.get("pair_registrations", [])]
    planes = [SupportPlane(
        id=sp["id"],
        plane=Plane(as_vec3(sp["normal_xyz"]), float(sp["d"])),
        center=as_vec3(sp["center_xyz"]),
        u_axis=as_vec3(sp["u_axis_xyz"]),
        v_axis=as_vec3(sp["v_axis_xyz"]),
        half_extent=(float(sp["half_extent_uv"][0]), float(sp["half_extent_uv"][1])),
    ) for sp in d.get("planes", [])]
    assets = [AssetInstance(
        asset_id=a["asset_id"],
        aabb_local=_aabb_from_dict(a["aabb_local"]),
        pose=RigidTransform.from_quat_xyz(a["pose"]),
        support_plane_id=a["support_plane_id"],
        semantic_label=a.get("semantic_label", ""),
    ) for a in d.get("assets", [])]
    return SceneManifest(rooms=rooms, pair_registrations=pairs, planes=planes,
                         assets=assets, root_room=d.get("root_room"))


def save_manifest(path, m: SceneManifest) -> None:
    """Write manifest JSON atomically (temp file + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".json.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(manifest_to_dict(m), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_manifest(path) -> SceneManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return manifest_from_dict(json.load(fh))
