"""Command-line pipeline driver.

Subcommands: stitch, plane, place, eval, synth. Every command is
deterministic given identical inputs and --seed; all randomness forks
from that seed by stable stage labels. Output files are written
atomically (temp file + rename). Structured JSON-lines progress logs,
including stage timings, go to stderr; result artifacts never contain
timings so repeated runs are byte-identical.

Exit codes: 0 success, 2 input error, 3 graph error, 4 placement error,
5 numerical failure. PANOSTITCH_THREADS caps internal thread use.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import scene as scene_mod
from .epipolar import CheiralityError, EstimationError, RansacConfig
from .geometry import Aabb, GeometryError, PointCloud, RigidTransform, rot_z
from .icp import IcpConfig, IcpError
from .metrics import (MetricError, generalization_report, parse_tier,
                      read_episode_csv, read_rates_csv, simreal_correlation,
                      write_episode_csv)
from .panorama import MatchFileError, load_matches
from .pipeline import (DEFAULT_VOXEL_SIZE, PairConfig, PairResult, fork_seed,
                       register_room_pair)
from .ply import PlyError, read_ply, write_ply
from .scale import GroundConfig, GroundPlaneError
from .scene import (ManifestError, PlacementError, PlaneFitConfig,
                    PlaneFitError, SceneGraphError, fit_plane_ransac,
                    flatten_to_plane, inlier_stddev, merge_rooms, place_asset,
                    support_plane_from_inliers)
from .testkit import (EpisodeSpec, SynthError, SynthSceneConfig, synth_episodes,
                      synth_room_pair)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_GRAPH = 3
EXIT_PLACEMENT = 4
EXIT_NUMERIC = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _log(stage: str, event: str, **fields) -> None:
    rec = {"stage": stage, "event": event}
    rec.update(fields)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def _write_json_atomic(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _load_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise CliError(EXIT_INPUT, f"file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(EXIT_INPUT, f"malformed {what} {path}: {e}") from e


def _read_cloud(path: Path) -> PointCloud:
    if not path.exists():
        raise CliError(EXIT_INPUT, f"file not found: {path}")
    try:
        cloud, _ = read_ply(path)
    except PlyError as e:
        raise CliError(EXIT_INPUT, f"bad PLY {path}: {e}") from e
    if len(cloud) == 0:
        raise CliError(EXIT_INPUT, f"empty point cloud: {path}")
    return cloud


# ---------------------------------------------------------------------------
# stitch
# ---------------------------------------------------------------------------

def _pair_config(entry: dict) -> PairConfig:
    ransac_over = dict(entry.get("ransac", {}))
    ransac_seed = ransac_over.pop("seed", None)
    ground_over = dict(entry.get("ground", {}))
    if "camera_height_m" in entry:
        ground_over.setdefault("camera_height", float(entry["camera_height_m"]))
    try:
        ransac = RansacConfig(**ransac_over)
        ground = GroundConfig(**ground_over)
        icp = IcpConfig(**entry.get("icp", {}))
    except (TypeError, ValueError) as e:
        raise CliError(EXIT_INPUT, f"bad pair config: {e}") from e
    gravity = tuple(entry.get("gravity_axis", (0.0, 0.0, -1.0)))
    voxel = entry.get("voxel_size", DEFAULT_VOXEL_SIZE)
    return PairConfig(ransac=ransac, ground=ground, icp=icp,
                      gravity_axis=gravity, voxel_size=voxel,
                      ransac_seed=None if ransac_seed is None else int(ransac_seed))


def _check_tree(rooms: set[str], pairs: list[dict]) -> None:
    """The declared pairs must form a spanning tree over the rooms."""
    parent = {r: r for r in rooms}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in pairs:
        a, b = find(p["room_a"]), find(p["room_b"])
        if a == b:
            raise CliError(EXIT_GRAPH,
                           f"registration graph has a cycle through "
                           f"{p['room_a']!r} and {p['room_b']!r}")
        parent[a] = b
    roots = {find(r) for r in rooms}
    if len(roots) > 1:
        raise CliError(EXIT_GRAPH, "registration graph disconnected")


def cmd_stitch(args) -> int:
    manifest_path = Path(args.manifest)
    out_dir = Path(args.out)
    data = _load_json(manifest_path, "stitch manifest")
    pairs = data.get("pairs", [])
    if not pairs:
        raise CliError(EXIT_INPUT, "stitch manifest declares no pairs")
    base = manifest_path.parent

    rooms: dict[str, Path] = {}
    for entry in pairs:
        for key in ("room_a", "room_b", "match_file", "cloud_a", "cloud_b"):
            if key not in entry:
                raise CliError(EXIT_INPUT, f"pair entry missing field {key!r}")
        rooms.setdefault(entry["room_a"], base / entry["cloud_a"])
        rooms.setdefault(entry["room_b"], base / entry["cloud_b"])
        for f in (entry["match_file"], entry["cloud_a"], entry["cloud_b"]):
            if not (base / f).exists():
                raise CliError(EXIT_INPUT, f"file not found: {base / f}")

    _check_tree(set(rooms), pairs)
    root = data.get("root_room", pairs[0]["room_a"])
    if root not in rooms:
        raise CliError(EXIT_INPUT, f"root room {root!r} not present in pairs")

    clouds = {rid: _read_cloud(path) for rid, path in rooms.items()}
    registrations = []
    for entry in pairs:
        label = f"pair:{entry['room_a']}->{entry['room_b']}"
        t0 = time.perf_counter()
        try:
            matches = load_matches(base / entry["match_file"])
            result: PairResult = register_room_pair(
                matches, clouds[entry["room_a"]], clouds[entry["room_b"]],
                cfg=_pair_config(entry), seed=fork_seed(args.seed, label))
        except MatchFileError as e:
            raise CliError(EXIT_INPUT, f"{label}: {e}") from e
        except (EstimationError, CheiralityError, GroundPlaneError, IcpError,
                GeometryError, ValueError) as e:
            raise CliError(EXIT_NUMERIC, f"{label}: {e}") from e
        _log("stitch", "pair_registered", pair=label,
             elapsed_s=round(time.perf_counter() - t0, 4),
             alpha=result.alpha, icp_iterations=result.icp.iterations)
        registrations.append((entry, result))

    manifest = scene_mod.SceneManifest(
        rooms=[scene_mod.RoomNode(id=rid, cloud=clouds[rid],
                                  cloud_path=str(rooms[rid]))
               for rid in sorted(rooms)],
        pair_registrations=[
            scene_mod.PairRegistration(
                room_a=e["room_a"], room_b=e["room_b"],
                T_coarse=r.T_coarse, T_fine=r.T_fine,
                diagnostics=r.diagnostics())
            for e, r in registrations],
        root_room=root)

    t0 = time.perf_counter()
    try:
        merged = merge_rooms(manifest)
    except (SceneGraphError, ManifestError) as e:
        raise CliError(EXIT_GRAPH, str(e)) from e
    _log("stitch", "merged", rooms=len(manifest.rooms),
         points=len(merged.cloud),
         elapsed_s=round(time.perf_counter() - t0, 4))

    for room in manifest.rooms:
        room.local_to_world = merged.world_transforms[room.id]

    out_dir.mkdir(parents=True, exist_ok=True)
    write_ply(out_dir / "merged.ply", merged.cloud, binary=True,
              room_ids=merged.room_ids)
    scene_mod.save_manifest(out_dir / "scene_manifest.json", manifest)
    _write_json_atomic(out_dir / "diagnostics.json", {
        "root_room": root,
        "pairs": [{"room_a": e["room_a"], "room_b": e["room_b"],
                   **r.diagnostics()} for e, r in registrations],
        "merged_points": len(merged.cloud),
    })
    _log("stitch", "done", out=str(out_dir))
    return EXIT_OK


# ---------------------------------------------------------------------------
# plane
# ---------------------------------------------------------------------------

def cmd_plane(args) -> int:
    cloud = _read_cloud(Path(args.cloud))
    cfg = PlaneFitConfig(distance_threshold=args.threshold,
                         iterations=args.iterations,
                         min_inliers=args.min_inliers)
    try:
        plane, inliers = fit_plane_ransac(cloud, cfg,
                                          seed=fork_seed(args.seed, "plane"))
    except PlaneFitError as e:
        raise CliError(EXIT_NUMERIC, str(e)) from e

    spread = inlier_stddev(cloud, plane, inliers)
    report = {
        "normal_xyz": [float(v) for v in plane.normal],
        "d": plane.d,
        "inlier_count": int(inliers.size),
        "point_count": len(cloud),
        "pre_flatten_stddev_m": spread,
        "stddev_within_1cm": bool(spread <= scene_mod.FLATTEN_STDDEV_LIMIT),
    }
    if args.flatten:
        flat = flatten_to_plane(cloud, plane, inliers)
        write_ply(Path(args.flatten), flat, binary=True)
        report["flattened_ply"] = str(args.flatten)
        report["post_flatten_stddev_m"] = inlier_stddev(flat, plane, inliers)
    if args.add_to_manifest:
        manifest_path = Path(args.add_to_manifest)
        if not manifest_path.exists():
            raise CliError(EXIT_INPUT, f"file not found: {manifest_path}")
        try:
            manifest = scene_mod.load_manifest(manifest_path)
        except (ManifestError, json.JSONDecodeError, KeyError, ValueError) as e:
            raise CliError(EXIT_INPUT, f"bad scene manifest: {e}") from e
        plane_id = args.plane_id or f"plane{len(manifest.planes)}"
        if any(p.id == plane_id for p in manifest.planes):
            raise CliError(EXIT_INPUT,
                           f"plane id {plane_id!r} already in manifest")
        manifest.planes.append(
            support_plane_from_inliers(plane_id, cloud, plane, inliers))
        scene_mod.save_manifest(manifest_path, manifest)
        report["plane_id"] = plane_id
    if args.report:
        _write_json_atomic(Path(args.report), report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# place
# ---------------------------------------------------------------------------

def cmd_place(args) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise CliError(EXIT_INPUT, f"file not found: {path}")
    try:
        manifest = scene_mod.load_manifest(path)
    except (ManifestError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise CliError(EXIT_INPUT, f"bad scene manifest: {e}") from e

    try:
        aabb = Aabb(np.array(args.aabb_min), np.array(args.aabb_max))
    except GeometryError as e:
        raise CliError(EXIT_INPUT, f"bad asset box: {e}") from e
    try:
        asset = place_asset(manifest, args.plane, args.asset_id, aabb,
                            semantic_label=args.label,
                            seed=fork_seed(args.seed, f"place:{args.asset_id}"))
    except ManifestError as e:
        raise CliError(EXIT_INPUT, str(e)) from e
    except PlacementError as e:
        raise CliError(EXIT_PLACEMENT, str(e)) from e

    out = Path(args.out) if args.out else path
    scene_mod.save_manifest(out, manifest)
    _log("place", "placed", asset=asset.asset_id, plane=asset.support_plane_id,
         pose=asset.pose.to_quat_xyz())
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    summary: dict = {}
    if args.episodes:
        try:
            episodes = read_episode_csv(Path(args.episodes))
        except FileNotFoundError:
            raise CliError(EXIT_INPUT, f"file not found: {args.episodes}") from None
        except MetricError as e:
            raise CliError(EXIT_INPUT, f"{args.episodes}: {e}") from e
        report = generalization_report(episodes)
        csv_text = "\n".join(",".join(r) for r in report.to_csv_rows()) + "\n"
        detail_text = "\n".join(",".join(r) for r in report.detail_rows()) + "\n"
        if args.report:
            _write_text_atomic(Path(args.report), csv_text)
        if args.detail:
            _write_text_atomic(Path(args.detail), detail_text)
        if not args.report and not args.detail:
            print(report.to_text())
        summary["episodes"] = len(episodes)

    if args.correlate:
        try:
            entries = read_rates_csv(Path(args.correlate))
        except FileNotFoundError:
            raise CliError(EXIT_INPUT, f"file not found: {args.correlate}") from None
        except MetricError as e:
            raise CliError(EXIT_INPUT, f"{args.correlate}: {e}") from e
        try:
            corr = simreal_correlation(entries)
        except MetricError as e:
            raise CliError(EXIT_NUMERIC, str(e)) from e
        summary["correlation"] = {
            "r_task_averaged": corr.r_task_averaged,
            "r_raw": corr.r_raw,
            "n_averaged": corr.n_averaged,
            "n_raw": corr.n_raw,
        }
        print(json.dumps(summary["correlation"], indent=2, sort_keys=True))

    if not args.episodes and not args.correlate:
        raise CliError(EXIT_INPUT, "eval needs --episodes and/or --correlate")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _scene_config(data: dict, seed: int) -> SynthSceneConfig:
    gt = RigidTransform(rot_z(np.deg2rad(float(data.get("gt_yaw_deg", 11.0)))),
                        np.asarray(data.get("gt_translation", (-1.6, -0.4, 0.0)),
                                   dtype=float))
    return SynthSceneConfig(
        room_extent=tuple(data.get("room_extent", (5.0, 4.0, 3.0))),
        floor_point_count=int(data.get("floor_point_count", 150)),
        wall_point_count=int(data.get("wall_point_count", 150)),
        camera_height=float(data.get("camera_height_m", 1.5)),
        gt_relative_pose=gt,
        pixel_noise_sigma=float(data.get("pixel_noise_sigma", 0.0)),
        outlier_fraction=float(data.get("outlier_fraction", 0.0)),
        seed=seed,
        pano_width=int(data.get("pano_width", 2048)),
        cloud_point_count=int(data.get("cloud_point_count", 4000)),
    )


def cmd_synth(args) -> int:
    config = _load_json(Path(args.config), "synth config")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))

    if "scene" in config:
        try:
            pair = synth_room_pair(_scene_config(config["scene"], seed))
        except SynthError as e:
            raise CliError(EXIT_INPUT, str(e)) from e
        _write_json_atomic(out_dir / "matches.json", pair.match_data)
        # Clouds ship positions only; the pipeline estimates normals itself.
        write_ply(out_dir / "room_a.ply", PointCloud(pair.cloud_a.points))
        write_ply(out_dir / "room_b.ply", PointCloud(pair.cloud_b.points))
        _write_json_atomic(out_dir / "ground_truth.json", {
            "gt_a_to_b": pair.gt.to_quat_xyz(),
            "scale_factor_k": pair.scale_factor_k,
            "camera_height_m": pair.camera_height,
            "gravity_axis": [float(v) for v in pair.gravity_a],
            "outlier_indices": [int(i) for i in np.flatnonzero(pair.outlier_mask)],
            "floor_match_count": int(pair.floor_mask.sum()),
        })
        _write_json_atomic(out_dir / "stitch_manifest.json", {
            "root_room": "room_a",
            "pairs": [{
                "room_a": "room_a", "room_b": "room_b",
                "match_file": "matches.json",
                "cloud_a": "room_a.ply", "cloud_b": "room_b.ply",
                "camera_height_m": pair.camera_height,
                "gravity_axis": [float(v) for v in pair.gravity_a],
                **({k: config[k] for k in ("ransac", "icp", "voxel_size")
                    if k in config}),
            }],
        })
        _log("synth", "scene_written", out=str(out_dir),
             matches=len(pair.match_data["matches"]))

    if "episodes" in config:
        try:
            specs = [EpisodeSpec(task=e["task"], tier=parse_tier(e["tier"]),
                                 n_trials=int(e["n_trials"]),
                                 true_rate=float(e["true_rate"]),
                                 exact_counts=bool(e.get("exact_counts", False)))
                     for e in config["episodes"]]
            synth = synth_episodes(specs, seed=fork_seed(seed, "episodes"))
        except (SynthError, MetricError, KeyError) as e:
            raise CliError(EXIT_INPUT, f"bad episode spec: {e}") from e
        write_episode_csv(out_dir / "episodes.csv", synth.episodes)
        _write_json_atomic(out_dir / "episodes_empirical.json", {
            f"{task}/{tier.value}": rate
            for (task, tier), rate in synth.empirical_sr.items()})
        _log("synth", "episodes_written", count=len(synth.episodes))

    if "scene" not in config and "episodes" not in config:
        raise CliError(EXIT_INPUT, "synth config needs 'scene' and/or 'episodes'")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panostitch",
        description="Stitch room point clouds from panorama matches, "
                    "compose assets onto planes, and evaluate episodes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stitch", help="register and merge rooms per a manifest")
    p.add_argument("manifest", help="stitch manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("plane", help="fit a support plane to a cloud")
    p.add_argument("cloud", help="input PLY")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--min-inliers", type=int, default=50, dest="min_inliers")
    p.add_argument("--flatten", help="write flattened cloud to this PLY")
    p.add_argument("--report", help="write plane report JSON here")
    p.add_argument("--add-to-manifest", dest="add_to_manifest",
                   help="register the plane in this scene manifest")
    p.add_argument("--plane-id", dest="plane_id",
                   help="id for --add-to-manifest (default: plane<N>)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plane)

    p = sub.add_parser("place", help="place an asset on a support plane")
    p.add_argument("manifest", help="scene manifest JSON")
    p.add_argument("--plane", required=True, help="support plane id")
    p.add_argument("--asset-id", required=True, dest="asset_id")
    p.add_argument("--aabb-min", type=float, nargs=3, required=True,
                   dest="aabb_min", metavar=("X", "Y", "Z"))
    p.add_argument("--aabb-max", type=float, nargs=3, required=True,
                   dest="aabb_max", metavar=("X", "Y", "Z"))
    p.add_argument("--label", default="")
    p.add_argument("--out", help="write updated manifest here (default: in place)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("eval", help="episode reports and sim-real correlation")
    p.add_argument("--episodes", help="episode log CSV")
    p.add_argument("--report", help="write wide SR table CSV here")
    p.add_argument("--detail", help="write per-cell detail CSV here")
    p.add_argument("--correlate", help="sim/real rates CSV for Pearson r")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic scenes and episodes")
    p.add_argument("config", help="synth config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        _log(args.command, "error", code=e.code, message=str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
