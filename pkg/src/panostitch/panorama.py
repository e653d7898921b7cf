"""Equirectangular panorama keypoints to unit bearing vectors.

Pixel convention (continuous coordinates, no half-pixel offset):
  longitude lam = 2*pi*u/W - pi     (u in [0, W))
  latitude  phi = pi/2 - pi*v/H     (v in [0, H))
  bearing = (cos(phi)*cos(lam), cos(phi)*sin(lam), sin(phi))

The camera frame is x-forward, z-up, right-handed, and assumed
gravity-leveled as captured by a tripod-mounted 360 camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_MIN_SCORE = 0.2
MIN_MATCHES = 8


class MatchFileError(ValueError):
    """Malformed match file or matches inconsistent with the panorama spec."""


@dataclass(frozen=True)
class PanoramaSpec:
    """Equirectangular image dimensions in pixels (width = 2 * height)."""

    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"panorama dimensions must be positive: {self}")
        if self.width != 2 * self.height:
            raise ValueError(
                f"equirectangular panorama requires width = 2*height, "
                f"got {self.width}x{self.height}")


@dataclass(frozen=True)
class BearingMatchSet:
    """Paired unit bearings (N, 3) from two panoramas, order preserved."""

    bearings_a: np.ndarray
    bearings_b: np.ndarray
    spec_a: PanoramaSpec
    spec_b: PanoramaSpec
    scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.bearings_a, dtype=np.float64)
        b = np.asarray(self.bearings_b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
            raise ValueError("bearing arrays must both have shape (N, 3)")
        object.__setattr__(self, "bearings_a", a)
        object.__setattr__(self, "bearings_b", b)
        object.__setattr__(self, "scores",
                           np.asarray(self.scores, dtype=np.float64).reshape(a.shape[0]))

    def __len__(self) -> int:
        return self.bearings_a.shape[0]


def _check_pixels(u, v, spec: PanoramaSpec) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= spec.width) or np.any(v < 0) or np.any(v >= spec.height):
        raise ValueError(
            f"pixel out of range for {spec.width}x{spec.height} panorama")
    return u, v


def pixel_to_bearing(u, v, spec: PanoramaSpec) -> np.ndarray:
    """Unit bearing for pixel (u, v); accepts scalars or equal-length arrays."""
    u, v = _check_pixels(u, v, spec)
    lam = 2.0 * np.pi * u / spec.width - np.pi
    phi = np.pi / 2.0 - np.pi * v / spec.height
    cp = np.cos(phi)
    b = np.stack([cp * np.cos(lam), cp * np.sin(lam), np.sin(phi)], axis=-1)
    return b


def bearing_to_pixel(bearing, spec: PanoramaSpec) -> tuple[np.ndarray, np.ndarray]:
    """Inverse projection. u wraps into [0, W); v is clipped to [0, H).

    Bearings pointing exactly at the south pole land on the last pixel row.
    """
    b = np.asarray(bearing, dtype=np.float64)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    lam = np.arctan2(b[..., 1], b[..., 0])
    phi = np.arcsin(np.clip(b[..., 2], -1.0, 1.0))
    u = np.mod((lam + np.pi) * spec.width / (2.0 * np.pi), spec.width)
    v = (np.pi / 2.0 - phi) * spec.height / np.pi
    v = np.clip(v, 0.0, np.nextafter(float(spec.height), 0.0))
    return u, v


def _require(cond: bool, msg: str):
    if not cond:
        raise MatchFileError(msg)


def parse_match_dict(data: dict, min_score: float = DEFAULT_MIN_SCORE) -> BearingMatchSet:
    """Build a BearingMatchSet from decoded match-file JSON."""
    for key in ("pano_a", "pano_b", "matches"):
        _require(key in data, f"match file missing '{key}'")
    try:
        spec_a = PanoramaSpec(int(data["pano_a"]["width"]), int(data["pano_a"]["height"]))
        spec_b = PanoramaSpec(int(data["pano_b"]["width"]), int(data["pano_b"]["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise MatchFileError(f"bad panorama spec: {e}") from e

    matches = data["matches"]
    _require(isinstance(matches, list), "'matches' must be a list")
    ua, va, ub, vb, sc = [], [], [], [], []
    for i, m in enumerate(matches):
        try:
            s = float(m["score"])
            if s < min_score:
                continue
            ua.append(float(m["ua"]))
            va.append(float(m["va"]))
            ub.append(float(m["ub"]))
            vb.append(float(m["vb"]))
            sc.append(s)
        except (KeyError, TypeError, ValueError) as e:
            raise MatchFileError(f"malformed match entry {i}: {e}") from e

    _require(len(ua) >= MIN_MATCHES,
             f"insufficient matches: {len(ua)} usable, need >= {MIN_MATCHES}")
    try:
        ba = pixel_to_bearing(np.array(ua), np.array(va), spec_a)
        bb = pixel_to_bearing(np.array(ub), np.array(vb), spec_b)
    except ValueError as e:
        raise MatchFileError(f"keypoint outside declared panorama: {e}") from e
    return BearingMatchSet(ba, bb, spec_a, spec_b, np.array(sc))


def load_matches(path, min_score: float = DEFAULT_MIN_SCORE) -> BearingMatchSet:
    """Load a JSON match file and convert every keypoint pair to bearings."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise MatchFileError(f"cannot read match file {path}: {e}") from e
    _require(isinstance(data, dict), "match file must hold a JSON object")
    return parse_match_dict(data, min_score=min_score)
