import numpy as np
import pytest

from panostitch.geometry import PointCloud
from panostitch.panorama import parse_match_dict
from panostitch.scene import (RoomNode, SceneManifest, fit_plane_ransac,
                              support_plane_from_inliers)
from panostitch.testkit import SynthSceneConfig, synth_room_pair


def build_table_manifest(rng, side=1.0, z=0.8):
    """Single-room manifest with one fitted table-top support plane."""
    n = 500
    pts = np.column_stack([rng.uniform(-side / 2, side / 2, n),
                           rng.uniform(-side / 2, side / 2, n),
                           np.full(n, z)])
    cloud = PointCloud(pts)
    plane, inliers = fit_plane_ransac(cloud, seed=1)
    sp = support_plane_from_inliers("table", cloud, plane, inliers)
    return SceneManifest(rooms=[RoomNode(id="room", cloud=cloud)],
                         planes=[sp], root_room="room")


@pytest.fixture(scope="session")
def clean_pair():
    """Noiseless synthetic room pair shared by oracle tests."""
    return synth_room_pair(SynthSceneConfig(seed=7))


@pytest.fixture(scope="session")
def clean_matches(clean_pair):
    return parse_match_dict(clean_pair.match_data)


@pytest.fixture(scope="session")
def noisy_pair():
    """1 px pixel noise, 30% labeled outliers."""
    return synth_room_pair(
        SynthSceneConfig(seed=11, pixel_noise_sigma=1.0, outlier_fraction=0.3))


@pytest.fixture(scope="session")
def noisy_matches(noisy_pair):
    return parse_match_dict(noisy_pair.match_data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
