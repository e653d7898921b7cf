import numpy as np
import pytest

from panostitch.geometry import PointCloud
from panostitch.ply import PlyError, read_ply, write_ply


@pytest.fixture
def cloud(rng):
    pts = rng.uniform(-3, 3, size=(57, 3))
    normals = rng.normal(size=(57, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


@pytest.mark.parametrize("binary", [True, False])
def test_round_trip(tmp_path, cloud, binary):
    path = tmp_path / "cloud.ply"
    write_ply(path, cloud, binary=binary)
    back, room_ids = read_ply(path)
    assert room_ids is None
    # Storage is float32, so compare at that precision.
    np.testing.assert_allclose(back.points, cloud.points, atol=1e-5)
    np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-5)


@pytest.mark.parametrize("binary", [True, False])
def test_room_ids_round_trip(tmp_path, cloud, binary):
    ids = np.arange(len(cloud)) % 3
    path = tmp_path / "cloud.ply"
    write_ply(path, cloud, binary=binary, room_ids=ids)
    _, back_ids = read_ply(path)
    np.testing.assert_array_equal(back_ids, ids)


def test_positions_only(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(10, 3)))
    path = tmp_path / "bare.ply"
    write_ply(path, cloud)
    back, _ = read_ply(path)
    assert not back.has_normals()
    assert len(back) == 10


def test_rejects_truncated_binary(tmp_path, cloud):
    path = tmp_path / "cloud.ply"
    write_ply(path, cloud, binary=True)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])  # drop part of the payload
    with pytest.raises(PlyError, match="vertex count mismatch"):
        read_ply(path)


def test_rejects_short_ascii(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n1 1 1\n")
    path = tmp_path / "short.ply"
    path.write_text(text)
    with pytest.raises(PlyError, match="vertex count mismatch"):
        read_ply(path)


def test_rejects_non_ply(tmp_path):
    path = tmp_path / "nope.ply"
    path.write_text("hello\n")
    with pytest.raises(PlyError, match="magic"):
        read_ply(path)


def test_rejects_unsupported_format(tmp_path):
    path = tmp_path / "big.ply"
    path.write_text("ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                    "property float x\nproperty float y\nproperty float z\n"
                    "end_header\n")
    with pytest.raises(PlyError, match="unsupported"):
        read_ply(path)
