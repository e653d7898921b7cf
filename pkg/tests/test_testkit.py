import json
import math

import numpy as np
import pytest

from panostitch.epipolar import decompose_essential, estimate_essential, triangulate_set
from panostitch.geometry import PointCloud, RigidTransform, pose_difference
from panostitch.icp import estimate_normals, point_to_plane_icp
from panostitch.metrics import Tier, generalization_report, success_rate
from panostitch.scale import GroundConfig, apply_scale, recover_scale, select_ground_points
from panostitch.testkit import (EpisodeSpec, SynthError, SynthSceneConfig,
                                synth_episodes, synth_room_pair)


class TestSynthRoomPair:
    def test_full_pipeline_recovers_ground_truth(self, clean_pair, clean_matches):
        est = estimate_essential(clean_matches, seed=2)
        pose = decompose_essential(est.matrix, clean_matches, est.inlier_indices)
        tri = triangulate_set(clean_matches, pose, est.inlier_indices)
        ground = select_ground_points(
            tri, clean_pair.gravity_a,
            GroundConfig(camera_height=clean_pair.camera_height), seed=2)
        T_coarse = apply_scale(pose, recover_scale(ground))

        target = estimate_normals(PointCloud(clean_pair.cloud_b.points),
                                  k=20, viewpoint=(0, 0, 0))
        result = point_to_plane_icp(clean_pair.cloud_a, target, T_coarse)
        rot, trans = pose_difference(result.transform, clean_pair.gt)
        assert trans < 1e-4
        assert math.degrees(rot) < 1e-3

    def test_outlier_count_is_exact(self):
        for frac, n in [(0.3, 300), (0.25, 301), (0.1, 40)]:
            cfg = SynthSceneConfig(seed=1, floor_point_count=n // 2,
                                   wall_point_count=n - n // 2,
                                   outlier_fraction=frac)
            pair = synth_room_pair(cfg)
            assert pair.outlier_mask.sum() == math.ceil(frac * n)

    def test_same_seed_is_byte_identical(self):
        cfg = SynthSceneConfig(seed=99, pixel_noise_sigma=0.7,
                               outlier_fraction=0.2)
        a = synth_room_pair(cfg)
        b = synth_room_pair(cfg)
        assert json.dumps(a.match_data, sort_keys=True) == \
            json.dumps(b.match_data, sort_keys=True)
        assert a.cloud_a.points.tobytes() == b.cloud_a.points.tobytes()
        assert a.cloud_b.points.tobytes() == b.cloud_b.points.tobytes()
        np.testing.assert_array_equal(a.outlier_mask, b.outlier_mask)

    def test_floor_points_satisfy_height_identity(self, clean_pair):
        # In the camera-a frame, gravity . p == h exactly for floor points.
        floor_pts = clean_pair.match_points_a[clean_pair.floor_mask]
        proj = floor_pts @ clean_pair.gravity_a
        np.testing.assert_array_equal(proj, np.full(len(floor_pts),
                                                    clean_pair.camera_height))

    def test_scale_factor_matches_baseline(self, clean_pair):
        baseline = np.linalg.norm(clean_pair.gt.translation)
        assert clean_pair.scale_factor_k == pytest.approx(1.0 / baseline)

    def test_camera_outside_room_rejected(self):
        cfg = SynthSceneConfig(
            seed=0, gt_relative_pose=RigidTransform(np.eye(3),
                                                    np.array([30.0, 0, 0])))
        with pytest.raises(SynthError, match="outside the room"):
            synth_room_pair(cfg)

    def test_invalid_configs_rejected(self):
        with pytest.raises(SynthError):
            SynthSceneConfig(outlier_fraction=1.0)
        with pytest.raises(SynthError):
            SynthSceneConfig(camera_height=-1.0)
        with pytest.raises(SynthError):
            SynthSceneConfig(room_extent=(0.0, 4.0, 3.0))

    def test_cloud_normals_are_unit_and_rotated(self, clean_pair):
        nrm_a = clean_pair.cloud_a.normals
        np.testing.assert_allclose(np.linalg.norm(nrm_a, axis=1), 1.0,
                                   atol=1e-12)
        expected_b = nrm_a @ clean_pair.gt.rotation.T
        np.testing.assert_allclose(clean_pair.cloud_b.normals, expected_b,
                                   atol=1e-12)


class TestSynthEpisodes:
    def test_rate_one_is_all_successes(self):
        out = synth_episodes([EpisodeSpec("t", Tier.TRAIN, 25, 1.0)], seed=0)
        assert all(e.success for e in out.episodes)

    def test_recorded_empirical_rate_matches(self):
        out = synth_episodes([EpisodeSpec("t", Tier.TRAIN, 20, 0.7)], seed=3)
        assert success_rate(out.episodes) == out.empirical_sr[("t", Tier.TRAIN)]

    def test_report_reproduces_empirical_table(self):
        specs = [EpisodeSpec("microwave", t, 20, r) for t, r in
                 [(Tier.TRAIN, 0.9), (Tier.UNSEEN_SCENE, 0.6),
                  (Tier.UNSEEN_OBJECT, 0.45), (Tier.UNSEEN_SCENE_OBJECT, 0.25)]]
        specs += [EpisodeSpec("chair", Tier.TRAIN, 20, 0.6)]
        out = synth_episodes(specs, seed=8)
        report = generalization_report(out.episodes)
        for (task, tier), rate in out.empirical_sr.items():
            assert report.sr(task, tier) == pytest.approx(rate, abs=1e-12)

    def test_paths_are_consistent(self):
        out = synth_episodes([EpisodeSpec("t", Tier.TRAIN, 50, 0.5)], seed=1)
        for e in out.episodes:
            assert e.actual_path_len >= e.shortest_path_len > 0

    def test_bad_rate_rejected(self):
        with pytest.raises(SynthError):
            EpisodeSpec("t", Tier.TRAIN, 10, 1.5)
