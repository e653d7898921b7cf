import numpy as np
import pytest

from panostitch.geometry import (PointCloud, RigidTransform,
                                 pose_difference, rotation_exp,
                                 rotation_from_axis_angle)
from panostitch.icp import (IcpConfig, IcpError, correspondence_error,
                            correspondence_gradient, estimate_normals,
                            eval_icp_error, point_to_plane_icp)
from panostitch.testkit import sample_room_cloud

EXTENT = (5.0, 4.0, 3.0)


@pytest.fixture(scope="module")
def room_cloud():
    # Dense enough that k-NN neighborhoods never span the gap between
    # faces (the sampler keeps a 0.2 m margin off every junction).
    rng = np.random.default_rng(42)
    pts, normals = sample_room_cloud(EXTENT, 20000, 0.2, rng)
    center = np.array([0.0, 0.0, 1.5])
    return PointCloud(pts - center), normals


def small_perturbation(rng, angle_deg=5.0, shift=0.1):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction *= shift / np.linalg.norm(direction)
    return RigidTransform(rotation_from_axis_angle(axis, np.deg2rad(angle_deg)),
                          direction)


class TestEstimateNormals:
    def test_plane_points_get_up_normals(self, rng):
        pts = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500),
                               np.zeros(500)])
        cloud = estimate_normals(PointCloud(pts), k=10, viewpoint=(0, 0, 5.0))
        np.testing.assert_allclose(cloud.normals,
                                   np.tile([0, 0, 1.0], (500, 1)), atol=1e-6)

    def test_sphere_normals_point_inward(self, rng):
        pts = rng.normal(size=(2000, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        cloud = estimate_normals(PointCloud(pts), k=20, viewpoint=(0, 0, 0))
        inward = -pts
        cos = np.einsum("ni,ni->n", cloud.normals, inward)
        assert np.all(cos >= np.cos(np.deg2rad(5.0)))

    def test_room_cloud_matches_analytic_normals(self, room_cloud):
        cloud, analytic = room_cloud
        est = estimate_normals(cloud, k=20, viewpoint=(0, 0, 0))
        cos = np.abs(np.einsum("ni,ni->n", est.normals, analytic))
        frac_good = np.mean(cos >= np.cos(np.deg2rad(10.0)))
        assert frac_good >= 0.99
        # Orientation: viewpoint sits inside the room, so signed agreement
        # should hold wherever the angle is good.
        signed = np.einsum("ni,ni->n", est.normals, analytic)
        assert np.mean(signed > 0) >= 0.99

    def test_cloud_smaller_than_k(self):
        with pytest.raises(IcpError):
            estimate_normals(PointCloud(np.zeros((5, 3)) + np.eye(5, 3)), k=10)


class TestPointToPlaneIcp:
    def test_identity_case(self, room_cloud):
        cloud, _ = room_cloud
        target = estimate_normals(cloud, k=20, viewpoint=(0, 0, 0))
        res = point_to_plane_icp(cloud, target, RigidTransform.identity())
        rot, trans = pose_difference(res.transform, RigidTransform.identity())
        assert rot < 1e-12 and trans < 1e-12
        assert res.final_error < 1e-12
        assert res.converged and res.iterations <= 2

    def test_recovers_known_perturbation(self, room_cloud, rng):
        cloud, _ = room_cloud
        T_star = small_perturbation(rng)
        target_pts = T_star.apply(cloud.points)
        target = estimate_normals(PointCloud(target_pts), k=20,
                                  viewpoint=T_star.apply(np.zeros(3)))
        res = point_to_plane_icp(cloud, target, RigidTransform.identity())
        rot, trans = pose_difference(res.transform, T_star)
        assert np.degrees(rot) < 0.05
        assert trans < 1e-3
        assert res.converged

    def test_partial_overlap_converges_on_shared_band(self, rng):
        # Two views sharing only a diagonal band of the room, so the
        # overlap still sees pieces of every wall (an axis-aligned band
        # would leave the cut axis unconstrained).
        pts, _ = sample_room_cloud(EXTENT, 30000, 0.1, rng)
        pts = pts - np.array([0.0, 0.0, 1.5])
        diag = pts[:, 0] + pts[:, 1]
        part_a = pts[diag < 1.5]
        part_b = pts[diag > -1.5]
        T_star = small_perturbation(rng, angle_deg=3.0, shift=0.08)
        source = PointCloud(part_a)
        target = estimate_normals(PointCloud(T_star.apply(part_b)), k=20,
                                  viewpoint=T_star.apply(np.zeros(3)))
        # A tight distance gate keeps source points past the shared band
        # from latching onto the band boundary and biasing the solve.
        res = point_to_plane_icp(source, target, RigidTransform.identity(),
                                 IcpConfig(max_corr_dist=0.15))
        rot, trans = pose_difference(res.transform, T_star)
        assert np.degrees(rot) < 0.1
        assert trans < 5e-3
        # The overlap crop keeps the far half of the source out of the solve.
        assert res.correspondence_count < len(source)

    def test_disjoint_clouds_raise(self, rng):
        a = PointCloud(rng.normal(size=(100, 3)))
        b_pts = rng.normal(size=(100, 3)) + np.array([100.0, 0, 0])
        b = estimate_normals(PointCloud(b_pts), k=10, viewpoint=(100.0, 0, 5))
        with pytest.raises(IcpError, match="zero correspondences"):
            point_to_plane_icp(a, b, RigidTransform.identity(),
                               IcpConfig(max_corr_dist=1.0))

    def test_single_plane_is_singular(self, rng):
        pts = np.column_stack([rng.uniform(-1, 1, 400), rng.uniform(-1, 1, 400),
                               np.zeros(400)])
        target = estimate_normals(PointCloud(pts), k=10, viewpoint=(0, 0, 5))
        with pytest.raises(IcpError, match="singular"):
            point_to_plane_icp(PointCloud(pts), target,
                               RigidTransform.identity())

    def test_final_error_not_worse_than_initial(self, room_cloud, rng):
        cloud, _ = room_cloud
        for _ in range(3):
            T_star = small_perturbation(rng, angle_deg=8.0, shift=0.2)
            target = estimate_normals(PointCloud(T_star.apply(cloud.points)),
                                      k=20, viewpoint=T_star.apply(np.zeros(3)))
            res = point_to_plane_icp(cloud, target, RigidTransform.identity())
            assert res.converged
            cfg = IcpConfig(max_corr_dist=res.max_corr_dist)
            final = eval_icp_error(cloud, target, res.transform, cfg)
            initial = eval_icp_error(cloud, target, RigidTransform.identity(), cfg)
            assert final <= initial + 1e-10

    def test_inner_step_decreases_fixed_correspondence_error(self, rng):
        # The Gauss-Newton update must never raise the objective when the
        # correspondences are held fixed (1e-10 slack for rounding).
        from panostitch.geometry import compose
        from panostitch.icp import _solve_step
        for _ in range(20):
            n = int(rng.integers(50, 300))
            src = rng.uniform(-2, 2, size=(n, 3))
            dst = src + rng.normal(scale=0.05, size=src.shape)
            normals = rng.normal(size=src.shape)
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            T = small_perturbation(rng, angle_deg=rng.uniform(0, 10),
                                   shift=rng.uniform(0, 0.3))
            before = correspondence_error(src, dst, normals, T)
            xi = _solve_step(T.apply(src), dst, normals)
            T_next = compose(RigidTransform(rotation_exp(xi[:3]), xi[3:]), T)
            after = correspondence_error(src, dst, normals, T_next)
            assert after <= before + 1e-10

    def test_trace_starts_no_worse_than_initial(self, room_cloud, rng):
        cloud, _ = room_cloud
        T_star = small_perturbation(rng, angle_deg=6.0, shift=0.15)
        target = estimate_normals(PointCloud(T_star.apply(cloud.points)), k=20,
                                  viewpoint=T_star.apply(np.zeros(3)))
        res = point_to_plane_icp(cloud, target, RigidTransform.identity())
        assert res.error_trace[0] <= res.initial_error + 1e-10

    def test_determinism(self, room_cloud, rng):
        cloud, _ = room_cloud
        T_star = small_perturbation(rng)
        target = estimate_normals(PointCloud(T_star.apply(cloud.points)), k=20,
                                  viewpoint=T_star.apply(np.zeros(3)))
        r1 = point_to_plane_icp(cloud, target, RigidTransform.identity())
        r2 = point_to_plane_icp(cloud, target, RigidTransform.identity())
        assert r1.iterations == r2.iterations
        assert r1.final_error == r2.final_error
        np.testing.assert_array_equal(r1.transform.matrix(), r2.transform.matrix())

    def test_empty_inputs_rejected(self, room_cloud):
        cloud, _ = room_cloud
        target = estimate_normals(cloud, k=10, viewpoint=(0, 0, 0))
        with pytest.raises(IcpError):
            point_to_plane_icp(PointCloud(np.empty((0, 3))), target)
        with pytest.raises(IcpError, match="normals"):
            point_to_plane_icp(cloud, PointCloud(cloud.points))


class TestEvalIcpError:
    def test_zero_for_identical_clouds(self, room_cloud):
        cloud, _ = room_cloud
        target = estimate_normals(cloud, k=20, viewpoint=(0, 0, 0))
        err = eval_icp_error(cloud, target, RigidTransform.identity())
        assert err == 0.0

    def test_single_pair_unit_residual(self):
        source = PointCloud(np.array([[0.0, 0.0, 1.0]]))
        target = PointCloud(np.array([[0.0, 0.0, 0.0]]),
                            np.array([[0.0, 0.0, 1.0]]))
        err = eval_icp_error(source, target, RigidTransform.identity(),
                             IcpConfig(max_corr_dist=10.0))
        assert err == pytest.approx(1.0, abs=1e-15)

    def test_empty_correspondences_warn_and_return_zero(self, rng):
        source = PointCloud(rng.normal(size=(20, 3)))
        far = rng.normal(size=(20, 3)) + np.array([50.0, 0.0, 0.0])
        target = PointCloud(far, np.tile([0.0, 0, 1.0], (20, 1)))
        with pytest.warns(UserWarning, match="empty correspondence"):
            err = eval_icp_error(source, target, RigidTransform.identity(),
                                 IcpConfig(max_corr_dist=0.5))
        assert err == 0.0

    def test_matches_brute_force_oracle(self, rng):
        src = PointCloud(rng.uniform(-1, 1, size=(60, 3)))
        dst_pts = rng.uniform(-1, 1, size=(80, 3))
        normals = rng.normal(size=(80, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        dst = PointCloud(dst_pts, normals)
        for trial in range(5):
            T = small_perturbation(rng, angle_deg=rng.uniform(0, 20),
                                   shift=rng.uniform(0, 0.5))
            max_dist = 0.8
            cfg = IcpConfig(max_corr_dist=max_dist, normal_angle_max_deg=45.0,
                            overlap_margin=1000.0)  # disable cropping
            got = eval_icp_error(src, dst, T, cfg)

            # Exhaustive re-computation with full distance matrices.
            moved = T.apply(src.points)
            d = np.linalg.norm(moved[:, None, :] - dst_pts[None, :, :], axis=2)
            nn = np.argmin(d, axis=1)
            dist = d[np.arange(len(moved)), nn]
            keep = dist <= max_dist
            r = np.einsum("ni,ni->n", moved[keep] - dst_pts[nn[keep]],
                          normals[nn[keep]])
            assert got == pytest.approx(float(r @ r), rel=1e-12)


class TestGradient:
    def test_matches_central_finite_differences(self, rng):
        src = rng.uniform(-2, 2, size=(200, 3))
        dst = src + rng.normal(scale=0.05, size=src.shape)
        normals = rng.normal(size=src.shape)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        eps = 1e-6
        for _ in range(10):
            T = small_perturbation(rng, angle_deg=rng.uniform(0, 15),
                                   shift=rng.uniform(0, 0.4))
            grad = correspondence_gradient(src, dst, normals, T)
            fd = np.zeros(6)
            for j in range(6):
                xi = np.zeros(6)
                xi[j] = eps
                plus = RigidTransform(rotation_exp(xi[:3]), xi[3:])
                minus = RigidTransform(rotation_exp(-xi[:3]), -xi[3:])
                from panostitch.geometry import compose
                e_plus = correspondence_error(src, dst, normals, compose(plus, T))
                e_minus = correspondence_error(src, dst, normals, compose(minus, T))
                fd[j] = (e_plus - e_minus) / (2 * eps)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-5
