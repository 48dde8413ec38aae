import numpy as np
import pytest

from procam import geometry as g


def random_rotation(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


class TestRotations:
    def test_zero_vector_gives_identity(self):
        assert np.allclose(g.rotation_vector_to_matrix([0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = g.rotation_vector_to_matrix([0, 0, np.pi / 2])
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.allclose(R, expected, atol=1e-12)

    def test_identity_matrix_gives_zero_vector(self):
        assert np.allclose(g.matrix_to_rotation_vector(np.eye(3)), 0.0)

    def test_pi_about_z_positive_sign(self):
        R = np.diag([-1.0, -1.0, 1.0])
        r = g.matrix_to_rotation_vector(R)
        assert np.allclose(r, [0, 0, np.pi], atol=1e-12)

    def test_pi_about_x_positive_sign(self):
        r = g.matrix_to_rotation_vector(np.diag([1.0, -1.0, -1.0]))
        assert np.allclose(r, [np.pi, 0, 0], atol=1e-12)

    def test_round_trip_1000_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            r = random_rotation(rng)
            r_back = g.matrix_to_rotation_vector(g.rotation_vector_to_matrix(r))
            assert np.max(np.abs(r_back - r)) < 1e-9

    def test_fixed_norm_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            axis = rng.normal(size=3)
            r = 0.7 * axis / np.linalg.norm(axis)
            r_back = g.matrix_to_rotation_vector(g.rotation_vector_to_matrix(r))
            assert np.max(np.abs(r_back - r)) < 1e-10

    def test_composition_re_exponentiates(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            R1 = g.rotation_vector_to_matrix(random_rotation(rng))
            R2 = g.rotation_vector_to_matrix(random_rotation(rng))
            M = R1 @ R2
            M_back = g.rotation_vector_to_matrix(g.matrix_to_rotation_vector(M))
            assert np.max(np.abs(M_back - M)) < 1e-9

    def test_rejects_non_rotation(self):
        with pytest.raises(g.GeometryError, match="not a rotation"):
            g.matrix_to_rotation_vector(np.eye(3) * 2.0)

    def test_orthonormality_of_output(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            R = g.rotation_vector_to_matrix(random_rotation(rng))
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) > 0


class TestDistortion:
    def test_center_is_fixed_point(self):
        d = g.Distortion(k1=-0.3, k2=0.2, p1=0.05, p2=-0.04)
        assert np.allclose(g.distort([0.0, 0.0], d), [0.0, 0.0])

    def test_zero_coefficients_identity(self):
        pts = np.array([[0.3, -0.2], [0.0, 0.5]])
        assert np.allclose(g.distort(pts, g.Distortion()), pts)

    def test_hand_evaluated_radial(self):
        # r^2 = 0.05, factor = 1 + 0.1 * 0.05 = 1.005
        out = g.distort([0.1, 0.2], g.Distortion(k1=0.1))
        assert np.allclose(out, [0.1005, 0.2010], atol=1e-15)

    def test_round_trip_1000_cases(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            d = g.Distortion(
                k1=rng.uniform(-0.2, 0.2),
                k2=rng.uniform(-0.2, 0.2),
                p1=rng.uniform(-0.01, 0.01),
                p2=rng.uniform(-0.01, 0.01),
            )
            pt = rng.uniform(-0.5, 0.5, size=2)
            if np.linalg.norm(pt) > 0.5:
                pt = 0.5 * pt / np.linalg.norm(pt)
            back = g.undistort(g.distort(pt, d), d)
            assert np.max(np.abs(back - pt)) < 1e-8

    def test_undistort_trivial_cases(self):
        d = g.Distortion(k1=0.1)
        assert np.allclose(g.undistort([0.0, 0.0], d), [0.0, 0.0])
        pt = np.array([0.2, -0.1])
        assert np.allclose(g.undistort(pt, g.Distortion()), pt)


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        intr = g.Intrinsics(600, 600, 320, 240)
        px = g.project(np.array([0.0, 0.0, 1000.0]), g.Pose.identity(), intr, g.Distortion())
        assert np.allclose(px, [320.0, 240.0])

    def test_similar_triangles(self):
        intr = g.Intrinsics(600, 600, 320, 240)
        px = g.project(np.array([100.0, 0.0, 1000.0]), g.Pose.identity(), intr, g.Distortion())
        assert np.allclose(px, [380.0, 240.0])

    def test_staged_composition_oracle(self):
        rng = np.random.default_rng(23)
        intr = g.Intrinsics(800, 780, 400, 300)
        dist = g.Distortion(k1=-0.12, k2=0.03, p1=0.002, p2=-0.001)
        board = g.Pose(random_rotation(rng, 0.6), [20.0, -30.0, 900.0])
        device = g.Pose(random_rotation(rng, 0.4), [-150.0, 5.0, 80.0])
        pts = rng.uniform(-100, 100, size=(50, 3))
        got = g.project(pts, board, intr, dist, device_pose=device)
        R_b, R_d = board.rotation, device.rotation
        for pt, px in zip(pts, got):
            X = R_b @ pt + board.t
            X = R_d @ X + device.t
            xn = X[:2] / X[2]
            xd = g.distort(xn, dist)
            expected = [800 * xd[0] + 400, 780 * xd[1] + 300]
            assert np.allclose(px, expected, atol=1e-12)

    def test_behind_device_raises(self):
        intr = g.Intrinsics(600, 600, 320, 240)
        with pytest.raises(g.GeometryError, match="behind device"):
            g.project(np.array([0.0, 0.0, -5.0]), g.Pose.identity(), intr, g.Distortion())


class TestHomography:
    def test_identity_pose_unit_K(self):
        H = g.homography_from_pose(g.Intrinsics(1, 1, 0, 0), g.Pose(np.zeros(3), [0, 0, 1]))
        assert np.allclose(H, np.eye(3))

    def test_pure_translation_is_affine_shift(self):
        H = g.homography_from_pose(g.Intrinsics(1, 1, 0, 0), g.Pose(np.zeros(3), [5.0, 7.0, 1.0]))
        assert np.allclose(H, [[1, 0, 5], [0, 1, 7], [0, 0, 1]])

    def test_agrees_with_projection_path(self):
        rng = np.random.default_rng(31)
        intr = g.Intrinsics(600, 610, 310, 245)
        for _ in range(20):
            pose = g.Pose(random_rotation(rng, 0.8), [50.0, -20.0, 1200.0])
            H = g.homography_from_pose(intr, pose)
            pts2 = rng.uniform(-150, 150, size=(100, 2))
            pts3 = np.concatenate([pts2, np.zeros((100, 1))], axis=1)
            via_proj = g.project(pts3, pose, intr, g.Distortion())
            via_h = g.apply_homography(H, pts2)
            assert np.max(np.abs(via_proj - via_h)) < 1e-10

    def test_normalized_bottom_right(self):
        pose = g.Pose([0.1, -0.2, 0.05], [10.0, 20.0, 1500.0])
        H = g.homography_from_pose(g.Intrinsics(600, 600, 320, 240), pose)
        assert H[2, 2] == pytest.approx(1.0)

    def test_board_through_optical_center_degenerate(self):
        # t lies in the span of r1, r2 so the plane passes through the center
        with pytest.raises(g.GeometryError, match="degenerate pose"):
            g.homography_from_pose(
                g.Intrinsics(600, 600, 320, 240), g.Pose(np.zeros(3), [5.0, 3.0, 0.0])
            )


class TestWarp:
    def test_identity(self):
        out = g.warp_to_board(np.array([3.0, 4.0]), np.eye(3))
        assert np.allclose(out, [3.0, 4.0, 0.0])

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(37)
        pose = g.Pose([0.2, -0.1, 0.3], [40.0, -10.0, 1100.0])
        H = g.homography_from_pose(g.Intrinsics(600, 600, 320, 240), pose)
        px = rng.uniform(0, 640, size=(200, 2))
        board = g.warp_to_board(px, H)
        back = g.apply_homography(H, board[:, :2])
        assert np.max(np.abs(back - px)) < 1e-10

    def test_singular_point_raises(self):
        # H maps the line u = -1 to infinity when warped back through H^-1
        H = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 1.0]])
        with pytest.raises(g.GeometryError, match="warp singular"):
            g.warp_to_board(np.array([-1.0, 0.0]), np.linalg.inv(H))


class TestRayPlane:
    def test_axis_aligned(self):
        plane = g.Plane3([0, 0, 1], 5.0)
        assert np.allclose(g.intersect_ray_plane([0, 0, 0], [0, 0, 1], plane), [0, 0, 5])

    def test_tilted_plane_hand_solved(self):
        plane = g.Plane3([0.0, 1 / np.sqrt(2), 1 / np.sqrt(2)], np.sqrt(2))
        assert np.allclose(g.intersect_ray_plane([0, 0, 0], [0, 0, 1], plane), [0, 0, 2])

    def test_parallel_ray_raises(self):
        plane = g.Plane3([0, 0, 1], 5.0)
        with pytest.raises(g.GeometryError, match="no intersection"):
            g.intersect_ray_plane([0, 0, 0], [1, 0, 0], plane)

    def test_backward_intersection_raises(self):
        plane = g.Plane3([0, 0, 1], -5.0)
        with pytest.raises(g.GeometryError, match="behind origin"):
            g.intersect_ray_plane([0, 0, 0], [0, 0, 1], plane)


class TestTriangulate:
    def setup_method(self):
        self.cam_intr = g.Intrinsics(600, 600, 320, 240)
        self.cam_dist = g.Distortion(k1=-0.1)
        self.prj_intr = g.Intrinsics(1100, 1100, 400, 550)
        self.prj_dist = g.Distortion(k1=-0.08)
        self.stereo = g.Pose([0.0, 0.4, 0.0], [-1400.0, 10.0, 500.0])

    def project_pair(self, P):
        xc = g.project(P, g.Pose.identity(), self.cam_intr, self.cam_dist)
        xp = g.project(P, g.Pose.identity(), self.prj_intr, self.prj_dist,
                       device_pose=self.stereo)
        return xc, xp

    def test_forward_projection_oracle(self):
        rng = np.random.default_rng(41)
        for _ in range(1000):
            P = np.array([rng.uniform(-200, 200), rng.uniform(-150, 150),
                          rng.uniform(800, 2500)])
            xc, xp = self.project_pair(P)
            Pt = g.triangulate(xc, xp, self.cam_intr, self.cam_dist,
                               self.prj_intr, self.prj_dist, self.stereo)
            assert np.linalg.norm(Pt - P) < 1e-6

    def test_symmetric_rig_equidistant(self):
        stereo = g.Pose(np.zeros(3), [-1000.0, 0.0, 0.0])
        intr = g.Intrinsics(600, 600, 0, 0)
        P = np.array([500.0, 0.0, 1500.0])
        xc = g.project(P, g.Pose.identity(), intr, g.Distortion())
        xp = g.project(P, g.Pose.identity(), intr, g.Distortion(), device_pose=stereo)
        Pt = g.triangulate(xc, xp, intr, g.Distortion(), intr, g.Distortion(), stereo)
        c_cam = np.zeros(3)
        c_prj = np.array([1000.0, 0.0, 0.0])
        assert np.isclose(np.linalg.norm(Pt - c_cam), np.linalg.norm(Pt - c_prj), atol=1e-9)

    def test_continuous_under_pixel_perturbation(self):
        P = np.array([50.0, -30.0, 1500.0])
        xc, xp = self.project_pair(P)
        base = g.triangulate(xc, xp, self.cam_intr, self.cam_dist,
                             self.prj_intr, self.prj_dist, self.stereo)
        prev = base
        for frac in np.linspace(0.1, 1.0, 10):
            moved = g.triangulate(xc + [frac, 0.0], xp, self.cam_intr, self.cam_dist,
                                  self.prj_intr, self.prj_dist, self.stereo)
            assert np.all(np.isfinite(moved))
            assert np.linalg.norm(moved - prev) < 5.0
            prev = moved

    def test_parallel_rays_degenerate(self):
        stereo = g.Pose(np.zeros(3), [0.0, 0.0, -10.0])
        intr = g.Intrinsics(600, 600, 0, 0)
        with pytest.raises(g.GeometryError, match="degenerate"):
            g.triangulate([0.0, 0.0], [0.0, 0.0], intr, g.Distortion(),
                          intr, g.Distortion(), stereo)


class TestMedianPose:
    def test_identical_poses_pass_through(self):
        R = g.rotation_vector_to_matrix([0.1, 0.2, -0.3])
        t = np.array([5.0, 6.0, 7.0])
        pose = g.median_pose([R] * 5, [t] * 5)
        assert np.allclose(pose.r, [0.1, 0.2, -0.3], atol=1e-12)
        assert np.allclose(pose.t, t)

    def test_translation_outlier_rejected(self):
        R = np.eye(3)
        ts = [np.array([1.0, 0, 0]), np.array([2.0, 0, 0]), np.array([100.0, 0, 0])]
        pose = g.median_pose([R] * 3, ts)
        assert np.allclose(pose.t, [2.0, 0, 0])

    def test_rotation_median_about_z(self):
        Rs = [g.rotation_vector_to_matrix([0, 0, a]) for a in (0.1, 0.2, 0.9)]
        pose = g.median_pose(Rs, [np.zeros(3)] * 3)
        assert np.allclose(pose.r, [0, 0, 0.2], atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(43)
        Rs = [g.rotation_vector_to_matrix(random_rotation(rng, 0.5)) for _ in range(7)]
        ts = [rng.normal(size=3) for _ in range(7)]
        ref = g.median_pose(Rs, ts)
        order = rng.permutation(7)
        shuffled = g.median_pose([Rs[i] for i in order], [ts[i] for i in order])
        assert np.allclose(ref.r, shuffled.r)
        assert np.allclose(ref.t, shuffled.t)

    def test_empty_raises(self):
        with pytest.raises(g.GeometryError):
            g.median_pose([], [])
