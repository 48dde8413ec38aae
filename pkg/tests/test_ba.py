"""Bundle adjustment: residual layout, sparsity soundness, solver behavior."""

import numpy as np
import pytest

from procam import ba
from procam.geometry import (
    Distortion,
    Intrinsics,
    Pose,
    matrix_to_rotation_vector,
    project,
    rotation_vector_to_matrix,
)

CAM_I = Intrinsics(600.0, 600.0, 320.0, 240.0)
CAM_D = Distortion(-0.1, 0.02, 0.001, -0.0005)
PRJ_I = Intrinsics(1100.0, 1100.0, 400.0, 550.0)
PRJ_D = Distortion(-0.08, 0.01, -0.001, 0.0008)
STEREO = Pose(np.array([0.0, 0.6, 0.0]), np.array([-1200.0, 0.0, 900.0]))


def build_rig(n_poses=3, grid=(4, 3), seed=0):
    """Small exact scene: board grids projected into both devices."""
    rng = np.random.default_rng(seed)
    poses, points, cam_px, prj_px = [], [], [], []
    for _ in range(n_poses):
        pose = Pose(
            rng.uniform(-0.3, 0.3, 3),
            np.array([rng.uniform(-60, 60), rng.uniform(-40, 40), rng.uniform(1600, 2200)]),
        )
        g = np.stack(
            np.meshgrid(np.arange(grid[0]) * 60.0, np.arange(grid[1]) * 60.0), -1
        ).reshape(-1, 2)
        pts = np.concatenate([g, np.zeros((g.shape[0], 1))], axis=1)
        poses.append(pose)
        points.append(pts)
        cam_px.append(project(pts, pose, CAM_I, CAM_D))
        prj_px.append(project(pts, pose, PRJ_I, PRJ_D, device_pose=STEREO))
    obs = ba.BundleObservations(tuple(cam_px), tuple(prj_px))
    truth = ba.pack(CAM_I, CAM_D, PRJ_I, PRJ_D, STEREO, poses, points)
    return obs, truth, points


class TestLayout:
    def test_vector_length(self):
        obs, truth, _ = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        n_p = sum(obs.counts)
        assert layout.n_params == 22 + 6 * len(obs.counts) + 3 * n_p
        assert truth.size == layout.n_params
        assert layout.n_residuals == 7 * n_p

    def test_pack_unpack_roundtrip(self):
        obs, truth, _ = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        sp = ba.unpack(truth, layout)
        again = ba.pack(sp.cam_intr, sp.cam_dist, sp.prj_intr, sp.prj_dist,
                        sp.stereo, sp.poses, sp.points)
        assert np.array_equal(truth, again)

    def test_unpack_wrong_length(self):
        obs, truth, _ = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        with pytest.raises(ba.BundleError, match="length"):
            ba.unpack(truth[:-1], layout)

    def test_observation_validation(self):
        with pytest.raises(ba.BundleError):
            ba.BundleObservations((), ())
        a = np.zeros((3, 2))
        with pytest.raises(ba.BundleError):
            ba.BundleObservations((a,), (np.zeros((4, 2)),))


class TestResiduals:
    def test_zero_at_truth(self):
        obs, truth, points = build_rig()
        r = ba.compute_residuals(truth, obs, points, np.ones(sum(obs.counts)))
        assert np.max(np.abs(r)) == 0.0

    def test_single_point_locality(self):
        obs, truth, points = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        n_p = sum(obs.counts)
        w = np.ones(n_p)
        r0 = ba.compute_residuals(truth, obs, points, w)
        p = truth.copy()
        g = obs.counts[0] + 2  # third node of pose 1
        p[layout.points_base + 3 * g] += 1.0
        r1 = ba.compute_residuals(p, obs, points, w)
        changed = np.flatnonzero(r1 != r0)
        assert changed.size > 0
        assert np.all(changed // 7 == g)
        # scale residual of that node has norm 1 mm at unit weight
        scale = r1[7 * g + 4 : 7 * g + 7]
        assert np.linalg.norm(scale) == pytest.approx(1.0, abs=1e-12)

    def test_agrees_with_naive_evaluator(self):
        obs, truth, points = build_rig(n_poses=4)
        layout = ba.ParameterLayout(obs.counts)
        n_p = sum(obs.counts)
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = truth.copy()
            p[0:4] *= 1.0 + rng.uniform(-0.005, 0.005, 4)
            p[8:12] *= 1.0 + rng.uniform(-0.005, 0.005, 4)
            p[4:8] += rng.normal(0, 5e-4, 4)
            p[12:16] += rng.normal(0, 5e-4, 4)
            p[16:19] += rng.normal(0, 5e-4, 3)
            p[19:22] += rng.normal(0, 2.0, 3)
            for j in range(layout.n_poses):
                s = layout.pose_slice(j)
                p[s.start : s.start + 3] += rng.normal(0, 2e-3, 3)
                p[s.start + 3 : s.stop] += rng.normal(0, 2.0, 3)
            p[layout.points_base :] += rng.normal(0, 1.0, 3 * n_p)
            w = rng.uniform(0.05, 1.0, n_p)

            r = ba.compute_residuals(p, obs, points, w)
            cost = float(r @ r)

            sp = ba.unpack(p, layout)
            naive = 0.0
            g = 0
            for j in range(layout.n_poses):
                for i in range(layout.counts[j]):
                    x_m = sp.points[j][i]
                    pc = project(x_m, sp.poses[j], sp.cam_intr, sp.cam_dist)
                    pp = project(x_m, sp.poses[j], sp.prj_intr, sp.prj_dist,
                                 device_pose=sp.stereo)
                    naive += np.sum((obs.cam[j][i] - pc) ** 2)
                    naive += np.sum((obs.prj[j][i] - pp) ** 2)
                    naive += w[g] * np.sum((x_m - points[j][i]) ** 2)
                    g += 1
            assert cost == pytest.approx(naive, rel=1e-12)

    def test_behind_device_sentinel(self):
        obs, truth, points = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        p = truth.copy()
        s = layout.pose_slice(0)
        p[s.start + 5] = -2000.0  # board behind the camera
        r = ba.compute_residuals(p, obs, points, np.ones(sum(obs.counts)))
        assert np.all(r[0:2] == 1.0e6)
        assert np.all(np.isfinite(r))

    def test_nan_raises_with_node_id(self):
        obs, truth, points = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        p = truth.copy()
        g = 5
        p[layout.points_base + 3 * g + 1] = np.nan
        with pytest.raises(ba.BundleError, match="numerical failure at pose 0 node 5"):
            ba.compute_residuals(p, obs, points, np.ones(sum(obs.counts)))


class TestLambdaWeights:
    def test_zero_maps_to_one(self):
        assert ba.lambda_weights(np.zeros(4)).tolist() == [1.0] * 4

    def test_unit_delta(self):
        w = ba.lambda_weights([1.0])
        assert w[0] == pytest.approx(np.exp(-1.0), rel=1e-15)
        assert w[0] == pytest.approx(0.367879441, abs=1e-9)

    def test_strictly_decreasing(self):
        grid = np.linspace(0.0, 8.0, 50)
        w = ba.lambda_weights(grid)
        assert np.all(np.diff(w) < 0)
        assert np.all((w > 0) & (w <= 1))

    def test_negative_rejected(self):
        with pytest.raises(ba.BundleError):
            ba.lambda_weights([-0.1])


class TestSparsity:
    def test_minimal_problem_by_hand(self):
        S = ba.build_sparsity(1, [1]).toarray()
        assert S.shape == (7, 31)
        cam = list(range(8)) + list(range(22, 31))
        prj = list(range(8, 22)) + list(range(22, 31))
        pt = [28, 29, 30]
        for row in (0, 1):
            assert sorted(np.flatnonzero(S[row])) == sorted(cam)
        for row in (2, 3):
            assert sorted(np.flatnonzero(S[row])) == sorted(prj)
        for row in (4, 5, 6):
            assert sorted(np.flatnonzero(S[row])) == pt

    def test_scale_rows_three_entries(self):
        S = ba.build_sparsity(3, [4, 5, 6]).tocsr()
        n_p = 15
        for g in range(n_p):
            for row in range(7 * g + 4, 7 * g + 7):
                assert S[row].nnz == 3

    def test_dense_fd_zero_outside_pattern(self):
        obs, truth, points = build_rig(n_poses=2, grid=(3, 2), seed=3)
        S = ba.build_sparsity(len(obs.counts), obs.counts).toarray()
        prob = ba.BundleProblem(obs, points)
        rng = np.random.default_rng(11)
        n_p = sum(obs.counts)
        for _ in range(3):
            p = truth + rng.normal(0, 1e-4, truth.size)
            w = rng.uniform(0.2, 1.0, n_p)
            r0 = prob.residuals(p, w)
            J = np.empty((r0.size, p.size))
            for i in range(p.size):
                h = 1e-7 * max(1.0, abs(p[i]))
                pp = p.copy()
                pp[i] += h
                J[:, i] = (prob.residuals(pp, w) - r0) / h
            assert np.max(np.abs(J[~S])) < 1e-10

    def test_grouped_jacobian_matches_dense(self):
        obs, truth, points = build_rig(n_poses=2, grid=(3, 2), seed=4)
        prob = ba.BundleProblem(obs, points)
        rng = np.random.default_rng(12)
        p = truth + rng.normal(0, 1e-4, truth.size)
        w = rng.uniform(0.2, 1.0, sum(obs.counts))
        Jg = prob.jacobian(p, w).toarray()
        r0 = prob.residuals(p, w)
        Jd = np.empty_like(Jg)
        for i in range(p.size):
            h = 1e-7 * max(1.0, abs(p[i]))
            pp = p.copy()
            pp[i] += h
            Jd[:, i] = (prob.residuals(pp, w) - r0) / h
        assert np.max(np.abs(Jg - Jd)) < 1e-9

    def test_invalid_inputs(self):
        with pytest.raises(ba.BundleError):
            ba.build_sparsity(0, [])
        with pytest.raises(ba.BundleError):
            ba.build_sparsity(2, [3, 0])


class TestSolve:
    def test_at_truth_terminates_immediately(self):
        obs, truth, points = build_rig()
        p_hat, rep = ba.solve(truth, obs, points)
        assert rep.iterations <= 2
        assert rep.final_cost < 1e-16
        assert rep.converged

    def test_recovers_perturbed_intrinsics(self):
        obs, truth, points = build_rig(n_poses=4, grid=(5, 4))
        p0 = truth.copy()
        p0[0:4] *= 1.01
        p0[8:12] *= 0.99
        p_hat, rep = ba.solve(p0, obs, points)
        assert np.max(np.abs(p_hat[0:4] - truth[0:4]) / truth[0:4]) < 1e-6
        assert np.max(np.abs(p_hat[8:12] - truth[8:12]) / truth[8:12]) < 1e-6
        assert rep.final_cost <= rep.initial_cost

    def test_cost_never_increases(self):
        obs, truth, points = build_rig()
        prob = ba.BundleProblem(obs, points)
        rng = np.random.default_rng(5)
        for _ in range(5):
            p0 = truth.copy()
            p0[0:4] *= 1.0 + rng.uniform(-0.02, 0.02, 4)
            p0[19:22] += rng.normal(0, 10.0, 3)
            p0[prob.layout.points_base :] += rng.normal(0, 2.0, 3 * sum(obs.counts))
            p_hat, rep = ba.solve(p0, obs, points)
            assert rep.final_cost <= rep.initial_cost + 1e-12
            assert prob.cost(p_hat) == pytest.approx(rep.final_cost, rel=1e-9, abs=1e-18)

    def test_free_mask_freezes_parameters(self):
        obs, truth, points = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        rng = np.random.default_rng(6)
        p0 = truth.copy()
        for j in range(layout.n_poses):
            s = layout.pose_slice(j)
            p0[s.start : s.start + 3] += rng.normal(0, 5e-3, 3)
            p0[s.start + 3 : s.stop] += rng.normal(0, 5.0, 3)
        mask = np.zeros(layout.n_params, dtype=bool)
        for j in range(layout.n_poses):
            mask[layout.pose_slice(j)] = True
        p_hat, rep = ba.solve(p0, obs, points, lambda_mode="frozen", free_mask=mask)
        assert np.array_equal(p_hat[~mask], p0[~mask])
        assert rep.final_cost < rep.initial_cost
        assert rep.final_cost < 1e-10

    def test_gauge_invariance_with_zero_weights(self):
        obs, truth, points = build_rig()
        layout = ba.ParameterLayout(obs.counts)
        n_p = sum(obs.counts)
        rng = np.random.default_rng(8)
        zero_w = np.zeros(n_p)
        r_ref = ba.compute_residuals(truth, obs, points, zero_w)
        cost_ref = float(r_ref @ r_ref)
        for _ in range(5):
            A = rotation_vector_to_matrix(rng.uniform(-1.0, 1.0, 3))
            b = rng.uniform(-30.0, 30.0, 3)
            s = rng.uniform(0.5, 2.0)
            sp = ba.unpack(truth, layout)
            new_poses, new_points = [], []
            for pose, pts in zip(sp.poses, sp.points):
                R = pose.rotation @ A.T
                t = s * (pose.t - pose.rotation @ A.T @ b)
                new_poses.append(Pose(matrix_to_rotation_vector(R), t))
                new_points.append(s * (pts @ A.T + b))
            new_stereo = Pose(sp.stereo.r, s * sp.stereo.t)
            p2 = ba.pack(sp.cam_intr, sp.cam_dist, sp.prj_intr, sp.prj_dist,
                         new_stereo, new_poses, new_points)
            r2 = ba.compute_residuals(p2, obs, points, zero_w)
            cost2 = float(r2 @ r2)
            assert cost2 == pytest.approx(cost_ref, abs=1e-9)

    def test_irls_reduces_weight_of_moved_points(self):
        obs, truth, points = build_rig()
        prob = ba.BundleProblem(obs, points)
        d = prob.delta_m(truth)
        assert np.all(d == 0)
        p = truth.copy()
        p[prob.layout.points_base + 3] += 2.0
        w = ba.lambda_weights(prob.delta_m(p))
        assert w[1] == pytest.approx(np.exp(-4.0), rel=1e-12)
        assert np.all(w[np.arange(w.size) != 1] == 1.0)

    def test_option_validation(self):
        obs, truth, points = build_rig()
        with pytest.raises(ba.BundleError):
            ba.solve(truth, obs, points, lambda_mode="sometimes")
        with pytest.raises(ba.BundleError):
            ba.solve(truth[:-3], obs, points)
        with pytest.raises(ba.BundleError):
            ba.solve(truth, obs, points,
                     free_mask=np.zeros(truth.size, dtype=bool))
