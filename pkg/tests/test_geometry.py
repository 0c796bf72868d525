import numpy as np
import pytest

from depthkit import geometry as G
from depthkit import tensor as T
from depthkit.gradcheck import check_gradients, projection_loss
from depthkit.tensor import NumericsError, Tensor


RIG = G.StereoRig(focal=100.0, cx=31.5, cy=15.5, baseline=0.5, width=64, height=32)


class TestQuaternions:
    def test_exp_quarter_turn_about_z(self):
        # v = (0, 0, pi/4) is a 90 degree yaw: q = (cos pi/4, 0, 0, sin pi/4)
        q = G.quat_exp([0.0, 0.0, np.pi / 4])
        np.testing.assert_allclose(q, [np.sqrt(0.5), 0, 0, np.sqrt(0.5)], atol=1e-12)
        R = G.quat_to_matrix(q)
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_log_exp_roundtrip_principal_branch(self):
        rng = np.random.Generator(np.random.PCG64(21))
        for _ in range(300):
            v = rng.normal(size=3)
            n = np.linalg.norm(v)
            v = v / n * rng.uniform(0.0, 1.5)
            got = G.quat_log(G.quat_exp(v))
            np.testing.assert_allclose(got, v, atol=1e-9)

    def test_log_handles_double_cover(self):
        v = np.array([0.3, -0.2, 0.5])
        q = G.quat_exp(v)
        np.testing.assert_allclose(G.quat_log(-q), G.quat_log(q), atol=1e-12)

    def test_log_renormalizes_within_tolerance(self):
        q = G.quat_exp([0.1, 0.2, 0.3])
        np.testing.assert_allclose(G.quat_log(q * (1 + 5e-5)), [0.1, 0.2, 0.3], atol=1e-4)
        with pytest.raises(ValueError):
            G.quat_log(q * 1.01)

    def test_tiny_rotation_taylor_branch(self):
        v = np.array([1e-8, -2e-8, 1e-8])
        np.testing.assert_allclose(G.quat_log(G.quat_exp(v)), v, atol=1e-15)

    def test_matrix_quat_roundtrip(self):
        rng = np.random.Generator(np.random.PCG64(22))
        for _ in range(100):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            if q[0] < 0:
                q = -q
            got = G.matrix_to_quat(G.quat_to_matrix(q))
            np.testing.assert_allclose(got, q, atol=1e-10)


class TestPoses:
    def _random_pose(self, rng):
        v = rng.normal(size=3)
        v = v / np.linalg.norm(v) * rng.uniform(0, 1.2)
        return G.Se3Pose(v, rng.normal(size=3))

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.Generator(np.random.PCG64(23))
        for _ in range(100):
            p = self._random_pose(rng)
            r = G.pose_compose(p, G.pose_inverse(p))
            assert np.linalg.norm(r.rot_log) < 1e-9
            assert np.linalg.norm(r.trans) < 1e-9

    def test_compose_matches_matrix_product(self):
        rng = np.random.Generator(np.random.PCG64(24))
        for _ in range(100):
            a, b = self._random_pose(rng), self._random_pose(rng)
            Mc = G.pose_to_matrix(G.pose_compose(a, b))
            np.testing.assert_allclose(Mc, G.pose_to_matrix(a) @ G.pose_to_matrix(b), atol=1e-9)

    def test_matrix_roundtrip(self):
        rng = np.random.Generator(np.random.PCG64(25))
        for _ in range(50):
            p = self._random_pose(rng)
            r = G.pose_from_matrix(G.pose_to_matrix(p))
            np.testing.assert_allclose(r.rot_log, p.rot_log, atol=1e-9)
            np.testing.assert_allclose(r.trans, p.trans, atol=1e-9)

    def test_trajectory_requires_increasing_indices(self):
        p = G.pose_identity()
        G.Trajectory([(0, p), (1, p), (5, p)])
        with pytest.raises(ValueError):
            G.Trajectory([(0, p), (2, p), (2, p)])


class TestDisparityDepth:
    def test_worked_example(self):
        d = Tensor(np.full((1, 1, 2, 2), 10.0, np.float32))
        z = G.disparity_to_depth(d, RIG)
        np.testing.assert_allclose(z.data, 5.0)

    def test_zero_disparity_capped(self):
        d = Tensor(np.zeros((1, 1, 1, 1), np.float32))
        z = G.disparity_to_depth(d, RIG)
        np.testing.assert_allclose(z.data, 50000.0)

    def test_roundtrip(self):
        rng = np.random.Generator(np.random.PCG64(26))
        d = rng.uniform(0.5, 20.0, size=(2, 1, 8, 8)).astype(np.float32)
        z = G.disparity_to_depth(Tensor(d), RIG)
        back = G.depth_to_disparity(z, RIG)
        np.testing.assert_allclose(back.data, d, rtol=1e-5)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(NumericsError):
            G.depth_to_disparity(Tensor(np.zeros((1, 1, 1, 1), np.float32)), RIG)


def _depth_field(seed, n=1, h=32, w=64, lo=2.0, hi=20.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(lo, hi, size=(n, 1, h, w)).astype(np.float32)


def _identity_grid(h, w, n=1):
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    g = np.stack([gx, gy])[None]
    return np.broadcast_to(g, (n, 2, h, w))


class TestReproject:
    def test_identity_pose_gives_identity_grid(self):
        depth = Tensor(_depth_field(31))
        grid, valid = G.reproject(depth, RIG, G.pose_identity())
        np.testing.assert_allclose(grid.data, _identity_grid(32, 64), atol=1e-4)
        assert valid.data.min() == 1.0

    def test_pure_baseline_shift_matches_fb_over_z(self):
        # stereo special case: horizontal shift is exactly the disparity
        depth = Tensor(_depth_field(32))
        grid, _ = G.reproject(depth, RIG, G.stereo_pose(RIG))
        shift = _identity_grid(32, 64)[:, 0] - grid.data[:, 0]
        np.testing.assert_allclose(shift, RIG.fb / depth.data[:, 0], atol=1e-4)
        np.testing.assert_allclose(grid.data[:, 1], _identity_grid(32, 64)[:, 1], atol=1e-5)

    def test_sign_flag_mirrors_shift(self):
        depth = Tensor(_depth_field(33))
        grid, _ = G.reproject(depth, RIG, G.stereo_pose(RIG, sign=-1))
        shift = grid.data[:, 0] - _identity_grid(32, 64)[:, 0]
        np.testing.assert_allclose(shift, RIG.fb / depth.data[:, 0], atol=1e-4)

    def test_general_pose_matches_numpy_reference(self):
        rng = np.random.Generator(np.random.PCG64(34))
        depth = _depth_field(35, h=16, w=24)
        rig = G.StereoRig(focal=40.0, cx=11.5, cy=7.5, baseline=0.3, width=24, height=16)
        pose = G.Se3Pose(rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.2)
        grid, _ = G.reproject(Tensor(depth), rig, pose)

        R = G.quat_to_matrix(G.quat_exp(pose.rot_log))
        for y in range(0, 16, 5):
            for x in range(0, 24, 7):
                z = float(depth[0, 0, y, x])
                p = np.array([(x - rig.cx) / rig.focal * z,
                              (y - rig.cy) / rig.focal * z, z])
                ps = R @ p + pose.trans
                want_x = rig.focal * ps[0] / ps[2] + rig.cx
                want_y = rig.focal * ps[1] / ps[2] + rig.cy
                assert grid.data[0, 0, y, x] == pytest.approx(want_x, abs=1e-3)
                assert grid.data[0, 1, y, x] == pytest.approx(want_y, abs=1e-3)

    def test_behind_camera_and_out_of_frame_masked(self):
        depth = Tensor(np.full((1, 1, 8, 16), 4.0, np.float32))
        rig = G.StereoRig(focal=20.0, cx=7.5, cy=3.5, baseline=0.5, width=16, height=8)
        # translate backwards past the scene: z_s <= 0 everywhere
        behind = G.Se3Pose(np.zeros(3), [0.0, 0.0, -8.0])
        _, valid = G.reproject(depth, rig, behind)
        assert valid.data.max() == 0.0
        # lateral shift of 5px pushes the left columns out of frame
        lateral = G.Se3Pose(np.zeros(3), [-1.0, 0.0, 0.0])
        _, valid = G.reproject(depth, rig, lateral)
        assert valid.data.min() == 0.0 and valid.data.max() == 1.0

    def test_gradcheck_wrt_depth(self):
        depth = _depth_field(36, h=5, w=6, lo=3.0, hi=9.0)
        rig = G.StereoRig(focal=10.0, cx=2.5, cy=2.0, baseline=0.4, width=6, height=5)

        def fn(d):
            grid, _ = G.reproject(d, rig, G.stereo_pose(rig))
            return projection_loss(grid)

        max_rel, checked = check_gradients(fn, [depth])
        assert checked == 30
        assert max_rel < 1e-3

    def test_gradcheck_wrt_pose_tensors(self):
        depth = _depth_field(37, h=5, w=6, lo=3.0, hi=9.0)
        rig = G.StereoRig(focal=10.0, cx=2.5, cy=2.0, baseline=0.4, width=6, height=5)
        rot = [0.06, -0.09, 0.11]
        trans = [0.2, -0.1, 0.3]

        def fn(d, rx, ry, rz, tx, ty, tz):
            grid, _ = G.reproject(d, rig, ((rx, ry, rz), (tx, ty, tz)))
            return projection_loss(grid)

        arrays = [depth] + [np.full((1, 1, 1, 1), v, np.float32) for v in rot + trans]
        max_rel, _ = check_gradients(fn, arrays)
        assert max_rel < 1e-3
