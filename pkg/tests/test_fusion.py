"""Tests for uncertainty propagation and inverse-variance fusion."""

import math

import numpy as np
import pytest

from navtrace.errors import (
    EmptyInput,
    FrameMismatch,
    NoEstimates,
    NonPositiveSigma,
    ZeroDistance,
)
from navtrace.fusion import (
    DistanceEstimate,
    WorldPoseHypothesis,
    chordal_mean_rotation,
    distance_sigma,
    fuse_distances,
    fuse_poses,
    fuse_world_hypotheses,
    propagate_uncertainty,
)
from navtrace.geometry import CameraModel, RigidTransform, Rotation, look_at
from navtrace.pose import PoseEstimate

from conftest import random_rotation


def make_camera(fx=1000.0, fy=1000.0, extrinsic=None, camera_id="cam0"):
    return CameraModel(fx=fx, fy=fy, cx=960.0, cy=640.0,
                       extrinsic=extrinsic or RigidTransform.identity(),
                       camera_id=camera_id)


class TestPropagateUncertainty:
    def test_zero_error(self):
        cam = make_camera()
        np.testing.assert_allclose(
            propagate_uncertainty(0.0, [10.0, 20.0, 500.0], cam), [0, 0, 0])

    def test_direct_substitution(self):
        # e=0.1 px, t_z=500 mm, f_x=1000 px
        cam = make_camera()
        s = propagate_uncertainty(0.1, [0.0, 0.0, 500.0], cam)
        assert abs(s[0] - 0.05) < 1e-12
        assert abs(s[1] - 0.05) < 1e-12
        assert abs(s[2] - 0.1 * 500.0 / math.sqrt(2.0 * 1000.0 ** 2)) < 1e-12

    def test_printed_form_uses_fx_everywhere(self):
        # fy deliberately different; default must ignore it
        cam = make_camera(fy=2000.0)
        s = propagate_uncertainty(0.1, [0.0, 0.0, 500.0], cam)
        assert abs(s[1] - 0.05) < 1e-12
        assert abs(s[2] - 50.0 / math.sqrt(2e6)) < 1e-12

    def test_fy_correction_switch(self):
        cam = make_camera(fy=2000.0)
        s = propagate_uncertainty(0.1, [0.0, 0.0, 500.0], cam,
                                  use_fy_correction=True)
        assert abs(s[1] - 0.1 * 500.0 / 2000.0) < 1e-12
        assert abs(s[2] - 50.0 / math.sqrt(1000.0 ** 2 + 2000.0 ** 2)) < 1e-12


class TestDistanceSigma:
    def test_axis_aligned(self):
        d, s = distance_sigma([0, 0, 500.0], [0.05, 0.05, 0.0354])
        assert d == 500.0
        assert abs(s - 0.0354) < 1e-12

    def test_isotropic_sigma_identity(self):
        d, s = distance_sigma([300.0, 0.0, 400.0], [0.1, 0.1, 0.1])
        assert abs(d - 500.0) < 1e-12
        assert abs(s - 0.1) < 1e-12

    def test_matches_finite_difference_jacobian(self):
        # first-order propagation oracle: numeric Jacobian of the norm
        rng = np.random.default_rng(20)
        for _ in range(200):
            t = rng.uniform(-800, 800, 3)
            if np.linalg.norm(t) < 1.0:
                continue
            sig = rng.uniform(0.01, 0.5, 3)
            eps = 1e-3  # rounding noise dominates below this for ||t|| ~ 1e3
            grad = np.empty(3)
            for j in range(3):
                dt = np.zeros(3)
                dt[j] = eps
                grad[j] = (np.linalg.norm(t + dt) - np.linalg.norm(t - dt)) / (2 * eps)
            expected = math.sqrt(float(np.sum((grad * sig) ** 2)))
            _, s = distance_sigma(t, sig)
            assert abs(s - expected) < 1e-9

    def test_zero_distance_raises(self):
        with pytest.raises(ZeroDistance):
            distance_sigma([0.0, 0.0, 0.0], [0.1, 0.1, 0.1])


class TestFuseDistances:
    def test_single_camera_identity(self):
        f = fuse_distances([DistanceEstimate("cam0", 500.0, 0.1)])
        assert f.distance == 500.0
        assert abs(f.sigma - 0.1) < 1e-15
        assert abs(f.weights["cam0"] - 1.0) < 1e-15

    def test_equal_weight_case(self):
        f = fuse_distances([DistanceEstimate("a", 500.0, 0.1),
                            DistanceEstimate("b", 502.0, 0.1)])
        assert abs(f.distance - 501.0) < 1e-9
        assert abs(f.sigma - 0.1 / math.sqrt(2.0)) < 1e-9

    def test_direct_substitution_case(self):
        f = fuse_distances([DistanceEstimate("a", 500.0, 0.1),
                            DistanceEstimate("b", 510.0, 0.3)])
        assert abs(f.distance - 501.0) < 1e-9
        assert abs(f.sigma - math.sqrt(9.0 / 1000.0)) < 1e-9

    def test_sigma_strictly_below_min_for_two_plus(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            m = rng.integers(2, 6)
            ests = [DistanceEstimate(f"c{i}", rng.uniform(300, 900),
                                     rng.uniform(0.01, 1.0))
                    for i in range(m)]
            f = fuse_distances(ests)
            assert f.sigma < min(e.sigma for e in ests)

    def test_fused_in_range_and_order_invariant(self):
        rng = np.random.default_rng(22)
        for _ in range(200):
            ests = [DistanceEstimate(f"c{i}", rng.uniform(300, 900),
                                     rng.uniform(0.01, 1.0))
                    for i in range(rng.integers(1, 6))]
            f = fuse_distances(ests)
            assert min(e.distance for e in ests) - 1e-12 <= f.distance
            assert f.distance <= max(e.distance for e in ests) + 1e-12
            g = fuse_distances(list(reversed(ests)))
            assert abs(f.distance - g.distance) < 1e-9
            assert abs(f.sigma - g.sigma) < 1e-12
            assert abs(sum(f.weights.values()) - 1.0) < 1e-9

    def test_dominance_limit(self):
        others = [DistanceEstimate("a", 500.0, 0.2),
                  DistanceEstimate("b", 900.0, 0.2)]
        tiny = DistanceEstimate("c", 700.0, 0.2e-6)
        f = fuse_distances(others + [tiny])
        assert abs(f.distance - 700.0) / 700.0 < 1e-3

    def test_errors(self):
        with pytest.raises(EmptyInput):
            fuse_distances([])
        with pytest.raises(NonPositiveSigma):
            DistanceEstimate("a", 500.0, 0.0)


class TestChordalMean:
    def test_consensus(self):
        rng = np.random.default_rng(23)
        r = random_rotation(rng)
        mean = chordal_mean_rotation([r, r, r], np.ones(3) / 3)
        assert mean.angle_to(r) < 1e-9

    def test_sign_invariance(self):
        rng = np.random.default_rng(24)
        rots = [random_rotation(rng) for _ in range(4)]
        w = np.array([0.1, 0.2, 0.3, 0.4])
        base = chordal_mean_rotation(rots, w)
        flipped = [Rotation(-r.q) if i % 2 else r for i, r in enumerate(rots)]
        again = chordal_mean_rotation(flipped, w)
        assert base.angle_to(again) < 1e-9


def _estimate(camera_id, pose, sigma_t, sigma_d, tag_id=5, frame_id=0):
    t = pose.translation
    return PoseEstimate(
        camera_id=camera_id, frame_id=frame_id, tag_id=tag_id, pose=pose,
        e_proj=0.05, sigma_t=np.asarray(sigma_t, dtype=float),
        distance=float(np.linalg.norm(t)), sigma_distance=sigma_d)


class TestFusePoses:
    def _three_cameras(self):
        cams = {}
        for i, az in enumerate((0.0, 60.0, -60.0)):
            a = math.radians(az)
            pos = 700.0 * np.array([math.sin(a), 0.0, math.cos(a)])
            cams[f"cam{i}"] = make_camera(
                extrinsic=look_at(pos, np.zeros(3)), camera_id=f"cam{i}")
        return cams

    def test_consensus_identity(self):
        cams = self._three_cameras()
        world = RigidTransform(Rotation.from_rotvec([0.2, -0.1, 0.3]),
                               np.array([10.0, -5.0, 20.0]))
        ests = []
        for cid, cam in cams.items():
            tag_cam = cam.world_to_camera().compose(world)
            ests.append(_estimate(cid, tag_cam, [0.1, 0.1, 0.1], 0.1))
        fused = fuse_poses(ests, cams)
        assert np.linalg.norm(fused.pose.translation - world.translation) < 1e-9
        assert fused.pose.rotation.angle_to(world.rotation) < 1e-9
        assert fused.rotation_dispersion_deg < 1e-9
        assert fused.camera_count == 3

    def test_equal_weight_translation_mean(self):
        cam0 = make_camera(camera_id="cam0")
        cam1 = make_camera(camera_id="cam1")
        cams = {"cam0": cam0, "cam1": cam1}
        rot = Rotation.identity()
        e0 = _estimate("cam0", RigidTransform(rot, np.array([0.0, 0.0, 500.0])),
                       [0.1, 0.1, 0.1], 0.1)
        e1 = _estimate("cam1", RigidTransform(rot, np.array([0.0, 0.0, 502.0])),
                       [0.1, 0.1, 0.1], 0.1)
        fused = fuse_poses([e0, e1], cams)
        np.testing.assert_allclose(fused.pose.translation, [0, 0, 501.0],
                                   atol=1e-9)

    def test_sigma_bound_after_frame_alignment(self):
        cams = self._three_cameras()
        world = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, 10.0]))
        rng = np.random.default_rng(25)
        ests = []
        for cid, cam in cams.items():
            tag_cam = cam.world_to_camera().compose(world)
            ests.append(_estimate(cid, tag_cam, rng.uniform(0.05, 0.3, 3),
                                  rng.uniform(0.05, 0.3)))
        fused = fuse_poses(ests, cams)
        world_sigmas = []
        for est in ests:
            R = cams[est.camera_id].extrinsic.rotation.as_matrix()
            world_sigmas.append(np.sqrt((R ** 2) @ (est.sigma_t ** 2)))
        mins = np.min(np.array(world_sigmas), axis=0)
        assert np.all(fused.sigma_t <= mins + 1e-12)

    def test_monte_carlo_minimizer_oracle(self):
        # fused estimate must sit inside the oracle's 3-sigma band, where
        # the oracle numerically minimizes the weighted least-squares cost
        # over many noisy replays
        cams = self._three_cameras()
        world_t = np.array([5.0, -8.0, 12.0])
        world = RigidTransform(Rotation.identity(), world_t)
        sigmas = {"cam0": 0.05, "cam1": 0.15, "cam2": 0.3}
        rng = np.random.default_rng(26)
        n = 10_000
        fused_samples = np.zeros((n, 3))
        for k in range(n):
            ests = []
            for cid, cam in cams.items():
                noise_world = rng.normal(0.0, sigmas[cid], 3)
                tag_cam = cam.world_to_camera().compose(
                    RigidTransform(world.rotation, world_t + noise_world))
                s = sigmas[cid]
                ests.append(_estimate(cid, tag_cam, [s, s, s], s))
            fused_samples[k] = fuse_poses(ests, cams).pose.translation
        # oracle: per-axis weighted mean is the argmin of the weighted
        # squared cost; check the estimator is unbiased within 3 sigma
        w = np.array([1 / 0.05 ** 2, 1 / 0.15 ** 2, 1 / 0.3 ** 2])
        sigma_fused = math.sqrt(1.0 / w.sum())
        mean_err = fused_samples.mean(axis=0) - world_t
        assert np.all(np.abs(mean_err) < 3.0 * sigma_fused / math.sqrt(n) + 1e-9)
        # and its spread matches the inverse-variance prediction within 10%
        assert np.allclose(fused_samples.std(axis=0), sigma_fused, rtol=0.1)

    def test_errors(self):
        cams = self._three_cameras()
        with pytest.raises(NoEstimates):
            fuse_poses([], cams)
        pose = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, 500.0]))
        a = _estimate("cam0", pose, [0.1] * 3, 0.1, tag_id=1)
        b = _estimate("cam1", pose, [0.1] * 3, 0.1, tag_id=2)
        with pytest.raises(FrameMismatch):
            fuse_poses([a, b], cams)
        c = _estimate("nope", pose, [0.1] * 3, 0.1)
        with pytest.raises(FrameMismatch):
            fuse_poses([c], cams)

    def test_zero_sigma_floored(self):
        cams = {"cam0": make_camera(camera_id="cam0"),
                "cam1": make_camera(camera_id="cam1")}
        pose = RigidTransform(Rotation.identity(), np.array([0.0, 0.0, 500.0]))
        ests = [_estimate(cid, pose, [0.0, 0.0, 0.0], 0.0) for cid in cams]
        fused = fuse_poses(ests, cams)
        np.testing.assert_allclose(fused.pose.translation, [0, 0, 500.0],
                                   atol=1e-9)


class TestFuseWorldHypotheses:
    def test_weighted_quaternion_mean_dispersion(self):
        rng = np.random.default_rng(27)
        base = random_rotation(rng)
        spread = 0.01
        hyps = []
        for _ in range(5):
            delta = Rotation.from_rotvec(rng.normal(0, spread, 3))
            pose = RigidTransform(delta.compose(base), rng.normal(0, 1, 3))
            hyps.append(WorldPoseHypothesis(pose, np.full(3, 0.1), 0.1))
        fused = fuse_world_hypotheses(hyps)
        assert fused.pose.rotation.angle_to(base) < 3 * spread
        assert 0.0 < fused.rotation_dispersion_deg < math.degrees(4 * spread)
