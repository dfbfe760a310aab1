"""Error-state filter: manifold ops, propagation, and the iterated update.

The update is checked against an independently coded covariance-form
Kalman gain K = P H^T (H P H^T + R)^-1, which the implementation never
uses (it solves the information-form normal equations).
"""

import numpy as np
import pytest

from planevio.esikf import (
    BA,
    BG,
    DP,
    DV,
    TH,
    FilterConfig,
    HybridMeasurement,
    ImuSample,
    NavState,
    ReprojectionTerm,
    UpdateResult,
    boxminus,
    boxplus,
    error_transition,
    evaluate_terms,
    iterated_update,
    project_centroids,
    propagate,
    propagate_state,
)
from planevio.geometry import (
    CameraIntrinsics,
    Pixel,
    Pose,
    inverse,
    project,
    so3_exp,
    so3_log,
)

INTR = CameraIntrinsics(350.0, 350.0, 128.0, 128.0)
# camera z forward, body x forward, z up
CAM_TO_BODY = Pose(np.array([[0.0, 0.0, 1.0],
                             [-1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0]]),
                   np.array([0.1, 0.0, 0.05]))


def random_state(rng):
    return NavState(so3_exp(rng.normal(scale=0.5, size=3)),
                    rng.normal(scale=2.0, size=3),
                    rng.normal(scale=1.0, size=3),
                    rng.normal(scale=0.05, size=3),
                    rng.normal(scale=0.01, size=3))


def camera_pose(state):
    """World pose of the camera for a given body state."""
    from planevio.geometry import compose
    return compose(CAM_TO_BODY, state.pose())


def world_points_in_view(state, rng, n):
    cam = camera_pose(state)
    pts_cam = np.column_stack([rng.uniform(-1.5, 1.5, n),
                               rng.uniform(-1.5, 1.5, n),
                               rng.uniform(4.0, 9.0, n)])
    return cam.apply(pts_cam)


class TestManifoldOps:
    def test_boxplus_boxminus_roundtrip(self):
        rng = np.random.default_rng(50)
        for _ in range(20):
            x = random_state(rng)
            d = rng.normal(scale=0.3, size=15)
            np.testing.assert_allclose(boxminus(boxplus(x, d), x), d, atol=1e-10)

    def test_boxminus_boxplus_recovers_state(self):
        rng = np.random.default_rng(51)
        a, b = random_state(rng), random_state(rng)
        c = boxplus(b, boxminus(a, b))
        np.testing.assert_allclose(c.rotation, a.rotation, atol=1e-12)
        np.testing.assert_allclose(c.position, a.position, atol=1e-12)
        np.testing.assert_allclose(c.velocity, a.velocity, atol=1e-12)

    def test_boxplus_shape_check(self):
        with pytest.raises(ValueError):
            boxplus(NavState.identity(), np.zeros(14))


class TestPropagation:
    def test_stationary_state_fixed_point(self):
        cfg = FilterConfig()
        x = NavState.identity()
        s0 = ImuSample(0.0, np.array([0.0, 0.0, 9.81]), np.zeros(3))
        s1 = ImuSample(0.005, np.array([0.0, 0.0, 9.81]), np.zeros(3))
        y = propagate_state(x, s0, s1, cfg)
        np.testing.assert_allclose(y.position, 0.0, atol=1e-15)
        np.testing.assert_allclose(y.velocity, 0.0, atol=1e-15)
        np.testing.assert_allclose(y.rotation, np.eye(3), atol=1e-15)

    def test_constant_rate_rotation_exact(self):
        cfg = FilterConfig()
        w = np.array([0.0, 0.0, 0.4])
        x = NavState.identity()
        dt = 0.005
        for k in range(200):
            s0 = ImuSample(k * dt, np.array([0.0, 0.0, 9.81]), w)
            s1 = ImuSample((k + 1) * dt, np.array([0.0, 0.0, 9.81]), w)
            x = propagate_state(x, s0, s1, cfg)
        np.testing.assert_allclose(x.rotation, so3_exp(w * dt * 200), atol=1e-10)

    def test_bias_subtracted(self):
        cfg = FilterConfig()
        x = NavState.identity()
        x.gyro_bias = np.array([0.0, 0.0, 0.4])
        x.accel_bias = np.array([0.1, 0.0, 0.0])
        s0 = ImuSample(0.0, np.array([0.1, 0.0, 9.81]), np.array([0.0, 0.0, 0.4]))
        s1 = ImuSample(0.01, np.array([0.1, 0.0, 9.81]), np.array([0.0, 0.0, 0.4]))
        y = propagate_state(x, s0, s1, cfg)
        np.testing.assert_allclose(y.rotation, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(y.velocity, 0.0, atol=1e-14)

    def test_transition_matches_finite_differences(self):
        cfg = FilterConfig()
        rng = np.random.default_rng(52)
        x = random_state(rng)
        s0 = ImuSample(0.0, np.array([0.6, -0.3, 9.9]), np.array([0.2, -0.1, 0.3]))
        s1 = ImuSample(0.005, np.array([0.5, -0.2, 9.7]), np.array([0.25, -0.05, 0.28]))
        F, _ = error_transition(x, s0, s1, cfg)
        h = 1e-6
        F_fd = np.zeros((15, 15))
        base_plus = propagate_state
        for j in range(15):
            d = np.zeros(15)
            d[j] = h
            yp = base_plus(boxplus(x, d), s0, s1, cfg)
            ym = base_plus(boxplus(x, -d), s0, s1, cfg)
            y0 = base_plus(x, s0, s1, cfg)
            F_fd[:, j] = (boxminus(yp, y0) - boxminus(ym, y0)) / (2 * h)
        np.testing.assert_allclose(F, F_fd, atol=1e-7)

    def test_covariance_is_fpft_plus_q(self):
        cfg = FilterConfig()
        rng = np.random.default_rng(53)
        x = random_state(rng)
        A = rng.normal(size=(15, 15))
        P = A @ A.T * 1e-4
        s0 = ImuSample(0.0, np.array([0.1, 0.0, 9.8]), np.array([0.0, 0.1, 0.2]))
        s1 = ImuSample(0.004, np.array([0.1, 0.0, 9.8]), np.array([0.0, 0.1, 0.2]))
        F, Q = error_transition(x, s0, s1, cfg)
        _, P1 = propagate(x, P, s0, s1, cfg)
        want = F @ P @ F.T + Q
        np.testing.assert_allclose(P1, 0.5 * (want + want.T), atol=1e-15)
        np.testing.assert_allclose(P1, P1.T, atol=0)
        # from zero uncertainty one step injects exactly the process noise
        _, P_from_zero = propagate(x, np.zeros((15, 15)), s0, s1, cfg)
        np.testing.assert_allclose(P_from_zero, Q, atol=1e-20)
        assert np.trace(P_from_zero) > 0

    def test_bad_timestamps_rejected(self):
        cfg = FilterConfig()
        s = ImuSample(1.0, np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            propagate_state(NavState.identity(), s, s, cfg)


class TestMeasurementModel:
    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(54)
        for _ in range(5):
            x = random_state(rng)
            pts = world_points_in_view(x, rng, 4)
            cam = camera_pose(x)
            terms = [ReprojectionTerm(p, project(INTR, inverse(cam).apply(p)))
                     for p in pts]
            _, H, dropped = evaluate_terms(x, terms, CAM_TO_BODY, INTR, 1e-6)
            assert dropped == 0
            h = 1e-5
            H_fd = np.zeros_like(H)
            for j in range(15):
                d = np.zeros(15)
                d[j] = h
                zp, _, _ = evaluate_terms(boxplus(x, d), terms, CAM_TO_BODY, INTR, 1e-6)
                zm, _, _ = evaluate_terms(boxplus(x, -d), terms, CAM_TO_BODY, INTR, 1e-6)
                H_fd[:, j] = (zp - zm) / (2 * h)
            np.testing.assert_allclose(H, H_fd, rtol=1e-4, atol=1e-4)

    def test_only_pose_columns_nonzero(self):
        rng = np.random.default_rng(55)
        x = random_state(rng)
        pts = world_points_in_view(x, rng, 3)
        terms = [ReprojectionTerm(p, Pixel(0.0, 0.0)) for p in pts]
        _, H, _ = evaluate_terms(x, terms, CAM_TO_BODY, INTR, 1e-6)
        assert np.all(H[:, DV] == 0)
        assert np.all(H[:, BA] == 0)
        assert np.all(H[:, BG] == 0)
        assert np.any(H[:, TH] != 0)
        assert np.any(H[:, DP] != 0)

    def test_residual_zero_at_truth(self):
        rng = np.random.default_rng(56)
        x = random_state(rng)
        cam = camera_pose(x)
        pts = world_points_in_view(x, rng, 5)
        terms = [ReprojectionTerm(p, project(INTR, inverse(cam).apply(p)))
                 for p in pts]
        z, _, _ = evaluate_terms(x, terms, CAM_TO_BODY, INTR, 1e-6)
        np.testing.assert_allclose(z, 0.0, atol=1e-9)

    def test_behind_camera_term_dropped(self):
        x = NavState.identity()
        behind = ReprojectionTerm(np.array([0.0, 0.0, -5.0]), Pixel(10.0, 10.0))
        z, H, dropped = evaluate_terms(x, [behind], CAM_TO_BODY, INTR, 1e-6)
        assert dropped == 1
        np.testing.assert_allclose(z, 0.0)
        np.testing.assert_allclose(H, 0.0)


class TestProjectCentroids:
    class _C:
        def __init__(self, p):
            self.position = np.asarray(p, dtype=float)

    def test_center_pixel_hand_value(self):
        # body at origin; centroid 5 m ahead on the camera axis
        c = self._C(CAM_TO_BODY.apply(np.array([0.0, 0.0, 5.0])))
        got = project_centroids(NavState.identity(), [c], CAM_TO_BODY, INTR, 256, 256)
        assert len(got) == 1
        assert got[0][1].u == pytest.approx(128.0, abs=1e-9)
        assert got[0][1].v == pytest.approx(128.0, abs=1e-9)

    def test_behind_and_outside_filtered(self):
        cs = [self._C(CAM_TO_BODY.apply(np.array([0.0, 0.0, -3.0]))),
              self._C(CAM_TO_BODY.apply(np.array([5.0, 0.0, 2.0]))),
              self._C(CAM_TO_BODY.apply(np.array([0.1, -0.1, 6.0])))]
        got = project_centroids(NavState.identity(), cs, CAM_TO_BODY, INTR, 256, 256)
        assert len(got) == 1
        np.testing.assert_allclose(got[0][0].position, cs[2].position)

    def test_margin_shrinks_acceptance(self):
        c = self._C(CAM_TO_BODY.apply(np.array([1.7, 0.0, 5.0])))  # u ~ 247
        assert project_centroids(NavState.identity(), [c], CAM_TO_BODY, INTR,
                                 256, 256, margin=0.0)
        assert not project_centroids(NavState.identity(), [c], CAM_TO_BODY, INTR,
                                     256, 256, margin=12.0)


class TestIteratedUpdate:
    def make_problem(self, rng, n_feat=8, n_cent=8, px_noise=0.0):
        truth = random_state(rng)
        cam = camera_pose(truth)
        pts = world_points_in_view(truth, rng, n_feat + n_cent)
        cfg = FilterConfig()

        def term(p, sigma):
            px = project(INTR, inverse(cam).apply(p))
            return ReprojectionTerm(p, Pixel(px.u + sigma * rng.normal(),
                                             px.v + sigma * rng.normal()))

        feats = [term(p, px_noise) for p in pts[:n_feat]]
        cents = [term(p, px_noise * np.sqrt(2.0)) for p in pts[n_feat:]]
        prior_err = np.concatenate([rng.normal(scale=0.01, size=3),
                                    rng.normal(scale=0.03, size=3),
                                    np.zeros(9)])
        prior = boxplus(truth, prior_err)
        P = np.diag(np.concatenate([np.full(3, 1e-4), np.full(3, 9e-4),
                                    np.full(3, 1e-4), np.full(6, 1e-8)]))
        return truth, prior, P, feats, cents, cfg

    def test_single_iteration_equals_covariance_form_gain(self):
        rng = np.random.default_rng(57)
        truth, prior, P, feats, cents, cfg = self.make_problem(rng, px_noise=0.5)
        cfg.max_iterations = 1
        meas = HybridMeasurement(features=feats, centroids=cents)
        res = iterated_update(prior, P, meas, CAM_TO_BODY, INTR, cfg)

        # independent oracle: covariance-form gain at the prior
        terms = feats + cents
        z, H, _ = evaluate_terms(prior, terms, CAM_TO_BODY, INTR, cfg.min_depth)
        Rd = np.diag([cfg.feature_variance_px2] * (2 * len(feats))
                     + [cfg.centroid_variance_px2] * (2 * len(cents)))
        K = P @ H.T @ np.linalg.inv(H @ P @ H.T + Rd)
        want_state = boxplus(prior, -K @ z)
        want_cov = (np.eye(15) - K @ H) @ P

        np.testing.assert_allclose(boxminus(res.state, want_state), 0.0, atol=1e-12)
        np.testing.assert_allclose(res.covariance, 0.5 * (want_cov + want_cov.T),
                                   rtol=1e-9, atol=1e-14)
        assert not res.degraded

    def test_zero_noise_recovers_truth(self):
        rng = np.random.default_rng(58)
        truth, prior, P, feats, cents, cfg = self.make_problem(rng, n_feat=15,
                                                               n_cent=15)
        # prior wide enough that its pull on the optimum is < 1e-9
        P = P * 1e8
        meas = HybridMeasurement(features=feats, centroids=cents)
        res = iterated_update(prior, P, meas, CAM_TO_BODY, INTR, cfg)
        assert res.converged
        d = boxminus(res.state, truth)
        assert np.linalg.norm(d[TH]) < 1e-6
        assert np.linalg.norm(d[DP]) < 1e-6
        for a, b in zip(res.costs, res.costs[1:]):
            assert b <= a + 1e-9

    def test_hybrid_beats_single_sources(self):
        rng = np.random.default_rng(59)
        errs = {"hybrid": [], "features": [], "centroids": []}
        for _ in range(100):
            truth, prior, P, feats, cents, cfg = self.make_problem(
                rng, n_feat=10, n_cent=10, px_noise=1.0)

            def pose_err(res):
                d = boxminus(res.state, truth)
                return np.linalg.norm(d[:6])

            errs["hybrid"].append(pose_err(iterated_update(
                prior, P, HybridMeasurement(feats, cents), CAM_TO_BODY, INTR, cfg)))
            errs["features"].append(pose_err(iterated_update(
                prior, P, HybridMeasurement(feats, []), CAM_TO_BODY, INTR, cfg)))
            errs["centroids"].append(pose_err(iterated_update(
                prior, P, HybridMeasurement([], cents), CAM_TO_BODY, INTR, cfg)))
        assert np.median(errs["hybrid"]) < np.median(errs["features"])
        assert np.median(errs["hybrid"]) < np.median(errs["centroids"])

    def test_empty_measurement_returns_prior(self):
        rng = np.random.default_rng(60)
        prior = random_state(rng)
        P = np.eye(15) * 1e-3
        res = iterated_update(prior, P, HybridMeasurement(), CAM_TO_BODY, INTR)
        assert res.iterations == 0
        np.testing.assert_allclose(boxminus(res.state, prior), 0.0)
        np.testing.assert_allclose(res.covariance, P)

    def test_behind_camera_terms_counted_dropped(self):
        rng = np.random.default_rng(61)
        truth, prior, P, feats, cents, cfg = self.make_problem(rng)
        feats.append(ReprojectionTerm(
            camera_pose(truth).apply(np.array([0.0, 0.0, -4.0])), Pixel(0.0, 0.0)))
        res = iterated_update(prior, P, HybridMeasurement(feats, cents),
                              CAM_TO_BODY, INTR, cfg)
        assert res.dropped_terms == 1
        assert not res.degraded

    def test_singular_prior_covariance_degrades(self):
        rng = np.random.default_rng(62)
        truth, prior, P, feats, cents, cfg = self.make_problem(rng)
        res = iterated_update(prior, np.zeros((15, 15)),
                              HybridMeasurement(feats, cents), CAM_TO_BODY, INTR, cfg)
        assert res.degraded
        np.testing.assert_allclose(boxminus(res.state, prior), 0.0)
