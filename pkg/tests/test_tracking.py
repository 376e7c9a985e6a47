import math

import numpy as np
import pytest

from coopvru.core import validate_covariance
from coopvru.perception import Detection, SensorModel, sense
from coopvru.tracking import (
    ImmParams,
    ImmTrack,
    Tracker,
    associate,
    ca_matrices,
    cv_matrices,
    imm_step,
    kalman_update,
)


def det(x, y, t=0.0, var=0.25, agent=1):
    return Detection(agent, t, x, y, ((var, 0.0), (0.0, var)), 0.8)


def fresh_track(x=0.0, y=0.0, vx=0.0, vy=0.0, params=None, pos_var=0.25):
    params = params or ImmParams()
    track = ImmTrack(1, 1, det(x, y, var=pos_var), params)
    track.x_cv[2], track.x_cv[3] = vx, vy
    track.x_ca[2], track.x_ca[3] = vx, vy
    track._refresh_combined()
    return track


class TestKalmanUpdate:
    def test_scalar_gain_oracle(self):
        # prior N((0,0), I), measurement (1,0), R=I: gain 0.5 on each axis
        x = np.zeros(4)
        P = np.eye(4)
        x_new, P_new, lik = kalman_update(x, P, (1.0, 0.0), np.eye(2))
        assert x_new[0] == pytest.approx(0.5)
        assert x_new[1] == pytest.approx(0.0)
        assert P_new[0, 0] == pytest.approx(0.5)
        assert lik == pytest.approx(math.exp(-0.25) / (4.0 * math.pi))

    def test_covariance_stays_valid(self):
        x = np.zeros(4)
        P = np.diag([4.0, 4.0, 1.0, 1.0])
        _, P_new, _ = kalman_update(x, P, (3.0, -2.0), 0.01 * np.eye(2))
        assert validate_covariance(P_new) is None


class TestImmStep:
    def test_cv_only_predict(self):
        params = ImmParams(p_stay=1.0)  # mixing = identity
        track = fresh_track(vx=1.0)
        track.mu = np.array([1.0, 0.0])
        est = imm_step(track, None, 1.0, params)
        assert est.mean[0] == pytest.approx(1.0)
        assert est.mean[1] == pytest.approx(0.0)

    def test_tiny_dt_is_identity(self):
        track = fresh_track(vx=1.0, vy=-0.5)
        before_mean = track.mean.copy()
        before_cov = track.cov.copy()
        est = imm_step(track, None, 1e-12, ImmParams())
        assert np.allclose(est.mean, before_mean, atol=1e-9)
        assert np.allclose(est.cov, before_cov, atol=1e-9)

    def test_symmetric_setup_gives_half_half(self):
        # equal priors, symmetric mixing, measurement at the common predicted
        # mean with matched covariances -> equal likelihoods
        params = ImmParams(q_cv=0.5, q_ca=0.5, accel_prior_var=0.0)
        track = fresh_track(vx=0.0)
        track.mu = np.array([0.5, 0.5])
        est = imm_step(track, det(0.0, 0.0, t=1e-9), 1e-9, params)
        assert est.model_probs[0] == pytest.approx(0.5, abs=1e-6)

    def test_model_probs_sum_to_one_and_cov_valid(self):
        rng = np.random.default_rng(0)
        track = fresh_track()
        t = 0.0
        for i in range(100):
            t += 0.04
            d = det(0.5 * t + rng.normal(0, 0.3), rng.normal(0, 0.3), t=t)
            est = imm_step(track, d if i % 3 else None, 0.04, ImmParams())
            assert abs(est.model_probs.sum() - 1.0) <= 1e-9
            assert validate_covariance(est.cov) is None

    def test_cov_trace_non_decreasing_when_coasting(self):
        track = fresh_track(vx=1.0)
        # settle with a few updates first
        t = 0.0
        for i in range(10):
            t += 0.04
            imm_step(track, det(1.0 * t, 0.0, t=t), 0.04, ImmParams())
        last = np.trace(track.cov)
        for _ in range(25):
            est = imm_step(track, None, 0.04, ImmParams())
            now = float(np.trace(est.cov))
            assert now >= last - 1e-12
            last = now

    def test_noiseless_convergence(self):
        params = ImmParams()
        track = fresh_track(pos_var=1e-12)
        t = 0.0
        err = None
        for _ in range(75):  # 3 s at 25 Hz
            t += 0.04
            tx = 1.5 * t
            imm_step(track, det(tx, 0.0, t=t, var=1e-12), 0.04, params)
            err = abs(track.mean[0] - tx)
        assert err < 1e-3


class TestAssociate:
    def test_far_detection_unmatched(self):
        track = fresh_track()
        pairs, unmatched_dets, unmatched_tracks = associate(
            [track], [det(0.1, 0.0), det(50.0, 0.0)])
        assert pairs[track].x == 0.1
        assert len(unmatched_dets) == 1 and unmatched_dets[0].x == 50.0
        assert unmatched_tracks == []

    def test_no_detections(self):
        track = fresh_track()
        pairs, unmatched_dets, unmatched_tracks = associate([track], [])
        assert not pairs and unmatched_dets == [] and unmatched_tracks == [track]

    def test_two_tracks_two_detections_bijective(self):
        t1 = fresh_track(0.0, 0.0)
        t2 = fresh_track(10.0, 0.0)
        d1, d2 = det(0.3, 0.1), det(9.8, -0.2)
        pairs, unmatched_dets, unmatched_tracks = associate([t1, t2], [d1, d2])
        # exhaustive check: of the two bijections this is the cheaper one
        assert pairs == {t1: d1, t2: d2}
        assert not unmatched_dets and not unmatched_tracks


class TestTrackManage:
    def test_fresh_detection_starts_tentative_track(self):
        tracker = Tracker(1)
        tracker.step(0.0, 0.04, [det(5.0, 5.0)])
        assert len(tracker.tracks) == 1
        assert not next(iter(tracker.tracks.values())).confirmed

    def test_confirmation_after_3_of_4(self):
        tracker = Tracker(1)
        t = 0.0
        for i in range(4):
            tracker.step(t, 0.04, [det(5.0, 5.0, t=t)])
            t += 0.04
        assert next(iter(tracker.tracks.values())).confirmed

    def test_drop_after_coast_budget(self):
        tracker = Tracker(1)
        t = 0.0
        for _ in range(4):
            tracker.step(t, 0.04, [det(5.0, 5.0, t=t)])
            t += 0.04
        assert len(tracker.tracks) == 1
        for _ in range(int(1.6 / 0.04)):
            tracker.step(t, 0.04, [])
            t += 0.04
        assert len(tracker.tracks) == 0

    def test_track_id_survives_one_second_occlusion(self):
        tracker = Tracker(1)
        t = 0.0
        # 25 Hz from a constant-velocity target
        for _ in range(25):
            tracker.step(t, 0.04, [det(2.0 * t, 0.0, t=t, var=0.09)])
            t += 0.04
        tid = next(iter(tracker.tracks))
        for _ in range(25):  # 1.0 s occluded
            tracker.step(t, 0.04, [])
            t += 0.04
        assert tid in tracker.tracks
        for _ in range(5):  # re-detected within the gate
            tracker.step(t, 0.04, [det(2.0 * t, 0.0, t=t, var=0.09)])
            t += 0.04
        assert list(tracker.tracks) == [tid]
        assert tracker.tracks[tid].miss_time == 0.0


class TestFilterConsistency:
    def test_nees_within_chi2_band(self):
        """Average position NEES over Monte-Carlo constant-velocity runs must
        sit inside the 95% chi-square(2 dof) band [0.65, 7.38]."""
        rng = np.random.default_rng(2024)
        params = ImmParams()
        runs, steps, dt, sig = 100, 80, 0.04, 0.5
        nees = []
        for _ in range(runs):
            vx, vy = rng.uniform(-2, 2, size=2)
            x0, y0 = rng.uniform(-5, 5, size=2)
            d0 = det(x0 + rng.normal(0, sig), y0 + rng.normal(0, sig),
                     var=sig * sig)
            track = ImmTrack(1, 1, d0, params)
            t = 0.0
            for k in range(1, steps + 1):
                t = k * dt
                tx, ty = x0 + vx * t, y0 + vy * t
                m = det(tx + rng.normal(0, sig), ty + rng.normal(0, sig),
                        t=t, var=sig * sig)
                est = imm_step(track, m, dt, params)
                if k > 20:  # skip the transient
                    e = est.mean[:2] - np.array([tx, ty])
                    nees.append(float(e @ np.linalg.solve(est.cov[:2, :2], e)))
        avg = float(np.mean(nees))
        assert 0.65 <= avg <= 7.38, f"average NEES {avg}"
