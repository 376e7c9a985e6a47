import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coopvru.core import (
    CYCLIST_PRIMITIVES,
    PEDESTRIAN_PRIMITIVES,
    DegenerateWeightsError,
    KinematicState,
    MalformedInputError,
    MovementPrimitive,
    SecondOrderDistribution,
    normalize_distribution,
    second_order_mean_and_uncertainty,
    validate_covariance,
    wrap_angle,
)


class TestValidateCovariance:
    def test_identity_ok(self):
        assert validate_covariance(np.eye(2)) is None

    def test_indefinite_rejected(self):
        # eigenvalues are 3 and -1
        assert "PSD" in validate_covariance([[1.0, 2.0], [2.0, 1.0]])

    def test_asymmetric_rejected(self):
        assert validate_covariance([[1.0, 0.5], [0.4, 1.0]]) == "not symmetric"

    def test_non_square_raises(self):
        with pytest.raises(MalformedInputError):
            validate_covariance(np.ones((2, 3)))

    def test_non_finite_raises(self):
        with pytest.raises(MalformedInputError):
            validate_covariance([[np.inf, 0.0], [0.0, 1.0]])

    def test_tiny_negative_eigenvalue_tolerated(self):
        m = np.eye(3)
        m[0, 0] = -1e-12  # within -1e-9 * trace
        assert validate_covariance(m) is None


class TestNormalizeDistribution:
    def test_symmetric_pair(self):
        assert np.allclose(normalize_distribution([2.0, 2.0]), [0.5, 0.5])

    def test_already_normalized(self):
        out = normalize_distribution([1.0, 0.0, 0.0])
        assert np.allclose(out, [1.0, 0.0, 0.0])

    def test_three_to_one(self):
        assert np.allclose(normalize_distribution([3.0, 1.0]), [0.75, 0.25])

    def test_all_zero_raises(self):
        with pytest.raises(DegenerateWeightsError):
            normalize_distribution([0.0, 0.0])

    def test_negative_raises(self):
        with pytest.raises(DegenerateWeightsError):
            normalize_distribution([1.0, -0.5])

    @given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=8).filter(lambda w: sum(w) > 0))
    def test_sums_to_one(self, w):
        assert abs(normalize_distribution(w).sum() - 1.0) <= 1e-12


class TestSecondOrder:
    def test_uncertainty_limit_small_evidence(self):
        d = SecondOrderDistribution.uniform(CYCLIST_PRIMITIVES, s=1e-12)
        _, u = second_order_mean_and_uncertainty(d)
        assert u == pytest.approx(1.0, abs=1e-9)

    def test_uncertainty_half_at_s_equals_k(self):
        d = SecondOrderDistribution.uniform(CYCLIST_PRIMITIVES, s=6.0)
        _, u = second_order_mean_and_uncertainty(d)
        assert u == pytest.approx(0.5)

    def test_uncertainty_k2_s18(self):
        # hand oracle: K/(s+K) = 2/20
        two = (MovementPrimitive.WAITING, MovementPrimitive.WALKING)
        d = SecondOrderDistribution(two, [0.3, 0.7], 18.0)
        mean, u = second_order_mean_and_uncertainty(d)
        assert u == pytest.approx(0.1)
        assert np.allclose(mean, [0.3, 0.7])

    def test_probability_roundtrip(self):
        d = SecondOrderDistribution(PEDESTRIAN_PRIMITIVES, [0.5, 0.2, 0.1, 0.1, 0.1], 4.0)
        assert np.allclose(normalize_distribution(d.p), d.p, atol=1e-12)

    @given(st.floats(0.1, 1e6), st.floats(1.001, 10.0))
    def test_uncertainty_strictly_decreasing_in_s(self, s, factor):
        d1 = SecondOrderDistribution.uniform(CYCLIST_PRIMITIVES, s)
        d2 = SecondOrderDistribution.uniform(CYCLIST_PRIMITIVES, s * factor)
        _, u1 = second_order_mean_and_uncertainty(d1)
        _, u2 = second_order_mean_and_uncertainty(d2)
        assert u2 < u1

    def test_invalid_probability_sum_rejected(self):
        with pytest.raises(MalformedInputError):
            SecondOrderDistribution(CYCLIST_PRIMITIVES, [0.5, 0.2, 0.1, 0.1, 0.1, 0.2], 1.0)

    def test_zero_evidence_rejected(self):
        with pytest.raises(MalformedInputError):
            SecondOrderDistribution.uniform(CYCLIST_PRIMITIVES, 0.0)

    def test_concentrated(self):
        d = SecondOrderDistribution.concentrated(
            CYCLIST_PRIMITIVES, MovementPrimitive.STARTING, 5.0, leak=0.1
        )
        assert d.argmax() == MovementPrimitive.STARTING
        assert d.p.max() == pytest.approx(0.9)


class TestKinematicState:
    def test_heading_wrapped(self):
        k = KinematicState(0.0, 0.0, heading=3.0 * math.pi)
        assert -math.pi < k.heading <= math.pi
        assert k.heading == pytest.approx(math.pi)

    def test_non_finite_rejected(self):
        with pytest.raises(MalformedInputError):
            KinematicState(float("nan"), 0.0)

    def test_speed(self):
        assert KinematicState(0, 0, vx=3.0, vy=4.0).speed == pytest.approx(5.0)

    @given(st.floats(-50.0, 50.0))
    def test_wrap_angle_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)
        assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-9)
