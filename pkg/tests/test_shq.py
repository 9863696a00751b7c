import numpy as np
import pytest

from vqcs.errors import ConfigurationError
from vqcs.quantizer import sq_decode_array, sq_encode_array
from vqcs.shq import (
    STAIRCASE,
    AnnealSchedule,
    ShqLayer,
    blend_at,
    build_quantizer,
    shifts_at,
    shq_backward,
    shq_forward,
    steepness_at,
)


def fig_layer(h=40.0):
    return ShqLayer([0.15, 0.4, 0.45], h * np.array([-0.2, 0.0, 2.0 / 3.0]), h)


def rel_err(a, b, floor=1e-3):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class TestForward:
    def test_zero_levels_give_zero(self):
        layer = ShqLayer(np.zeros(3), [-1.0, 0.0, 1.0], 10.0)
        a = np.linspace(-2, 2, 11)
        assert np.all(shq_forward(layer, a) == 0)

    def test_frozen_staircase_values(self):
        # direct evaluation of the weighted-tanh sum at the figure parameters
        layer = fig_layer()
        assert shq_forward(layer, np.array([0.0]))[0] == pytest.approx(
            -0.3000000337605486, abs=1e-15)
        assert shq_forward(layer, np.array([0.1]))[0] == pytest.approx(
            0.09973171988430146, abs=1e-15)
        assert shq_forward(layer, np.array([-0.5]))[0] == pytest.approx(
            -0.9999999999886746, abs=1e-15)

    def test_saturation_bound(self):
        layer = fig_layer()
        out = shq_forward(layer, np.array([50.0, -50.0]))
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-12)
        grid = shq_forward(layer, np.linspace(-100, 100, 1001))
        assert np.all(np.abs(grid) <= 1.0 + 1e-12)

    def test_monotone_in_input(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = np.sort(rng.uniform(0, 1, 4))
            s = np.sort(rng.standard_normal(4))
            layer = ShqLayer(v, s, rng.uniform(0.5, 50))
            out = shq_forward(layer, np.linspace(-3, 3, 500))
            assert np.all(np.diff(out) >= -1e-12)


class TestBackward:
    def test_true_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            i_minus_1 = rng.integers(1, 5)
            v = rng.uniform(0.05, 1.0, i_minus_1)
            s = np.sort(rng.standard_normal(i_minus_1))
            h = rng.uniform(0.5, 8.0)
            layer = ShqLayer(v, s, h)
            a = rng.standard_normal(6)
            delta1 = rng.standard_normal(6)
            xi, gv, gs = shq_backward(layer, a, delta1, beta_t=1.0)

            # loss linear in the layer output with coefficients delta1,
            # evaluated through the independent loop-based forward
            def loss(vv, ss, aa):
                return float(delta1 @ _fwd(vv, ss, h, aa))

            step = 1e-6
            for arr, grad in ((a, xi), (v, gv), (s, gs)):
                fd = np.zeros_like(arr)
                for i in range(arr.size):
                    hi_arr = arr.copy(); hi_arr[i] += step
                    lo_arr = arr.copy(); lo_arr[i] -= step
                    if arr is a:
                        hi = loss(v, s, hi_arr); lo = loss(v, s, lo_arr)
                    elif arr is v:
                        hi = loss(hi_arr, s, a); lo = loss(lo_arr, s, a)
                    else:
                        hi = loss(v, hi_arr, a); lo = loss(v, lo_arr, a)
                    fd[i] = (hi - lo) / (2 * step)
                worst = max(worst, rel_err(grad, fd).max())
        assert worst < 1e-5

    def test_pure_straight_through_passes_delta(self):
        layer = fig_layer()
        a = np.array([0.3, -0.2, 0.05])  # all inside +-sum(v) = +-1
        delta1 = np.array([1.0, -2.0, 0.5])
        xi, _, _ = shq_backward(layer, a, delta1, beta_t=0.0)
        np.testing.assert_array_equal(xi, delta1)

    def test_straight_through_nullifies_saturated_entries(self):
        layer = fig_layer()
        a = np.array([0.3, 5.0, -1.5])  # last two beyond +-1
        delta1 = np.array([1.0, 1.0, 1.0])
        xi, _, _ = shq_backward(layer, a, delta1, beta_t=0.0)
        np.testing.assert_array_equal(xi, [1.0, 0.0, 0.0])

    def test_batched_grads_average_over_batch(self):
        rng = np.random.default_rng(2)
        layer = fig_layer(h=3.0)
        a = rng.standard_normal((5, 4))
        delta1 = rng.standard_normal((5, 4))
        xi, gv, gs = shq_backward(layer, a, delta1, beta_t=0.7)
        parts = [shq_backward(layer, a[k], delta1[k], beta_t=0.7)
                 for k in range(5)]
        np.testing.assert_allclose(xi, np.stack([p[0] for p in parts]),
                                   atol=1e-14)
        np.testing.assert_allclose(gv, np.mean([p[1] for p in parts], axis=0),
                                   atol=1e-14)
        np.testing.assert_allclose(gs, np.mean([p[2] for p in parts], axis=0),
                                   atol=1e-14)

    def test_bad_blend_rejected(self):
        layer = fig_layer()
        with pytest.raises(ConfigurationError):
            shq_backward(layer, np.zeros(2), np.zeros(2), beta_t=1.5)

    def test_stable_at_extreme_steepness(self):
        layer = fig_layer(h=1e4)
        a = np.linspace(-2, 2, 50)
        xi, gv, gs = shq_backward(layer, a, np.ones(50), beta_t=1.0)
        assert np.all(np.isfinite(xi))
        assert np.all(np.isfinite(gv))
        assert np.all(np.isfinite(gs))


def _fwd(v, s, h, a):
    """Reference forward: plain loops over the tanh terms."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    for vi, si in zip(v, s):
        out += vi * np.tanh(h * a - si)
    return out


class TestSchedules:
    def test_steepness_saturates(self):
        sched = AnnealSchedule(5.0, 300.0, alpha=1e-5, beta=1e-7)
        assert steepness_at(sched, 10**9) == 300.0

    def test_steepness_boundary(self):
        sched = AnnealSchedule(5.0, 300.0, alpha=1e-5, beta=1e-7)
        assert steepness_at(sched, 0) == 5.0

    def test_steepness_linear_value(self):
        sched = AnnealSchedule(5.0, 300.0, alpha=1e-5, beta=1e-7)
        assert steepness_at(sched, 10**6) == pytest.approx(15.0)

    def test_staircase_mode(self):
        sched = AnnealSchedule(5.0, 300.0, alpha=0.05, beta=0.0,
                               alpha_mode=STAIRCASE)
        assert steepness_at(sched, 1) == pytest.approx(5.05)
        assert steepness_at(sched, 100) == pytest.approx(5.05)
        assert steepness_at(sched, 101) == pytest.approx(5.10)

    def test_blend_caps_at_one(self):
        sched = AnnealSchedule(5.0, 300.0, alpha=0.0, beta=1e-3)
        assert blend_at(sched, 10) == pytest.approx(0.01)
        assert blend_at(sched, 10**6) == 1.0

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ConfigurationError):
            AnnealSchedule(10.0, 5.0, alpha=0.0, beta=0.0)


class TestShifts:
    def test_two_levels_single_zero_shift(self):
        np.testing.assert_array_equal(shifts_at(2, 123.0), [0.0])

    def test_four_levels(self):
        np.testing.assert_allclose(shifts_at(4, 1.0), [-0.8, 0.0, 0.8],
                                   atol=1e-15)

    def test_three_levels_scaled(self):
        np.testing.assert_allclose(shifts_at(3, 10.0), [-8.0, 8.0], atol=1e-12)

    def test_thresholds_invariant_under_h(self):
        for h in (1.0, 17.0, 300.0):
            np.testing.assert_allclose(shifts_at(6, h) / h, shifts_at(6, 1.0),
                                       atol=1e-12)


class TestBuildQuantizer:
    def test_figure_parameters(self):
        q = build_quantizer(fig_layer())
        np.testing.assert_allclose(q.levels_g, [-1.0, -0.7, 0.1, 1.0],
                                   atol=1e-12)
        np.testing.assert_allclose(q.thresholds_t, [-0.2, 0.0, 2.0 / 3.0],
                                   atol=1e-12)

    def test_two_level_case(self):
        q = build_quantizer(ShqLayer([0.37], [0.0], 10.0))
        np.testing.assert_allclose(q.levels_g, [-0.37, 0.37], atol=1e-15)
        np.testing.assert_allclose(q.thresholds_t, [0.0], atol=1e-15)

    def test_levels_strictly_increasing_for_positive_v(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.uniform(0.01, 1.0, rng.integers(1, 6))
            s = np.sort(rng.standard_normal(v.size))
            q = build_quantizer(ShqLayer(v, s, 7.0))
            assert np.all(np.diff(q.levels_g) > 0)

    def test_soft_to_hard_convergence(self):
        # at h = 300 the soft map matches decode(encode(.)) away from the
        # threshold neighborhoods, for any nonnegative level coefficients
        rng = np.random.default_rng(4)
        for _ in range(10):
            v = rng.uniform(0.05, 0.5, 3)
            h = 300.0
            layer = ShqLayer(v, shifts_at(4, h), h)
            q = build_quantizer(layer)
            grid = np.linspace(-1.5, 1.5, 10_000)
            guard = 10.0 / h
            keep = np.ones_like(grid, dtype=bool)
            for t in q.thresholds_t:
                keep &= np.abs(grid - t) > guard
            soft = shq_forward(layer, grid[keep])
            hard = sq_decode_array(q, sq_encode_array(q, grid[keep]))
            assert np.max(np.abs(soft - hard)) < 1e-3

    def test_midpoint_property_at_thresholds(self):
        rng = np.random.default_rng(5)
        h = 300.0
        v = rng.uniform(0.1, 0.5, 3)
        layer = ShqLayer(v, shifts_at(4, h), h)
        q = build_quantizer(layer)
        for i, t in enumerate(q.thresholds_t):
            val = shq_forward(layer, np.array([t]))[0]
            mid = 0.5 * (q.levels_g[i] + q.levels_g[i + 1])
            assert abs(val - mid) < 1e-10

    def test_plateaus_follow_shift_order_for_unsorted_v(self):
        # staircase plateaus accumulate 2*v_i in shift order; v itself need
        # not be ascending
        q = build_quantizer(ShqLayer([0.45, 0.15, 0.4],
                                     [-8.0, 0.0, 80.0 / 3.0], 40.0))
        np.testing.assert_allclose(q.levels_g, [-1.0, -0.1, 0.2, 1.0],
                                   atol=1e-12)
        np.testing.assert_allclose(q.thresholds_t, [-0.2, 0.0, 2.0 / 3.0],
                                   atol=1e-12)
