import io
import math

import numpy as np
import pytest

from vqcs.errors import ConfigurationError, DivergenceError, ShapeError
from vqcs.nnet import (
    IDENTITY,
    TANH,
    AdamState,
    FeedforwardNet,
    adam_step,
    adam_update_arrays,
    backprop,
    forward,
    init_net,
    read_net_segment,
    write_net_segment,
)


def rel_err(a, b, floor=1e-3):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def slow_forward(net, x):
    """Independent re-evaluation with explicit per-neuron loops."""
    a = list(x)
    for w, b, tag in zip(net.weights, net.biases, net.activations[1:]):
        c = []
        for row in range(w.shape[0]):
            acc = b[row]
            for col in range(w.shape[1]):
                acc += w[row, col] * a[col]
            c.append(acc)
        a = [math.tanh(v) if tag == TANH else v for v in c]
    return np.array(a)


def fd_param_grads(net, x, target, step=1e-6):
    """Central finite differences of sum((out - target)^2) per parameter."""
    def loss():
        out = forward(net, x).output
        return float(np.sum((out - target) ** 2))

    grads = []
    for arr in net.weights + net.biases:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss()
            flat[i] = orig - step
            lo = loss()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def random_net(rng, widths=(5, 8, 6, 4)):
    acts = [IDENTITY] + [TANH] * (len(widths) - 1)
    return init_net(widths, acts, rng)


class TestInit:
    def test_shapes_and_zero_biases(self):
        net = init_net([10, 50, 10], [IDENTITY, TANH, TANH],
                       np.random.default_rng(0))
        assert net.weights[0].shape == (50, 10)
        assert net.weights[1].shape == (10, 50)
        assert all(np.all(b == 0) for b in net.biases)

    def test_fan_in_variance(self):
        net = init_net([10, 50, 10], [IDENTITY, TANH, TANH],
                       np.random.default_rng(1))
        assert abs(net.weights[0].var() - 0.1) < 0.02

    def test_fan_in_variance_monte_carlo(self):
        # 10^6 pooled entries at fan_in 100
        net = init_net([100, 10_000], [IDENTITY, TANH],
                       np.random.default_rng(2))
        assert 0.0095 <= net.weights[0].var() <= 0.0105

    def test_mismatched_activations_rejected(self):
        with pytest.raises(ConfigurationError):
            init_net([4, 3], [IDENTITY], np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            init_net([4, 3], [TANH, TANH], np.random.default_rng(0))


class TestForward:
    def test_linear_net_is_matrix_product(self):
        rng = np.random.default_rng(3)
        net = init_net([4, 6, 3], [IDENTITY, IDENTITY, IDENTITY], rng)
        x = rng.standard_normal(4)
        expected = net.weights[1] @ (net.weights[0] @ x)
        np.testing.assert_allclose(forward(net, x).output, expected, atol=1e-14)

    def test_single_tanh_layer(self):
        net = FeedforwardNet([2, 2], [np.eye(2)], [np.zeros(2)],
                             [IDENTITY, TANH])
        out = forward(net, np.array([0.5, -0.5])).output
        np.testing.assert_allclose(out, [np.tanh(0.5), np.tanh(-0.5)],
                                   atol=1e-15)

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(4)
        net = random_net(rng)
        for _ in range(10):
            x = rng.standard_normal(5)
            np.testing.assert_allclose(forward(net, x).output,
                                       slow_forward(net, x), atol=1e-13)

    def test_batch_rows_match_single_calls(self):
        rng = np.random.default_rng(5)
        net = random_net(rng)
        xs = rng.standard_normal((7, 5))
        batch_out = forward(net, xs).output
        for k in range(7):
            np.testing.assert_allclose(batch_out[k], forward(net, xs[k]).output,
                                       atol=1e-14)

    def test_trace_is_consistent(self):
        rng = np.random.default_rng(6)
        net = random_net(rng)
        trace = forward(net, rng.standard_normal(5))
        assert len(trace.outputs) == net.depth
        for c, a, tag in zip(trace.weighted_inputs[1:], trace.outputs[1:],
                             net.activations[1:]):
            expect = np.tanh(c) if tag == TANH else c
            np.testing.assert_array_equal(a, expect)

    def test_wrong_width_rejected(self):
        net = random_net(np.random.default_rng(7))
        with pytest.raises(ShapeError):
            forward(net, np.zeros(6))

    def test_deterministic_bits(self):
        rng = np.random.default_rng(8)
        net = random_net(rng)
        x = rng.standard_normal(5)
        a = forward(net, x).output
        b = forward(net, x).output
        assert a.tobytes() == b.tobytes()


class TestBackprop:
    def test_zero_output_grad_gives_zero(self):
        rng = np.random.default_rng(9)
        net = random_net(rng)
        trace = forward(net, rng.standard_normal(5))
        grads = backprop(net, trace, np.zeros(4))
        assert all(np.all(g == 0) for g in grads.arrays())
        assert np.all(grads.input_grad == 0)

    def test_one_layer_least_squares_closed_form(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((3, 4))
        net = FeedforwardNet([4, 3], [w.copy()], [np.zeros(3)],
                             [IDENTITY, IDENTITY])
        x = rng.standard_normal(4)
        b = rng.standard_normal(3)
        trace = forward(net, x)
        grads = backprop(net, trace, 2.0 * (trace.output - b))
        np.testing.assert_allclose(grads.weight_grads[0],
                                   np.outer(2.0 * (w @ x - b), x), atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        net = random_net(rng)
        x = rng.standard_normal(5)
        target = rng.standard_normal(4)
        trace = forward(net, x)
        grads = backprop(net, trace, 2.0 * (trace.output - target))
        fd = fd_param_grads(net, x, target)
        analytic = grads.arrays()
        for a, f in zip(analytic, fd):
            assert rel_err(a, f).max() < 1e-5

    def test_invariant_gradients_at_100_random_points(self):
        rng = np.random.default_rng(12)
        net = init_net([8, 16, 16, 8], [IDENTITY, TANH, TANH, TANH], rng)
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal(8)
            target = rng.standard_normal(8)
            trace = forward(net, x)
            grads = backprop(net, trace, 2.0 * (trace.output - target))
            fd = fd_param_grads(net, x, target)
            for a, f in zip(grads.arrays(), fd):
                worst = max(worst, rel_err(a, f).max())
        assert worst < 1e-5

    def test_input_grad_chain_closure(self):
        rng = np.random.default_rng(13)
        net = random_net(rng)
        x = rng.standard_normal(5)
        target = rng.standard_normal(4)
        trace = forward(net, x)
        grads = backprop(net, trace, 2.0 * (trace.output - target))
        step = 1e-6
        fd = np.zeros(5)
        for i in range(5):
            xp = x.copy(); xp[i] += step
            xm = x.copy(); xm[i] -= step
            hi = float(np.sum((forward(net, xp).output - target) ** 2))
            lo = float(np.sum((forward(net, xm).output - target) ** 2))
            fd[i] = (hi - lo) / (2 * step)
        assert rel_err(grads.input_grad, fd).max() < 1e-5

    def test_batch_grads_are_sample_means(self):
        rng = np.random.default_rng(14)
        net = random_net(rng)
        xs = rng.standard_normal((6, 5))
        targets = rng.standard_normal((6, 4))
        trace = forward(net, xs)
        grads = backprop(net, trace, 2.0 * (trace.output - targets))
        singles = []
        for k in range(6):
            tr_k = forward(net, xs[k])
            singles.append(backprop(net, tr_k, 2.0 * (tr_k.output - targets[k])))
        for i in range(len(net.weights)):
            mean = np.mean([s.weight_grads[i] for s in singles], axis=0)
            np.testing.assert_allclose(grads.weight_grads[i], mean, atol=1e-12)
        np.testing.assert_allclose(
            grads.input_grad, np.stack([s.input_grad for s in singles]),
            atol=1e-12)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        rng = np.random.default_rng(15)
        net = random_net(rng)
        before = [w.copy() for w in net.weights]
        state = AdamState.for_net(net, 1e-2, 1e-4)
        zero = [np.zeros_like(a) for a in net.weights + net.biases]
        adam_update_arrays(state, net.weights + net.biases, zero, 1)
        for w, w0 in zip(net.weights, before):
            np.testing.assert_array_equal(w, w0)

    def test_schedule_floor(self):
        state = AdamState.for_arrays([np.zeros(1)], 1e-2, 1e-4)
        assert state.scale_at(4) == pytest.approx(5e-3)
        assert state.scale_at(10**6) == pytest.approx(1e-4)
        assert state.scale_at(10**8) == pytest.approx(1e-4)

    def test_constant_gradient_limit(self):
        # per-coordinate step magnitude approaches scale * sign(g)
        param = np.zeros(3)
        grad = np.array([2.0, -0.5, 1e-3])
        state = AdamState.for_arrays([param], 1e-2, 1e-9)
        prev = param.copy()
        for t in range(1, 301):
            adam_update_arrays(state, [param], [grad.copy()], t)
            if t > 250:
                step = param - prev
                np.testing.assert_allclose(
                    np.abs(step), state.scale_at(t), rtol=1e-3)
                assert np.all(np.sign(step) == -np.sign(grad))
            prev = param.copy()

    def test_non_finite_gradient_raises(self):
        param = np.zeros(2)
        state = AdamState.for_arrays([param], 1e-2, 1e-4)
        with pytest.raises(DivergenceError):
            adam_update_arrays(state, [param], [np.array([1.0, np.nan])], 1)

    def test_adam_step_wraps_net(self):
        rng = np.random.default_rng(16)
        net = random_net(rng)
        x = rng.standard_normal(5)
        trace = forward(net, x)
        grads = backprop(net, trace, np.ones(4))
        w0 = net.weights[0].copy()
        adam_step(AdamState.for_net(net, 1e-2, 1e-4), net, grads, 1)
        assert not np.allclose(net.weights[0], w0)


class TestSegmentIo:
    def test_roundtrip(self):
        rng = np.random.default_rng(17)
        net = random_net(rng)
        buf = io.BytesIO()
        write_net_segment(buf, net)
        buf.seek(0)
        loaded = read_net_segment(buf)
        assert loaded.widths == net.widths
        assert loaded.activations == net.activations
        for a, b in zip(loaded.weights + loaded.biases,
                        net.weights + net.biases):
            assert a.tobytes() == b.tobytes()
