import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustkit import Tape, Tensor, backward
from robustkit.errors import ConfigError, NonFiniteError, UsageError, ValidationError
from robustkit.rng import Rng
from robustkit.tensor import (
    BatchNormState,
    add,
    add_const,
    batchnorm,
    channel_affine,
    channel_standardize_const,
    conv2d,
    dense,
    global_avg_pool,
    mul,
    one_hot,
    relu,
    scale,
    slice_channels,
    softmax,
    softmax_cross_entropy,
    tensor_sum,
)

from conftest import conv2d_loops, dense_loops, gradcheck_op, rel_err


class TestConv2d:
    def test_constant_kernel_counting(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, stride=1, pad=1).data[0, 0]
        assert out[1, 1] == 9.0
        for corner in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[corner] == 4.0

    def test_1x1_is_pointwise_affine(self):
        x = Rng(1).uniform((2, 1, 4, 4))
        w, b = 1.7, -0.3
        out = conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), w)), Tensor([b]), stride=1, pad=0)
        assert np.allclose(out.data, np.float32(w) * x.astype(np.float32) + np.float32(b), atol=1e-7)

    def test_against_loop_oracle_random_case(self):
        r = Rng(7)
        x = r.normal((2, 3, 8, 8)).astype(np.float32)
        w = r.normal((4, 3, 3, 3)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data
        ref = conv2d_loops(x, w, stride=1, pad=1)
        assert np.abs(out - ref).max() < 1e-5

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(1, 4), cin=st.integers(1, 4), cout=st.integers(1, 4),
        h=st.integers(1, 8), w=st.integers(1, 8),
        k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]),
        bias=st.booleans(), seed=st.integers(0, 2**31),
    )
    def test_matches_loop_oracle_on_small_shapes(self, n, cin, cout, h, w, k, stride, bias, seed):
        pad = (k - 1) // 2
        if (h + 2 * pad - k) // stride + 1 < 1 or (w + 2 * pad - k) // stride + 1 < 1:
            return
        r = Rng(seed)
        x = r.normal((n, cin, h, w)).astype(np.float32)
        wt = r.normal((cout, cin, k, k)).astype(np.float32)
        b = r.normal((cout,)).astype(np.float32) if bias else None
        out = conv2d(Tensor(x), Tensor(wt), Tensor(b) if bias else None, stride=stride, pad=pad).data
        ref = conv2d_loops(x, wt, b, stride=stride, pad=pad)
        assert np.abs(out - ref).max() < 1e-4

    def test_gradients_match_finite_differences(self):
        r = Rng(3)
        x = r.normal((2, 2, 5, 5))
        w = r.normal((3, 2, 3, 3))
        b = r.normal((3,))
        gradcheck_op(lambda xx, ww, bb: conv2d(xx, ww, bb, stride=2, pad=1), [x, w, b])

    def test_shape_errors_name_dimensions(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ConfigError, match="input has 2, weight expects 3"):
            conv2d(x, w, stride=1, pad=1)
        with pytest.raises(ConfigError, match="stride"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=3, pad=1)
        with pytest.raises(ConfigError, match="pad"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=1, pad=0)


class TestDense:
    def test_identity_weight_zero_bias(self):
        x = Rng(2).uniform((3, 4)).astype(np.float32)
        out = dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, x)

    def test_hand_arithmetic(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor(3.0 * np.eye(2))
        b = Tensor([1.0, 1.0])
        assert np.array_equal(dense(x, w, b).data, [[4.0, 7.0]])

    def test_against_triple_loop_oracle(self):
        r = Rng(5)
        x = r.normal((5, 7)).astype(np.float32)
        w = r.normal((7, 3)).astype(np.float32)
        b = r.normal((3,)).astype(np.float32)
        out = dense(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.abs(out - dense_loops(x, w, b)).max() < 1e-6

    def test_gradients(self):
        r = Rng(6)
        gradcheck_op(dense, [r.normal((4, 5)), r.normal((5, 3)), r.normal((3,))])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ConfigError, match="inner dimensions"):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestElementwise:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_add_mul_pool_gradients(self):
        r = Rng(8)
        gradcheck_op(lambda a: relu(a), [r.normal((3, 4)) + 0.2])
        gradcheck_op(add, [r.normal((2, 3)), r.normal((2, 3))])
        gradcheck_op(mul, [r.normal((2, 3)), r.normal((2, 3))])
        gradcheck_op(lambda a: global_avg_pool(a), [r.normal((2, 3, 4, 4))])
        gradcheck_op(lambda a: scale(a, -1.7), [r.normal((2, 2))])
        gradcheck_op(lambda a: add_const(a, 3.0), [r.normal((2, 2))])

    def test_channel_affine_matches_formula_and_grads(self):
        r = Rng(9)
        x = r.normal((2, 3, 4, 4))
        nu = r.normal((2, 3))
        mu = r.normal((2, 3))
        out = channel_affine(Tensor(x, dtype=np.float64), Tensor(nu, dtype=np.float64),
                             Tensor(mu, dtype=np.float64))
        ref = nu[:, :, None, None] * x + mu[:, :, None, None]
        assert np.allclose(out.data, ref)
        gradcheck_op(channel_affine, [x, nu, mu])

    def test_slice_channels_grads(self):
        r = Rng(10)
        gradcheck_op(lambda a: slice_channels(a, 1, 3), [r.normal((2, 4))])

    def test_standardize_const(self):
        x = Rng(11).uniform((2, 3, 4, 4))
        mean = [0.4, 0.5, 0.6]
        std = [0.2, 0.3, 0.4]
        out = channel_standardize_const(Tensor(x, dtype=np.float64), mean, std)
        ref = (x - np.array(mean)[None, :, None, None]) / np.array(std)[None, :, None, None]
        assert np.allclose(out.data, ref, atol=1e-12)
        gradcheck_op(lambda a: channel_standardize_const(a, mean, std), [x])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_output_is_hard_error(self):
        big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
        with pytest.raises(NonFiniteError):
            add(big, big)


class TestBatchNorm:
    def test_two_point_standardization(self):
        x = Tensor(np.array([1.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1))
        gamma, beta = Tensor(np.ones(1)), Tensor(np.zeros(1))
        state = BatchNormState(1)
        out = batchnorm(x, gamma, beta, state, training=True).data.reshape(-1)
        assert np.allclose(out, [-1.0, 1.0], atol=1e-2)  # eps-corrected

    def test_training_mode_normalizes_per_channel(self):
        x = Rng(12).normal((4, 3, 5, 5), mean=2.0, std=3.0)
        state = BatchNormState(3)
        out = batchnorm(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                        Tensor(np.zeros(3), dtype=np.float64), state, training=True)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-10
        assert np.abs(out.data.std(axis=(0, 2, 3)) - 1.0).max() < 1e-4

    def test_eval_before_training_is_an_error(self):
        state = BatchNormState(2)
        x = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ConfigError, match="uninitialized running statistics"):
            batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False)

    def test_running_stats_update_and_eval(self):
        r = Rng(13)
        state = BatchNormState(2, momentum=0.9)
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        x = r.normal((8, 2, 4, 4), mean=1.0).astype(np.float32)
        batchnorm(Tensor(x), g, b, state, training=True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        assert np.allclose(state.mean, 0.9 * 0.0 + 0.1 * mean, atol=1e-6)
        assert np.allclose(state.var, 0.9 * 1.0 + 0.1 * var, atol=1e-6)
        out = batchnorm(Tensor(x), g, b, state, training=False)
        ref = (x - state.mean[None, :, None, None]) / np.sqrt(state.var + state.eps)[None, :, None, None]
        assert np.allclose(out.data, ref, atol=1e-5)

    def test_update_stats_flag_freezes_running_statistics(self):
        state = BatchNormState(1)
        g, b = Tensor(np.ones(1)), Tensor(np.zeros(1))
        x = Tensor(Rng(14).normal((4, 1, 3, 3)).astype(np.float32))
        batchnorm(x, g, b, state, training=True, update_stats=True)
        frozen_mean = state.mean.copy()
        batchnorm(x, g, b, state, training=True, update_stats=False)
        assert np.array_equal(state.mean, frozen_mean)

    def test_backward_vs_finite_differences_32bit(self):
        # 1e-3 relative tolerance at float32, per the engine contract.  The
        # probe functional is a random weighting (a pure sum is nearly
        # invariant under normalization and would have a vanishing gradient);
        # the numeric side accumulates in float64 to isolate the op's own
        # float32 rounding.
        r = Rng(15)
        x = r.normal((4, 3, 5, 5)).astype(np.float32)
        gamma = (1.0 + 0.1 * r.normal(3)).astype(np.float32)
        beta = (0.1 * r.normal(3)).astype(np.float32)
        rweight = r.normal((4, 3, 5, 5)).astype(np.float32)

        def forward32(xv):
            state = BatchNormState(3)
            return batchnorm(Tensor(xv), Tensor(gamma), Tensor(beta), state, training=True)

        xt = Tensor(x, requires_grad=True, name="x")
        with Tape() as tape:
            state = BatchNormState(3)
            out = batchnorm(xt, Tensor(gamma), Tensor(beta), state, training=True)
            loss = tensor_sum(mul(out, Tensor(rweight)))
        grads = backward(tape, loss)

        def f(xv):
            return float((forward32(xv).data.astype(np.float64) * rweight).sum())

        probes = [(0, 1, 2, 3), (3, 2, 4, 0), (1, 0, 0, 0), (2, 2, 1, 4)]
        for idx in probes:
            h = 1e-2
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = (f(xp) - f(xm)) / (2 * h)
            assert rel_err(grads["x"].data[idx], num, floor=1e-2) <= 1e-3

    def test_backward_vs_finite_differences_64bit(self):
        r = Rng(16)
        x = r.normal((4, 3, 5, 5))
        gamma = 1.0 + 0.2 * r.normal(3)
        beta = 0.1 * r.normal(3)
        rw = r.normal((4, 3, 5, 5))

        def op(xx, gg, bb):
            state = BatchNormState(3)
            out = batchnorm(xx, gg, bb, state, training=True)
            return mul(out, Tensor(rw, dtype=np.float64))

        gradcheck_op(op, [x, gamma, beta], tol=1e-6)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_loss_is_log_m(self):
        logits = Tensor(np.zeros((4, 10)))
        loss = softmax_cross_entropy(logits, np.array([1, 5, 0, 9]))
        assert abs(loss.item() - math.log(10)) < 1e-6

    def test_fixed_point_gradient_is_exactly_zero(self):
        logits_arr = Rng(17).normal((3, 5)).astype(np.float32)
        targets = softmax(logits_arr)
        logits = Tensor(logits_arr, requires_grad=True, name="logits")
        with Tape() as tape:
            loss = softmax_cross_entropy(logits, targets)
        grads = backward(tape, loss)
        assert np.all(grads["logits"].data == 0.0)

    def test_gradient_formula(self):
        r = Rng(18)
        logits_arr = r.normal((6, 4)).astype(np.float32)
        y = np.array([0, 1, 2, 3, 1, 2])
        logits = Tensor(logits_arr, requires_grad=True, name="logits")
        with Tape() as tape:
            loss = softmax_cross_entropy(logits, y)
        grads = backward(tape, loss)
        expected = (softmax(logits_arr) - one_hot(y, 4)) / 6
        assert np.allclose(grads["logits"].data, expected, atol=1e-7)

    def test_gradient_vs_finite_differences(self):
        r = Rng(19)
        logits = r.normal((3, 5))
        t = softmax(r.normal((3, 5)))
        gradcheck_op(lambda lg: softmax_cross_entropy(lg, t), [logits], tol=1e-6)

    def test_soft_target_row_sum_validation(self):
        logits = Tensor(np.zeros((2, 3)))
        bad = np.array([[0.5, 0.5, 0.1], [0.3, 0.3, 0.4]])
        with pytest.raises(ValidationError, match="row 0"):
            softmax_cross_entropy(logits, bad)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(Rng(20).normal((2, 3, 2, 2)), requires_grad=True, name="x")
        with Tape() as tape:
            loss = tensor_sum(x)
        grads = backward(tape, loss)
        assert np.array_equal(grads["x"].data, np.ones((2, 3, 2, 2), dtype=np.float32))

    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0], requires_grad=True, name="x")
        with Tape() as tape:
            loss = tensor_sum(mul(x, x))
        grads = backward(tape, loss)
        assert np.allclose(grads["x"].data, [2.0, -4.0])

    def test_backward_twice_is_a_usage_error(self):
        x = Tensor([1.0], requires_grad=True, name="x")
        with Tape() as tape:
            loss = tensor_sum(x)
        backward(tape, loss)
        with pytest.raises(UsageError, match="twice"):
            backward(tape, loss)

    def test_fanout_accumulates_additively(self):
        x = Tensor([3.0], requires_grad=True, name="x")
        with Tape() as tape:
            loss = tensor_sum(add(mul(x, x), x))  # x^2 + x -> 2x + 1
        grads = backward(tape, loss)
        assert np.allclose(grads["x"].data, [7.0])

    def test_linearity_of_backward(self):
        r = Rng(21)
        xa = r.normal((3, 4)).astype(np.float32)
        a, b = 0.3, -1.25

        def grad_of(f):
            x = Tensor(xa, requires_grad=True, name="x")
            with Tape() as tape:
                loss = f(x)
            return backward(tape, loss)["x"].data

        g1 = grad_of(lambda x: tensor_sum(mul(x, x)))
        g2 = grad_of(lambda x: tensor_sum(relu(x)))
        combined = grad_of(lambda x: add(scale(tensor_sum(mul(x, x)), a),
                                         scale(tensor_sum(relu(x)), b)))
        assert np.allclose(combined, a * g1 + b * g2, atol=1e-6)

    def test_gradients_reach_inputs_and_params(self):
        x = Tensor(Rng(22).normal((2, 3)).astype(np.float32), requires_grad=True, name="input")
        w = Tensor(Rng(23).normal((3, 2)).astype(np.float32), requires_grad=True, name="w")
        with Tape() as tape:
            loss = softmax_cross_entropy(dense(x, w), np.array([0, 1]))
        grads = backward(tape, loss)
        assert "input" in grads and "w" in grads
        assert grads.wrt(x).shape == x.shape

    def test_scalar_rank_guard(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(UsageError, match="scalar"):
            backward(tape, y)
