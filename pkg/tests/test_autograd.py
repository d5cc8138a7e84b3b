"""Reverse-mode gradients: finite-difference checks and tape semantics."""

import numpy as np
import pytest
from conftest import away_from_zero, gradient_check

from vesselseg.errors import UsageError
from vesselseg.loss import LossConfig, dice_term
from vesselseg.nn import (
    BatchNormState,
    GradTape,
    Tensor,
    backward,
    batch_norm,
    binary_cross_entropy,
    concat_channels,
    conv2d,
    max_pool2d,
    relu,
    sigmoid,
    soft_dice,
    sum_squares,
    total_sum,
    upsample_bilinear,
)

SEEDS = range(3)  # the acceptance suite widens this to 20+


def _weighted(x, w):
    """Scalar readout with non-uniform weights so gradients are informative."""
    return total_sum(x * Tensor(w.astype(x.dtype)))


class TestOpGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        readout = rng.standard_normal((2, 3, 5, 5))
        gradient_check(
            lambda ts: _weighted(conv2d(ts["x"], ts["w"], ts["b"], 1, 1), readout),
            {"x": x, "w": w, "b": b})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d_strided(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        readout = rng.standard_normal((1, 2, 3, 3))
        gradient_check(
            lambda ts: _weighted(conv2d(ts["x"], ts["w"], ts["b"], 2, 1), readout),
            {"x": x, "w": w, "b": b})

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm(self, seed, training):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 2, 4, 4))
        gamma = rng.uniform(0.5, 1.5, 2)
        beta = rng.standard_normal(2)
        readout = rng.standard_normal((3, 2, 4, 4))
        state = BatchNormState.create(2)
        state.running_mean[:] = rng.standard_normal(2) * 0.1
        state.running_var[:] = rng.uniform(0.5, 1.5, 2)

        def make(ts):
            return _weighted(batch_norm(ts["x"], ts["g"], ts["b"],
                                        state.copy(), training=training), readout)

        gradient_check(make, {"x": x, "g": gamma, "b": beta})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        x = away_from_zero(rng.standard_normal((2, 3, 4, 4)))
        readout = rng.standard_normal((2, 3, 4, 4))
        gradient_check(lambda ts: _weighted(relu(ts["x"]), readout), {"x": x})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sigmoid(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 3, 3)) * 2
        readout = rng.standard_normal((2, 2, 3, 3))
        gradient_check(lambda ts: _weighted(sigmoid(ts["x"]), readout), {"x": x})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_max_pool(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 8, 8)) * 3
        readout = rng.standard_normal((1, 2, 2, 2))
        gradient_check(lambda ts: _weighted(max_pool2d(ts["x"], 4, 4), readout),
                       {"x": x})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 3, 3))
        readout = rng.standard_normal((1, 2, 6, 6))
        gradient_check(lambda ts: _weighted(upsample_bilinear(ts["x"], 2), readout),
                       {"x": x})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((1, 2, 3, 3))
        b = rng.standard_normal((1, 1, 3, 3))
        readout = rng.standard_normal((1, 3, 3, 3))
        gradient_check(
            lambda ts: _weighted(concat_channels([ts["a"], ts["b"]]), readout),
            {"a": a, "b": b})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_bce(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0.2, 0.8, (1, 1, 4, 4))
        target = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        gradient_check(lambda ts: binary_cross_entropy(ts["p"], target, 1e-7),
                       {"p": pred})

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("mode", ["log", "linear"])
    def test_dice_term(self, seed, mode):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0.2, 0.8, (1, 1, 4, 4))
        target = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        cfg = LossConfig(dice_mode=mode)
        gradient_check(lambda ts: dice_term(ts["p"], target, cfg), {"p": pred})

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sum_squares(self, seed):
        rng = np.random.default_rng(seed)
        gradient_check(lambda ts: sum_squares([ts["a"], ts["b"]]),
                       {"a": rng.standard_normal((2, 3)),
                        "b": rng.standard_normal(4)})


class TestBackwardSemantics:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                   requires_grad=True)
        with GradTape() as tape:
            grads = backward(tape, total_sum(x))
        assert np.array_equal(grads[x], np.ones((3, 4), dtype=np.float32))

    def test_sigmoid_at_zero_weight(self):
        w = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        with GradTape() as tape:
            loss = total_sum(sigmoid(w * 1.0))
            grads = backward(tape, loss)
        assert grads[w][0] == pytest.approx(0.25)

    def test_relu_subgradient_zero_at_negative(self):
        x = Tensor(np.array([-1.0, 2.0], dtype=np.float32), requires_grad=True)
        with GradTape() as tape:
            grads = backward(tape, total_sum(relu(x)))
        np.testing.assert_array_equal(grads[x], [0.0, 1.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
        with GradTape() as tape:
            y = relu(x)
        with pytest.raises(UsageError):
            backward(tape, y)

    def test_reused_tensor_accumulates(self, rng):
        x = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
        with GradTape() as tape:
            loss = total_sum(x + x)
            grads = backward(tape, loss)
        np.testing.assert_allclose(grads[x], np.full(4, 2.0), atol=1e-6)

    def test_two_layer_conv_net_hybrid_style_loss(self):
        rng = np.random.default_rng(99)
        x = rng.standard_normal((1, 1, 6, 6))
        w1 = rng.standard_normal((2, 1, 3, 3)) * 0.5
        b1 = rng.standard_normal(2) * 0.1
        w2 = rng.standard_normal((1, 2, 3, 3)) * 0.5
        b2 = rng.standard_normal(1) * 0.1
        target = (rng.random((1, 1, 6, 6)) > 0.7).astype(np.float64)
        cfg = LossConfig(l2_coefficient=0.0)

        def make(ts):
            h = relu(conv2d(ts["x"], ts["w1"], ts["b1"], 1, 1))
            p = sigmoid(conv2d(h, ts["w2"], ts["b2"], 1, 1))
            return binary_cross_entropy(p, target, cfg.epsilon_clamp) \
                + dice_term(p, target, cfg)

        gradient_check(make, {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2})


class TestTapeInvariants:
    def test_each_node_visited_once_in_reverse(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)).astype(np.float32),
                   requires_grad=True)
        with GradTape() as tape:
            a = relu(x)
            b = sigmoid(a)
            c = a + b
            loss = total_sum(c)
        visited = []
        for i, node in enumerate(tape.nodes):
            orig = node.backward_fn
            node.backward_fn = (lambda orig, i: lambda g:
                                (visited.append(i), orig(g))[1])(orig, i)
        backward(tape, loss)
        assert visited == sorted(visited, reverse=True)
        assert len(visited) == len(set(visited)) == len(tape.nodes)

    def test_no_recording_without_tape(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32),
                   requires_grad=True)
        relu(x)  # outside any tape: nothing to record, nothing breaks
        with GradTape() as tape:
            pass
        assert tape.nodes == []

    def test_ops_without_grad_inputs_not_recorded(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32))
        with GradTape() as tape:
            relu(x)
        assert tape.nodes == []
