"""Hybrid loss components and their invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselseg.arch import ArchConfig, ForwardOutput, build_network, forward
from vesselseg.errors import DimensionError
from vesselseg.loss import LossConfig, bce, branch_loss, dice_term, hybrid_loss, l2_penalty
from vesselseg.nn import Tensor, soft_dice


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def tiny_net(seed=0, l2=True):
    cfg = ArchConfig(kind="unet", num_scales=2, base_channels=2,
                     input_size=8, deep_supervision=False)
    return build_network(cfg, seed=seed)


class TestBce:
    def test_midpoint_is_ln2(self):
        assert float(bce(t([1.0 * 0 + 0.5]), np.array([1.0]))) == \
            pytest.approx(np.log(2), abs=1e-6)

    def test_perfect_binary_hits_clamp_floor(self):
        y = np.array([1.0, 0.0, 1.0, 0.0])
        assert float(bce(t(y), y, 1e-7)) <= 1.1e-7

    def test_hand_computed_value(self):
        want = -(np.log(0.9) + np.log(0.8)) / 2  # = 0.164252...
        exact = float(bce(Tensor(np.array([0.9, 0.2])), np.array([1.0, 0.0])))
        assert exact == pytest.approx(want, abs=1e-12)
        got32 = float(bce(t([0.9, 0.2]), np.array([1.0, 0.0])))
        assert got32 == pytest.approx(0.164252, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bce(t([0.5, 0.5]), np.array([1.0]))

    def test_complementation_symmetry(self, rng):
        p = rng.uniform(0.01, 0.99, 32).astype(np.float32)
        y = (rng.random(32) > 0.5).astype(np.float64)
        assert float(bce(t(p), y)) == pytest.approx(
            float(bce(t(1.0 - p), 1.0 - y)), abs=1e-6)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_toward_target(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.02, 0.98, 16)
        y = (rng.random(16) > 0.5).astype(np.float64)
        step = rng.uniform(0.0, 1.0, 16)
        closer = p + step * (y - p)  # every pixel moves toward its target
        assert float(bce(t(closer), y)) <= float(bce(t(p), y)) + 1e-9


class TestSoftDice:
    def test_identical_nonzero_masks(self):
        y = np.array([1.0, 0.0, 1.0])
        assert float(soft_dice(t(y), y)) == 1.0

    def test_disjoint_supports(self):
        assert float(soft_dice(t([1.0, 0.0]), np.array([0.0, 1.0]))) == 0.0

    def test_half_overlap(self):
        assert float(soft_dice(t([0.5, 0.5]), np.array([1.0, 0.0]))) == \
            pytest.approx(0.5)

    def test_empty_empty_defined_as_one(self):
        assert float(soft_dice(t([0.0, 0.0]), np.array([0.0, 0.0]))) == 1.0

    def test_not_complementation_invariant(self, rng):
        p = rng.uniform(0.1, 0.9, 16).astype(np.float32)
        y = np.zeros(16)
        y[:3] = 1.0
        a = float(soft_dice(t(p), y))
        b = float(soft_dice(t(1.0 - p), 1.0 - y))
        assert abs(a - b) > 1e-3


class TestDiceTerm:
    def test_log_mode_zero_at_perfect(self):
        y = np.array([1.0, 0.0, 1.0])
        assert float(dice_term(t(y), y, LossConfig())) == pytest.approx(0.0, abs=1e-9)

    def test_log_mode_at_total_miss(self):
        got = float(dice_term(t([1.0, 0.0]), np.array([0.0, 1.0]),
                              LossConfig(epsilon_clamp=1e-7)))
        want = np.log(1.0 + 1e-7) - np.log(1e-7)  # ~16.118
        assert got == pytest.approx(want, abs=1e-6)
        assert got == pytest.approx(16.118, abs=1e-3)

    def test_linear_mode_half(self):
        got = float(dice_term(t([0.5, 0.5]), np.array([1.0, 0.0]),
                              LossConfig(dice_mode="linear")))
        assert got == pytest.approx(0.5)


class TestL2Penalty:
    def test_zero_coefficient(self):
        assert float(l2_penalty(tiny_net(), 0.0)) == 0.0

    def test_matches_direct_summation(self):
        net = tiny_net(seed=4)
        lam = 1e-3
        direct = lam * sum(float(np.sum(np.asarray(w.data, dtype=np.float64) ** 2))
                           for w in net.conv_weights())
        assert float(l2_penalty(net, lam)) == pytest.approx(direct, rel=1e-5)

    def test_excludes_biases_and_bn(self):
        net = tiny_net(seed=4)
        for name, p in net.params.items():
            if name.endswith(".bias"):
                p.data += 100.0  # bias growth must not change the penalty
        before = float(l2_penalty(net, 1.0))
        for name, p in net.params.items():
            if name.endswith(("gamma", "beta")):
                p.data += 100.0
        assert float(l2_penalty(net, 1.0)) == pytest.approx(before)

    def test_sum_of_squares_example(self):
        from vesselseg.nn import sum_squares
        assert float(sum_squares([t([3.0, 4.0])])) == 25.0


class TestBranchLoss:
    def test_perfect_prediction_floor(self):
        net = tiny_net()
        y = np.zeros((1, 1, 8, 8), dtype=np.float32)
        y[0, 0, 2:5, 2:5] = 1.0
        cfg = LossConfig(l2_coefficient=0.0)
        assert float(branch_loss(t(y), y, net, cfg)) <= 2e-7

    def test_linear_mode_components(self):
        net = tiny_net()
        cfg = LossConfig(l2_coefficient=0.0, dice_mode="linear")
        p = np.array([[[[0.5, 0.5]]]], dtype=np.float32)
        y = np.array([[[[1.0, 0.0]]]], dtype=np.float32)
        got = float(branch_loss(t(p), y, net, cfg))
        assert got == pytest.approx(float(bce(t(p), y)) + 0.5, abs=1e-6)


class TestHybridLoss:
    def _outputs(self, rng, sides):
        final = t(rng.uniform(0.1, 0.9, (1, 1, 8, 8)))
        side_list = [t(rng.uniform(0.1, 0.9, (1, 1, 8, 8))) for _ in range(sides)]
        return ForwardOutput(final=final, side_outputs=side_list)

    def test_no_sides_equals_branch_loss(self, rng):
        net = tiny_net()
        cfg = LossConfig()
        out = self._outputs(rng, 0)
        y = (rng.random((1, 1, 8, 8)) > 0.7).astype(np.float32)
        bd = hybrid_loss(out, y, net, cfg)
        assert bd.total == pytest.approx(
            float(branch_loss(out.final, y, net, cfg)), abs=1e-9)
        assert len(bd.per_branch) == 1

    def test_identical_branches_average_to_single(self, rng):
        net = tiny_net()
        cfg = LossConfig()
        final = t(rng.uniform(0.1, 0.9, (1, 1, 8, 8)))
        out = ForwardOutput(final=final, side_outputs=[final, final])
        y = (rng.random((1, 1, 8, 8)) > 0.7).astype(np.float32)
        bd = hybrid_loss(out, y, net, cfg)
        # sides lack the l2 term, so compare against the explicit mean
        want = (bd.per_branch[0] + 2 * bd.per_branch[1]) / 3
        assert bd.total == pytest.approx(want, abs=1e-6)

    def test_five_branch_mean_recomputed_independently(self, rng):
        cfg_a = ArchConfig(kind="unet3p", num_scales=5, base_channels=2,
                           input_size=32, deep_supervision=True)
        net = build_network(cfg_a, seed=1)
        x = Tensor(rng.random((1, 1, 32, 32), dtype=np.float32))
        y = (rng.random((1, 1, 32, 32)) > 0.8).astype(np.float32)
        out = forward(net, x)
        assert len(out.side_outputs) == 4
        lcfg = LossConfig()
        bd = hybrid_loss(out, y, net, lcfg)
        branches = [float(branch_loss(out.final, y, net, lcfg))]
        no_l2 = LossConfig(l2_coefficient=0.0)
        for side in out.side_outputs:
            branches.append(float(branch_loss(side, y, net, no_l2)))
        assert bd.total == pytest.approx(sum(branches) / 5, abs=1e-6)

    def test_side_order_invariance(self, rng):
        net = tiny_net()
        cfg = LossConfig()
        out = self._outputs(rng, 3)
        y = (rng.random((1, 1, 8, 8)) > 0.7).astype(np.float32)
        a = hybrid_loss(out, y, net, cfg).total
        flipped = ForwardOutput(final=out.final,
                                side_outputs=list(reversed(out.side_outputs)))
        b = hybrid_loss(flipped, y, net, cfg).total
        assert a == pytest.approx(b, abs=1e-9)

    def test_breakdown_consistency_and_nonnegative(self, rng):
        net = tiny_net()
        for mode in ("log", "linear"):
            cfg = LossConfig(dice_mode=mode)
            out = self._outputs(rng, 2)
            y = (rng.random((1, 1, 8, 8)) > 0.7).astype(np.float32)
            bd = hybrid_loss(out, y, net, cfg)
            assert bd.total == pytest.approx(bd.bce + bd.dice_term + bd.l2,
                                             abs=1e-6)
            assert bd.total == pytest.approx(np.mean(bd.per_branch), abs=1e-6)
            assert bd.total >= 0.0
            assert bd.bce >= 0.0 and bd.dice_term >= 0.0 and bd.l2 >= 0.0
