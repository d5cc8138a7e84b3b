"""Topology, shapes, and forward behavior of the three architectures."""

from pathlib import Path

import numpy as np
import pytest

from vesselseg.arch import (
    ArchConfig,
    attach_deep_supervision,
    build_encoder,
    build_network,
    build_unet,
    build_unet3p,
    build_unetpp,
    forward,
    run_plan,
)
from vesselseg.errors import ConfigError, DimensionError, UsageError
from vesselseg.nn import Tensor

GOLDEN = Path(__file__).parent / "data" / "golden_unet3p_n4.bin"


def _batch(rng, size, n=1):
    return Tensor(rng.random((n, 1, size, size), dtype=np.float32))


class TestEncoder:
    def test_stage_schedule_n4(self, rng):
        cfg = ArchConfig(kind="unet", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=False)
        net = build_encoder(cfg)
        nodes = run_plan(net, _batch(rng, 64))
        for i, (size, ch) in enumerate([(64, 8), (32, 16), (16, 32), (8, 64)],
                                       start=1):
            assert nodes[f"en{i}"].shape == (1, ch, size, size)

    def test_deepest_size_n5(self, rng):
        cfg = ArchConfig(kind="unet", num_scales=5, base_channels=4,
                         input_size=64, deep_supervision=False)
        nodes = run_plan(build_encoder(cfg), _batch(rng, 64))
        assert nodes["en5"].shape[2:] == (4, 4)

    def test_stage_parameter_count_closed_form(self):
        cfg = ArchConfig(kind="unet", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=False)
        net = build_encoder(cfg)
        # stage 2: conv(8->16) + conv(16->16), each with bias, plus 2 BN affines
        expected = (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + 2 * (16 + 16)
        got = sum(p.size for name, p in net.params.items()
                  if name.startswith("en2."))
        assert got == expected

    def test_indivisible_input_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig(kind="unet", num_scales=5, input_size=8,
                       deep_supervision=False).validate()


class TestUNet:
    def test_decoder_fusion_count_and_output_size(self, rng):
        cfg = ArchConfig(kind="unet", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=False)
        net = build_unet(cfg)
        fusions = [s for s in net.plan
                   if s.op == "conv_block" and ".fuse" in s.output]
        assert len(fusions) == 3
        out = forward(net, _batch(rng, 64))
        assert out.final.shape == (1, 1, 64, 64)
        assert out.side_outputs == []

    def test_decoder_input_channels_are_skip_plus_upsampled(self):
        cfg = ArchConfig(kind="unet", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=False)
        net = build_unet(cfg)
        chans = cfg.encoder_channels()
        for s in range(cfg.num_scales - 1, 0, -1):
            block = net.layers[f"de{s}.fuse"]
            upstream = chans[s] if s == cfg.num_scales - 1 else chans[s]
            assert block.conv.cin == chans[s - 1] + upstream

    def test_outputs_strictly_inside_unit_interval(self, rng):
        cfg = ArchConfig(kind="unet", num_scales=3, base_channels=4,
                         input_size=32, deep_supervision=False)
        out = forward(build_unet(cfg, seed=3), _batch(rng, 32, n=2))
        assert np.all(out.final.data > 0) and np.all(out.final.data < 1)


class TestUNetPP:
    def test_node_rows_above_encoder_column(self):
        # the grid degenerates as rows shorten: 3, 2, 1 decoder nodes at N=4
        cfg = ArchConfig(kind="unetpp", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=False)
        net = build_unetpp(cfg)
        for i, count in [(0, 3), (1, 2), (2, 1), (3, 0)]:
            row = [s for s in net.plan
                   if s.op == "alias" and s.output.startswith(f"x{i}_")]
            assert len(row) == count

    def test_dense_skip_inputs(self):
        cfg = ArchConfig(kind="unetpp", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=False)
        net = build_unetpp(cfg)
        cat = next(s for s in net.plan if s.output == "x0_2_cat")
        assert cat.inputs == ("en1", "x0_1", "x0_2_up")
        up = next(s for s in net.plan if s.output == "x0_2_up")
        assert up.inputs == ("x1_1",)

    def test_final_map_matches_input_size(self, rng):
        cfg = ArchConfig(kind="unetpp", num_scales=3, base_channels=4,
                         input_size=32, deep_supervision=False)
        out = forward(build_unetpp(cfg), _batch(rng, 32))
        assert out.final.shape == (1, 1, 32, 32)

    def test_equivalent_to_unet_at_two_scales(self):
        kw = dict(num_scales=2, base_channels=4, input_size=16,
                  deep_supervision=False)
        unet = build_unet(ArchConfig(kind="unet", **kw))
        unetpp = build_unetpp(ArchConfig(kind="unetpp", **kw))
        assert unet.describe() == unetpp.describe()


class TestUNet3Plus:
    def test_de3_aggregation_sources_n5(self):
        cfg = ArchConfig(kind="unet3p", num_scales=5, base_channels=4,
                         input_size=64, deep_supervision=False)
        net = build_unet3p(cfg)
        cat = next(s for s in net.plan if s.output == "de3_cat")
        assert cat.inputs == ("de3.from_en1", "de3.from_en2", "de3.from_en3",
                              "de3.from_de4", "de3.from_de5")
        pool1 = next(s for s in net.plan if s.output == "de3_from_en1_pool")
        assert pool1.op == "maxpool4"
        pool2 = next(s for s in net.plan if s.output == "de3_from_en2_pool")
        assert pool2.op == "maxpool2"
        up4 = next(s for s in net.plan if s.output == "de3_from_de4_up")
        assert up4.op == "upsample2"
        up5 = next(s for s in net.plan if s.output == "de3_from_de5_up")
        assert up5.op == "upsample4"

    @pytest.mark.parametrize("n", [4, 5])
    def test_fan_in_is_n_branches_of_c_channels(self, n):
        cfg = ArchConfig(kind="unet3p", num_scales=n, base_channels=4,
                         per_path_channels=6, input_size=64,
                         deep_supervision=False)
        net = build_unet3p(cfg)
        cats = [s for s in net.plan if s.op == "concat"]
        assert len(cats) == n - 1
        for cat in cats:
            assert len(cat.inputs) == n
            for src in cat.inputs:
                assert net.node_channels[src] == 6

    def test_fused_width_is_n_times_c(self, rng):
        cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=4,
                         input_size=32, deep_supervision=False)
        net = build_unet3p(cfg)
        nodes = run_plan(net, _batch(rng, 32))
        for i in (1, 2, 3):
            assert nodes[f"de{i}"].shape[1] == 4 * cfg.path_channels

    def test_deepest_decoder_is_encoder_alias(self):
        cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=4,
                         input_size=32, deep_supervision=False)
        net = build_unet3p(cfg)
        up = next(s for s in net.plan if s.output == "de3_from_de4_up")
        assert up.inputs == ("en4",)


class TestDeepSupervision:
    def test_schedule_n5(self, rng):
        cfg = ArchConfig(kind="unet3p", num_scales=5, base_channels=4,
                         input_size=64, deep_supervision=True)
        net = build_network(cfg, seed=0)
        nodes = run_plan(net, _batch(rng, 64))
        # pre-upsample logits at 32, 16, 8, 4; factors 2, 4, 8, 16
        for i, (pre, factor) in enumerate([(32, 2), (16, 4), (8, 8), (4, 16)],
                                          start=2):
            assert nodes[f"side{i}_logits"].shape[2:] == (pre, pre)
            step = next(s for s in net.plan if s.output == f"side{i}_up")
            assert step.op == f"upsample{factor}"
            assert nodes[f"side{i}"].shape[2:] == (64, 64)

    def test_disabled_means_no_side_outputs(self, rng):
        cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=4,
                         input_size=32, deep_supervision=False)
        out = forward(build_network(cfg), _batch(rng, 32))
        assert out.side_outputs == []

    def test_side_outputs_bounded(self, rng):
        cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=4,
                         input_size=32, deep_supervision=True)
        out = forward(build_network(cfg, seed=5), _batch(rng, 32, n=2))
        assert len(out.side_outputs) == 3
        for side in out.side_outputs:
            assert side.shape == (2, 1, 32, 32)
            assert np.all(side.data > 0) and np.all(side.data < 1)

    def test_rejected_for_other_kinds(self):
        cfg = ArchConfig(kind="unet", num_scales=3, input_size=32,
                         deep_supervision=False)
        net = build_unet(cfg)
        with pytest.raises(UsageError):
            attach_deep_supervision(net, cfg)
        with pytest.raises(ConfigError):
            ArchConfig(kind="unetpp", num_scales=3, input_size=32,
                       deep_supervision=True).validate()


class TestForward:
    def test_zero_input_finite(self):
        cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=4,
                         input_size=32, deep_supervision=True)
        net = build_network(cfg, seed=11)
        out = forward(net, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))
        assert np.all(np.isfinite(out.final.data))
        for side in out.side_outputs:
            assert np.all(np.isfinite(side.data))

    def test_batch_independence_eval_mode(self, rng):
        cfg = ArchConfig(kind="unet3p", num_scales=3, base_channels=4,
                         input_size=32, deep_supervision=False)
        net = build_network(cfg, seed=7)
        a = rng.random((1, 1, 32, 32), dtype=np.float32)
        b = rng.random((1, 1, 32, 32), dtype=np.float32)
        both = forward(net, Tensor(np.concatenate([a, b]))).final.data
        one = forward(net, Tensor(a)).final.data
        two = forward(net, Tensor(b)).final.data
        np.testing.assert_allclose(both, np.concatenate([one, two]), atol=1e-5)

    def test_eval_forward_pure(self, rng):
        cfg = ArchConfig(kind="unet", num_scales=3, base_channels=4,
                         input_size=32, deep_supervision=False)
        net = build_network(cfg, seed=2)
        x = _batch(rng, 32)
        first = forward(net, x).final.data
        second = forward(net, x).final.data
        assert np.array_equal(first, second)

    def test_wrong_spatial_size_rejected(self, rng):
        cfg = ArchConfig(kind="unet", num_scales=3, base_channels=4,
                         input_size=32, deep_supervision=False)
        net = build_network(cfg)
        with pytest.raises(DimensionError):
            forward(net, _batch(rng, 16))

    def test_same_seed_same_parameters(self):
        cfg = ArchConfig(kind="unet3p", num_scales=3, base_channels=4,
                         input_size=32, deep_supervision=True)
        p1 = build_network(cfg, seed=9).params
        p2 = build_network(cfg, seed=9).params
        assert set(p1) == set(p2)
        for name in p1:
            assert np.array_equal(p1[name].data, p2[name].data)

    def test_unique_parameter_names(self):
        cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=8,
                         input_size=64, deep_supervision=True)
        net = build_network(cfg)
        names = list(net.params)
        assert len(names) == len(set(names))


@pytest.mark.skipif(not GOLDEN.exists(), reason="golden file not generated yet")
def test_forward_matches_golden_output(rng):
    from vesselseg.checkpoint import load_checkpoint

    ck = load_checkpoint(GOLDEN)
    cfg = ArchConfig(kind="unet3p", num_scales=4, base_channels=8,
                     input_size=64, deep_supervision=True)
    net = build_network(cfg, seed=2024)
    x = ck.tensors["golden.input"]
    out = forward(net, Tensor(x))
    np.testing.assert_allclose(out.final.data, ck.tensors["golden.final"],
                               atol=1e-5)
    for i, side in enumerate(out.side_outputs):
        np.testing.assert_allclose(side.data, ck.tensors[f"golden.side{i}"],
                                   atol=1e-5)
