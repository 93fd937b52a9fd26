import numpy as np
import pytest
import torch

from vesselseg.datasets import PatchBatch
from vesselseg.network import (NetworkSpec, build_network, count_parameters,
                               ilc_extra_parameters)
from vesselseg.training import TrainConfig, make_optimizer, train_step
from vesselseg.uncertainty import UncertaintyParams


def tiny(**kw):
    return NetworkSpec(channels=(8, 16, 32, 64), **kw)


class TestBuild:
    def test_dual_output_shapes(self, tiny_spec):
        net = build_network(tiny_spec, 0)
        out = net(torch.randn(1, 3, 128, 128))
        assert out.y_main.shape == (1, 2, 128, 128)
        assert out.y_aux.shape == (1, 2, 128, 128)

    @pytest.mark.parametrize("size", [512, 592, 768])
    def test_dataset_resolutions(self, size):
        net = build_network(NetworkSpec(channels=(2, 4, 8, 16)), 0)
        net.eval()
        with torch.no_grad():
            out = net(torch.randn(1, 3, size, size))
        assert out.y_main.shape == (1, 2, size, size)
        assert out.y_aux.shape == (1, 2, size, size)

    def test_same_seed_identical(self, tiny_spec):
        a = build_network(tiny_spec, 5)
        b = build_network(tiny_spec, 5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self, tiny_spec):
        a = build_network(tiny_spec, 5)
        b = build_network(tiny_spec, 6)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_parameter_count_difference_is_ilc(self):
        spec_t, spec_n = tiny(), tiny(ilc_mode="none")
        diff = count_parameters(build_network(spec_t, 0)) - \
            count_parameters(build_network(spec_n, 0))
        assert diff == ilc_extra_parameters(spec_t)
        assert diff > 0

    def test_none_mode_params_subset_of_target(self):
        sd_t = build_network(tiny(), 3).state_dict()
        sd_n = build_network(tiny(ilc_mode="none"), 3).state_dict()
        assert set(sd_n) < set(sd_t)
        for key, val in sd_n.items():
            assert torch.equal(val, sd_t[key]), key

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            build_network(NetworkSpec(channels=(8, 8, 32, 64)), 0)
        with pytest.raises(ValueError):
            build_network(NetworkSpec(channels=(8, 16, 32), num_stages=4), 0)
        with pytest.raises(ValueError):
            build_network(tiny(target_stage=9), 0)
        with pytest.raises(ValueError):
            build_network(tiny(ilc_mode="bogus"), 0)

    def test_indivisible_input_errors(self, tiny_spec):
        net = build_network(tiny_spec, 0)
        with pytest.raises(ValueError):
            net(torch.randn(1, 3, 100, 100))


class TestDecoderStage:
    def test_shape_arithmetic(self):
        # deeper feature 32ch@16^2 + skip 16ch@32^2 -> 16ch@32^2
        net = build_network(tiny(ilc_mode="none"), 0)
        y = net.decoder_stage(2, torch.randn(1, 32, 16, 16), torch.randn(1, 16, 32, 32))
        assert y.shape == (1, 16, 32, 32)

    def test_zero_inputs_zero_output(self):
        net = build_network(tiny(ilc_mode="none"), 0)  # biases start at zero
        net.eval()
        with torch.no_grad():
            y = net.decoder_stage(2, torch.zeros(1, 32, 16, 16), torch.zeros(1, 16, 32, 32))
        assert torch.allclose(y, torch.zeros_like(y))

    def test_gradient_reaches_both_inputs(self):
        net = build_network(tiny(ilc_mode="none"), 0)
        x = torch.randn(1, 32, 16, 16, requires_grad=True)
        e = torch.randn(1, 16, 32, 32, requires_grad=True)
        net.decoder_stage(2, x, e).sum().backward()
        assert x.grad.abs().sum() > 0
        assert e.grad.abs().sum() > 0

    def test_misaligned_shapes_error(self):
        net = build_network(tiny(ilc_mode="none"), 0)
        with pytest.raises(ValueError):
            net.decoder_stage(2, torch.randn(1, 32, 16, 16), torch.randn(1, 16, 48, 48))


class TestTargetStage:
    def test_operand_count_m4_t1(self):
        net = build_network(tiny(), 0)
        # x_t, E_t, and one path per deeper stage: 2 + 3 = 5 operands
        assert len(net.ilc_paths) == 3
        assert net.ilc_proj.in_channels == 3 * 8
        assert net.dec_blocks[0].convs[0].in_channels == 2 * 8
        x = torch.randn(1, 16, 64, 64)
        es = [torch.randn(1, c, 128 // 2 ** i, 128 // 2 ** i)
              for i, c in enumerate((8, 16, 32, 64))]
        y = net.target_decoder_stage(x, es[0], es[1:])
        assert y.shape == (1, 8, 128, 128)

    def test_t_equals_m_degenerates_to_plain(self):
        spec = tiny(target_stage=4)
        net = build_network(spec, 0)
        assert not hasattr(net, "ilc_paths")
        assert count_parameters(net) == count_parameters(
            build_network(tiny(ilc_mode="none", target_stage=4), 0))
        out = net(torch.randn(1, 3, 64, 64))
        assert out.y_main.shape == (1, 2, 64, 64)

    def test_stand_alone_paths(self):
        """Perturbing one ILC path's parameters must not change another's
        output, but must change the target-stage output."""
        net = build_network(tiny(), 0)
        net.eval()
        e2 = torch.randn(1, 16, 64, 64)
        es = [torch.randn(1, 8, 128, 128), e2,
              torch.randn(1, 32, 32, 32), torch.randn(1, 64, 16, 16)]
        x = torch.randn(1, 16, 64, 64)
        with torch.no_grad():
            ui2_before = net.ilc_paths[0](e2).clone()
            y_before = net.target_decoder_stage(x, es[0], es[1:]).clone()
            for p in net.ilc_paths[1].parameters():
                p.add_(1.0)
            ui2_after = net.ilc_paths[0](e2)
            y_after = net.target_decoder_stage(x, es[0], es[1:])
        assert torch.equal(ui2_before, ui2_after)
        assert not torch.allclose(y_before, y_after)

    def test_wrong_operand_count_errors(self):
        net = build_network(tiny(), 0)
        with pytest.raises(ValueError):
            net.target_decoder_stage(torch.randn(1, 16, 64, 64),
                                     torch.randn(1, 8, 128, 128),
                                     [torch.randn(1, 16, 64, 64)])


class TestForward:
    def test_all_parameters_receive_gradient(self, tiny_spec):
        config = TrainConfig(channels=tiny_spec.channels, batch_size=2,
                             patch_size=64, total_epochs=4)
        net = build_network(config.network_spec(), 0)
        uparams = UncertaintyParams()
        optimizer = make_optimizer(net, uparams, config)
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, (2, 64, 64))
        batch = PatchBatch(
            images=torch.randn(2, 3, 64, 64),
            labels=torch.from_numpy(labels),
            weight_maps=torch.rand(2, 64, 64) + 0.5,
        )
        train_step(net, uparams, optimizer, batch, config)
        for name, p in list(net.named_parameters()) + list(uparams.named_parameters()):
            assert p.grad is not None and p.grad.abs().sum() > 0, name

    def test_constant_zero_input_constant_logits(self, tiny_spec):
        net = build_network(tiny_spec, 0)
        net.eval()
        with torch.no_grad():
            out = net(torch.zeros(1, 3, 64, 64))
        assert torch.allclose(out.y_main, torch.zeros_like(out.y_main))
        assert torch.allclose(out.y_aux, torch.zeros_like(out.y_aux))

    def test_all_shared_mode_runs(self):
        net = build_network(tiny(ilc_mode="all_shared"), 0)
        out = net(torch.randn(1, 3, 64, 64))
        assert out.y_main.shape == (1, 2, 64, 64)
        # one shared upsampler per stage transition, reused by all paths
        assert len(net.shared_ups) == 3
        assert len(net.stage_projs) == 3

    def test_translation_equivariance_circular(self):
        """Shifting the input by the deepest stage's jump shifts the output
        (circular conv padding; interior pixels compared). Diagnostic."""
        spec = tiny(padding_mode="circular")
        net = build_network(spec, 0)
        net.eval()
        shift = spec.downsample ** (spec.num_stages - 1)
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            base = net(x).y_main
            rolled = net(torch.roll(x, (shift, shift), dims=(2, 3))).y_main
        expected = torch.roll(base, (shift, shift), dims=(2, 3))
        m = 16  # interpolation clamps at borders; compare the interior
        assert torch.allclose(rolled[..., m:-m, m:-m], expected[..., m:-m, m:-m],
                              atol=1e-4)
