"""Tests for the style-based 3-D generator."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import assert_gradients_close
from sdfgan import tensor as T
from sdfgan.errors import ConfigError, DimensionError, NumericError, UsageError
from sdfgan.generator import (
    Generator,
    MappingNetwork,
    ModelConfig,
    PRESETS,
    SynthesisNetwork,
    clone_generator,
    desk_config,
    ema_update,
    paper_config,
    toy_config,
)
from sdfgan.implicit import ImplicitSdf


@pytest.fixture
def toy_gen():
    return Generator(toy_config(), rng=np.random.default_rng(11))


class TestModelConfig:
    def test_presets_are_valid(self):
        for name, make in PRESETS.items():
            cfg = make()
            assert cfg.num_blocks == len(cfg.channels)
            assert cfg.block_resolutions[-1] == cfg.feature_resolution

    def test_paper_sizes(self):
        cfg = paper_config()
        assert cfg.latent_dim == 512
        assert cfg.const_channels == 256
        assert cfg.channels == (256, 128, 64, 32)
        assert cfg.feature_channels == 16
        assert cfg.feature_resolution == 32
        assert cfg.k_global == 32
        assert cfg.k_local == 16
        assert cfg.box_size == 0.25
        assert cfg.n_candidates == 2048
        assert cfg.n_regions == 16
        assert cfg.data_resolution == 128

    def test_resolution_must_match_block_count(self):
        with pytest.raises(ConfigError):
            ModelConfig(channels=(64, 32), feature_resolution=32)

    def test_positive_sizes_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(latent_dim=0)
        with pytest.raises(ConfigError):
            ModelConfig(box_size=0.0)
        with pytest.raises(ConfigError):
            ModelConfig(channels=())

    def test_block_resolutions_double(self):
        cfg = paper_config()
        assert cfg.block_resolutions == (4, 8, 16, 32)


class TestMappingNetwork:
    def test_zero_latent_is_finite_and_deterministic(self, rng):
        net = MappingNetwork(16, 3, rng)
        z = np.zeros(16)
        a = net(z).data
        b = net(z).data
        assert np.isfinite(a).all()
        np.testing.assert_array_equal(a, b)

    def test_same_latent_same_output(self, rng):
        net = MappingNetwork(8, 2, rng)
        z = rng.standard_normal(8)
        np.testing.assert_array_equal(net(z).data, net(z).data)

    def test_output_matches_latent_dimension(self, rng):
        net = MappingNetwork(12, 4, rng)
        assert net(rng.standard_normal(12)).shape == (12,)
        assert net(rng.standard_normal((5, 12))).shape == (5, 12)

    def test_directional_derivative_matches_autodiff(self, rng):
        net = MappingNetwork(6, 3, rng)
        z = rng.standard_normal(6)
        u = rng.standard_normal(6)
        assert_gradients_close(lambda t: (net(t) * T.Tensor(u)).sum(), [z],
                               rtol=1e-4)

    def test_normalizes_input_scale(self, rng):
        net = MappingNetwork(8, 2, rng)
        z = rng.standard_normal(8)
        np.testing.assert_allclose(net(z).data, net(z * 10.0).data, atol=1e-12)

    def test_rejects_non_finite_latent(self, rng):
        net = MappingNetwork(4, 2, rng)
        z = np.array([1.0, np.nan, 0.0, 0.0])
        with pytest.raises(NumericError):
            net(z)

    def test_rejects_wrong_width(self, rng):
        net = MappingNetwork(4, 2, rng)
        with pytest.raises(DimensionError):
            net(np.zeros(5))

    def test_uses_small_lr_multiplier(self, rng):
        net = MappingNetwork(16, 1, rng)
        assert net.layers[0].coef == pytest.approx(0.01 / 4.0)


class TestSynthesisNetwork:
    def test_paper_output_shape(self):
        net = SynthesisNetwork(paper_config(), np.random.default_rng(0))
        w = np.random.default_rng(1).standard_normal(512)
        out = net(w)
        assert out.shape == (16, 32, 32, 32)

    def test_block_shape_plan(self, rng):
        cfg = desk_config()
        net = SynthesisNetwork(cfg, rng)
        w = T.Tensor(rng.standard_normal((2, cfg.latent_dim)))
        x = T.expand(net.const.tensor.reshape((1,) + net.const.data.shape),
                     (2,) + net.const.data.shape)
        for block, channels, res in zip(net.blocks, cfg.channels,
                                        cfg.block_resolutions):
            x, skip = block(x, w, T.Tensor(np.zeros((2, 1, res, res, res))))
            assert x.shape == (2, channels, res, res, res)
            assert skip.shape == (2, cfg.feature_channels, res, res, res)

    def test_zero_noise_is_deterministic(self, toy_gen, rng):
        w = rng.standard_normal((2, 32))
        a = toy_gen.synthesize(w).data
        b = toy_gen.synthesize(w).data
        np.testing.assert_array_equal(a, b)

    def test_noise_seed_is_deterministic(self, toy_gen, rng):
        for block in toy_gen.synthesis.blocks:
            block.noise_scale.data = np.asarray(0.1)
        w = rng.standard_normal((2, 32))
        a = toy_gen.synthesize(w, noise=3).data
        b = toy_gen.synthesize(w, noise=3).data
        np.testing.assert_array_equal(a, b)
        c = toy_gen.synthesize(w, noise=4).data
        assert np.abs(a - c).max() > 0.0

    def test_single_latent_matches_batch_row(self, toy_gen, rng):
        w = rng.standard_normal((3, 32))
        batch = toy_gen.synthesize(w).data
        solo = toy_gen.synthesize(w[1]).data
        np.testing.assert_allclose(solo, batch[1], atol=1e-12)
        assert solo.shape == (8, 8, 8, 8)

    def test_noise_map_validation(self, toy_gen, rng):
        w = rng.standard_normal((2, 32))
        with pytest.raises(DimensionError):
            toy_gen.synthesize(w, noise=[np.zeros((2, 1, 4, 4, 4))])
        with pytest.raises(DimensionError):
            toy_gen.synthesize(w, noise=[np.zeros((2, 1, 4, 4, 4)),
                                         np.zeros((2, 1, 4, 4, 4))])

    def test_skip_accumulation_sums_block_biases(self, rng):
        cfg = toy_config()
        net = SynthesisNetwork(cfg, rng)
        total = 0.0
        for i, block in enumerate(net.blocks):
            block.skip.weight.data[:] = 0.0
            block.skip_bias.data[:] = 0.5 + i
            total += 0.5 + i
        out = net(rng.standard_normal(cfg.latent_dim)).data
        np.testing.assert_allclose(out, total, atol=1e-12)

    def test_noise_scale_starts_silent(self, toy_gen, rng):
        w = rng.standard_normal((1, 32))
        a = toy_gen.synthesize(w).data
        b = toy_gen.synthesize(w, noise=9).data
        np.testing.assert_array_equal(a, b)
        for block in toy_gen.synthesis.blocks:
            block.noise_scale.data = np.asarray(0.1)
        c = toy_gen.synthesize(w, noise=9).data
        assert np.abs(a - c).max() > 0.0


class TestGenerator:
    def test_generate_sdf_contract(self, toy_gen, rng):
        src = toy_gen.generate_sdf(rng.standard_normal(32))
        assert isinstance(src, ImplicitSdf)
        pts = rng.uniform(-1, 1, size=(4096, 3))
        values = src.sample(pts)
        assert values.shape == (4096,)
        assert np.isfinite(values).all()

    def test_generate_sdf_deterministic_per_seed(self, toy_gen, rng):
        z = rng.standard_normal(32)
        pts = rng.uniform(-1, 1, size=(64, 3))
        a = toy_gen.generate_sdf(z, noise=5).sample(pts)
        b = toy_gen.generate_sdf(z, noise=5).sample(pts)
        np.testing.assert_array_equal(a, b)

    def test_generate_sdf_rejects_batch(self, toy_gen, rng):
        with pytest.raises(DimensionError):
            toy_gen.generate_sdf(rng.standard_normal((2, 32)))

    def test_needs_rng(self):
        with pytest.raises(UsageError):
            Generator(toy_config())

    def test_sample_latents_shape_and_seed(self, toy_gen):
        a = toy_gen.sample_latents(4, 3)
        b = toy_gen.sample_latents(4, 3)
        assert a.shape == (4, 32)
        np.testing.assert_array_equal(a, b)

    def test_latent_gradient_flows_through_sdf(self, toy_gen, rng):
        z = T.Tensor(rng.standard_normal(32), requires_grad=True)
        pts = rng.uniform(-0.9, 0.9, size=(16, 3))
        out = toy_gen.generate_sdf(z).query(pts)
        g = T.grad((out * out).sum(), [z])[0]
        assert np.isfinite(g.data).all()
        assert np.abs(g.data).max() > 0.0

    def test_parameter_gradients_match_finite_differences(self, toy_gen, rng):
        z = rng.standard_normal((2, 32))
        pts = rng.uniform(-0.9, 0.9, size=(8, 3))

        def loss_value():
            vols = toy_gen.generate_volume(z)
            src0 = ImplicitSdf(
                __import__("sdfgan.implicit", fromlist=["FeatureVolume"])
                .FeatureVolume(8, 8, values=T.narrow(vols, 0, 0, 1)
                               .reshape((8, 8, 8, 8))),
                toy_gen.mlp)
            return src0.query(pts).sum()

        loss = loss_value()
        params = toy_gen.parameters()
        grads = T.grad(loss, [p.tensor for p in params])
        picker = np.random.default_rng(9)
        checked = 0
        for _ in range(12):
            pi = int(picker.integers(len(params)))
            p = params[pi]
            if p.data.size == 0 or np.abs(grads[pi].data).max() == 0.0:
                continue
            flat_idx = int(picker.integers(p.data.size))
            step = 1e-5
            orig = p.data.reshape(-1)[flat_idx]
            p.data.reshape(-1)[flat_idx] = orig + step
            hi = loss_value().item()
            p.data.reshape(-1)[flat_idx] = orig - step
            lo = loss_value().item()
            p.data.reshape(-1)[flat_idx] = orig
            fd = (hi - lo) / (2 * step)
            ad = grads[pi].data.reshape(-1)[flat_idx]
            np.testing.assert_allclose(ad, fd, rtol=1e-3, atol=1e-7)
            checked += 1
            if checked >= 5:
                break
        assert checked >= 5


class TestEma:
    def test_clone_matches_and_is_independent(self, toy_gen):
        twin = clone_generator(toy_gen)
        for (na, pa), (nb, pb) in zip(toy_gen.named_parameters(),
                                      twin.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        toy_gen.parameters()[0].data = toy_gen.parameters()[0].data + 1.0
        assert np.abs(twin.parameters()[0].data
                      - toy_gen.parameters()[0].data).max() > 0.0

    def test_decay_zero_copies_live_weights(self, toy_gen):
        twin = clone_generator(toy_gen)
        for p in toy_gen.parameters():
            p.data = p.data + 0.5
        ema_update(twin, toy_gen, decay=0.0)
        for pa, pb in zip(toy_gen.parameters(), twin.parameters()):
            np.testing.assert_allclose(pb.data, pa.data, atol=1e-15)

    def test_decay_one_freezes_target(self, toy_gen):
        twin = clone_generator(toy_gen)
        before = [p.data.copy() for p in twin.parameters()]
        for p in toy_gen.parameters():
            p.data = p.data + 0.5
        ema_update(twin, toy_gen, decay=1.0)
        for p, b in zip(twin.parameters(), before):
            np.testing.assert_array_equal(p.data, b)

    def test_interpolates_halfway(self, toy_gen):
        twin = clone_generator(toy_gen)
        for p in toy_gen.parameters():
            p.data = p.data + 1.0
        ema_update(twin, toy_gen, decay=0.5)
        for pa, pb in zip(toy_gen.parameters(), twin.parameters()):
            np.testing.assert_allclose(pa.data - pb.data, 0.5, atol=1e-12)

    def test_rejects_bad_decay(self, toy_gen):
        twin = clone_generator(toy_gen)
        with pytest.raises(UsageError):
            ema_update(twin, toy_gen, decay=1.5)
