"""Tests for the grid-scoring discriminators."""

from __future__ import annotations

import numpy as np
import pytest

from sdfgan import tensor as T
from sdfgan.discriminator import (
    Discriminator,
    DiscriminatorBlock,
    global_discriminator,
    local_discriminator,
    score,
)
from sdfgan.errors import ConfigError, DimensionError
from sdfgan.generator import desk_config, paper_config, toy_config
from sdfgan.implicit import FeatureGrid4


@pytest.fixture
def small_disc():
    return Discriminator(8, (6, 12), np.random.default_rng(2))


class TestArchitecture:
    def test_paper_shapes(self):
        rng = np.random.default_rng(0)
        cfg = paper_config()
        d_g = global_discriminator(cfg, rng)
        d_l = local_discriminator(cfg, rng)
        assert d_g.resolution == 32 and len(d_g.blocks) == 3
        assert d_l.resolution == 16 and len(d_l.blocks) == 2
        assert d_l.channels == d_g.channels[1:]

    def test_width_plan_must_match_resolution(self):
        with pytest.raises(ConfigError):
            Discriminator(16, (8, 16), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            Discriminator(8, (), np.random.default_rng(0))

    def test_block_halves_extent(self, rng):
        block = DiscriminatorBlock(3, 5, rng)
        out = block(T.Tensor(rng.standard_normal((2, 3, 8, 8, 8))))
        assert out.shape == (2, 5, 4, 4, 4)

    def test_block_residual_average(self, rng):
        block = DiscriminatorBlock(2, 2, rng)
        x = T.Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
        from sdfgan.nn import lrelu

        main = T.avg_pool3d(lrelu(block.conv2(lrelu(block.conv1(x)))))
        skip = block.skip(T.avg_pool3d(x))
        want = (main.data + skip.data) / np.sqrt(2.0)
        np.testing.assert_allclose(block(x).data, want, atol=1e-13)


class TestScoring:
    def test_finite_scalar_per_grid(self, small_disc, rng):
        grids = rng.standard_normal((3, 4, 8, 8, 8))
        out = small_disc(T.Tensor(grids))
        assert out.shape == (3,)
        assert np.isfinite(out.data).all()

    def test_batch_order_preserved(self, small_disc, rng):
        grids = rng.standard_normal((4, 4, 8, 8, 8))
        batch = small_disc(T.Tensor(grids)).data
        for i in range(4):
            solo = small_disc(T.Tensor(grids[i:i + 1])).data[0]
            np.testing.assert_allclose(solo, batch[i], atol=1e-12)

    def test_score_accepts_feature_grid(self, small_disc, rng):
        values = rng.standard_normal((4, 8, 8, 8))
        grid = FeatureGrid4(T.Tensor(values), np.zeros(3), 0.25)
        a = score(small_disc, grid)
        b = score(small_disc, values)
        assert a.shape == ()
        np.testing.assert_allclose(a.data, b.data)

    def test_rejects_wrong_resolution(self, small_disc, rng):
        with pytest.raises(DimensionError):
            small_disc(T.Tensor(rng.standard_normal((1, 4, 16, 16, 16))))
        with pytest.raises(DimensionError):
            small_disc(T.Tensor(rng.standard_normal((1, 3, 8, 8, 8))))
        with pytest.raises(DimensionError):
            score(small_disc, rng.standard_normal((1, 4, 8, 8, 8)))

    def test_paper_inputs_rejected_cross_wise(self):
        rng = np.random.default_rng(0)
        cfg = toy_config()
        d_g = global_discriminator(cfg, rng)
        grids16 = T.Tensor(rng.standard_normal((1, 4, 16, 16, 16)))
        with pytest.raises(DimensionError):
            d_g(grids16)


class TestGradients:
    def test_input_gradient_matches_finite_differences(self, small_disc, rng):
        grids = rng.standard_normal((2, 4, 8, 8, 8))
        x = T.Tensor(grids, requires_grad=True)
        out = small_disc(x).sum()
        g = T.grad(out, [x])[0].data
        picker = np.random.default_rng(5)
        for _ in range(10):
            idx = tuple(picker.integers(s) for s in grids.shape)
            step = 1e-5
            hi = grids.copy()
            hi[idx] += step
            lo = grids.copy()
            lo[idx] -= step
            fd = (small_disc(T.Tensor(hi)).sum().item()
                  - small_disc(T.Tensor(lo)).sum().item()) / (2 * step)
            np.testing.assert_allclose(g[idx], fd, rtol=1e-3, atol=1e-8)

    def test_input_gradient_supports_double_backward(self, small_disc, rng):
        x = T.Tensor(rng.standard_normal((1, 4, 8, 8, 8)), requires_grad=True)
        out = small_disc(x).sum()
        g = T.grad(out, [x], create_graph=True)[0]
        penalty = (g * g).sum()
        params = [p.tensor for p in small_disc.parameters()]
        second = T.grad(penalty, [x] + params[:2])
        assert all(np.isfinite(s.data).all() for s in second)

    def test_parameter_gradients_flow(self, small_disc, rng):
        x = T.Tensor(rng.standard_normal((2, 4, 8, 8, 8)))
        out = (small_disc(x) ** 2).sum()
        grads = T.grad(out, [p.tensor for p in small_disc.parameters()])
        nonzero = sum(np.abs(g.data).max() > 0 for g in grads)
        assert nonzero == len(grads)


class TestPresetWiring:
    def test_desk_and_toy_dimensions(self):
        rng = np.random.default_rng(1)
        for cfg in (desk_config(), toy_config()):
            d_g = global_discriminator(cfg, rng)
            d_l = local_discriminator(cfg, rng)
            n = 2
            g = T.Tensor(np.random.default_rng(0).standard_normal(
                (n, 4) + (cfg.k_global,) * 3))
            l = T.Tensor(np.random.default_rng(0).standard_normal(
                (n, 4) + (cfg.k_local,) * 3))
            assert d_g(g).shape == (n,)
            assert d_l(l).shape == (n,)
