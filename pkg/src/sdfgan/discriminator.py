"""Residual downsampling critics over 4-channel SDF observation grids.

The global and local discriminators share one architecture: a 1^3
feature adapter into the first block width, residual blocks that halve
the extent down to 4^3, a 1^3 adapter at the last width, then two
fully-connected layers to a scalar score per grid.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import EqualizedConv3d, EqualizedLinear, Module, lrelu

FINAL_RESOLUTION = 4
INPUT_CHANNELS = 4


class DiscriminatorBlock(Module):
    """Residual unit: two 3^3 convolutions then x2 average-pool downsample.

    The skip path pools first and mixes channels with a bias-free 1^3
    convolution; main and skip are averaged with 1/sqrt(2) so the
    variance of the sum stays level.
    """

    def __init__(self, in_channels, out_channels, rng):
        self.conv1 = EqualizedConv3d(in_channels, in_channels, 3, rng)
        self.conv2 = EqualizedConv3d(in_channels, out_channels, 3, rng)
        self.skip = EqualizedConv3d(in_channels, out_channels, 1, rng,
                                    bias=False)

    def __call__(self, x):
        main = lrelu(self.conv1(x))
        main = T.avg_pool3d(lrelu(self.conv2(main)))
        skip = self.skip(T.avg_pool3d(x))
        return (main + skip) * (1.0 / math.sqrt(2.0))


class Discriminator(Module):
    """Scores batches of (n, 4, K, K, K) grids with one scalar per grid."""

    def __init__(self, resolution, channels, rng):
        channels = tuple(channels)
        if len(channels) < 1:
            raise ConfigError("discriminator needs at least one width")
        steps = len(channels) - 1
        if resolution != FINAL_RESOLUTION * 2 ** steps:
            raise ConfigError(
                f"{len(channels)} widths downsample {FINAL_RESOLUTION * 2 ** steps}^3 "
                f"to {FINAL_RESOLUTION}^3, not {resolution}^3")
        self.resolution = resolution
        self.channels = channels
        self.f_feature = EqualizedConv3d(INPUT_CHANNELS, channels[0], 1, rng)
        self.blocks = [
            DiscriminatorBlock(channels[i], channels[i + 1], rng)
            for i in range(steps)
        ]
        self.t_feature = EqualizedConv3d(channels[-1], channels[-1], 1, rng)
        flat = channels[-1] * FINAL_RESOLUTION ** 3
        self.fc1 = EqualizedLinear(flat, channels[-1], rng)
        self.fc2 = EqualizedLinear(channels[-1], 1, rng)

    def __call__(self, grids):
        grids = T.as_tensor(grids)
        want = (INPUT_CHANNELS,) + (self.resolution,) * 3
        if grids.ndim != 5 or grids.shape[1:] != want:
            raise DimensionError(
                f"expected grids of shape (n, {INPUT_CHANNELS}, "
                f"{self.resolution}, {self.resolution}, {self.resolution}), "
                f"got {grids.shape}")
        x = lrelu(self.f_feature(grids))
        for block in self.blocks:
            x = block(x)
        x = lrelu(self.t_feature(x))
        x = x.reshape((x.shape[0], -1))
        x = lrelu(self.fc1(x))
        return self.fc2(x).reshape((-1,))


def global_discriminator(config, rng):
    return Discriminator(config.k_global, config.d_global_channels, rng)


def local_discriminator(config, rng):
    return Discriminator(config.k_local, config.d_local_channels, rng)


def score(disc, grid):
    """Scalar score of one FeatureGrid4 (or raw 4-channel array)."""
    values = grid.values if hasattr(grid, "values") else grid
    values = T.as_tensor(values)
    if values.ndim != 4:
        raise DimensionError(
            f"score takes a single 4-channel grid, got {values.shape}")
    out = disc(values.reshape((1,) + values.shape))
    return out.reshape(())
