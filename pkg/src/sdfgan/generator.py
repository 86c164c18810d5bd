"""Style-based 3-D generator producing implicit SDF feature volumes.

A mapping network turns normal latents z into intermediate latents w;
a synthesis network grows a learned 4^3 constant through style blocks to
an (l, m, m, m) feature volume; a shared MLP head turns interpolated
features into signed distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .implicit import FeatureVolume, ImplicitSdf, SdfMlp
from .nn import EqualizedLinear, ModulatedConv3d, Module, lrelu

BASE_RESOLUTION = 4


@dataclass
class ModelConfig:
    """Architecture sizes shared by the generator and discriminators."""

    latent_dim: int = 512
    mapping_depth: int = 4
    const_channels: int = 256
    channels: tuple = (256, 128, 64, 32)
    feature_channels: int = 16
    feature_resolution: int = 32
    mlp_hidden: int = 64
    k_global: int = 32
    k_local: int = 16
    box_size: float = 0.25
    n_candidates: int = 2048
    n_regions: int = 16
    d_global_channels: tuple = (64, 128, 256, 512)
    d_local_channels: tuple = (128, 256, 512)
    data_resolution: int = 128

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.d_global_channels = tuple(self.d_global_channels)
        self.d_local_channels = tuple(self.d_local_channels)
        if not self.channels:
            raise ConfigError("channel plan must list at least one block")
        want = BASE_RESOLUTION * 2 ** (len(self.channels) - 1)
        if self.feature_resolution != want:
            raise ConfigError(
                f"{len(self.channels)} blocks grow {BASE_RESOLUTION}^3 to "
                f"{want}^3, not {self.feature_resolution}^3")
        for name in ("latent_dim", "mapping_depth", "const_channels",
                     "feature_channels", "mlp_hidden", "k_global", "k_local",
                     "n_candidates", "n_regions", "data_resolution"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.box_size <= 2.0:
            raise ConfigError("box_size must lie in (0, 2]")

    @property
    def num_blocks(self):
        return len(self.channels)

    @property
    def block_resolutions(self):
        return tuple(BASE_RESOLUTION * 2 ** i for i in range(self.num_blocks))


def paper_config():
    """Full-size configuration from the reference architecture."""
    return ModelConfig()


def desk_config():
    """Reduced sizes for a single desk-class machine."""
    return ModelConfig(
        latent_dim=64,
        mapping_depth=4,
        const_channels=64,
        channels=(64, 32, 16),
        feature_channels=8,
        feature_resolution=16,
        mlp_hidden=32,
        k_global=16,
        k_local=8,
        n_candidates=256,
        n_regions=4,
        d_global_channels=(32, 64, 128),
        d_local_channels=(32, 64),
        data_resolution=64,
    )


def toy_config():
    """Minimal sizes that keep an end-to-end run interactive on one core."""
    return ModelConfig(
        latent_dim=32,
        mapping_depth=2,
        const_channels=32,
        channels=(32, 16),
        feature_channels=8,
        feature_resolution=8,
        mlp_hidden=32,
        k_global=8,
        k_local=8,
        n_candidates=64,
        n_regions=2,
        d_global_channels=(16, 32),
        d_local_channels=(16, 32),
        data_resolution=64,
    )


PRESETS = {"paper": paper_config, "desk": desk_config, "toy": toy_config}


def _check_finite(name, data):
    if not np.isfinite(data).all():
        raise NumericError(f"{name} contains non-finite values")


def _bias_term(param):
    return param.tensor.reshape((1, -1, 1, 1, 1))


class MappingNetwork(Module):
    """Normalizes z to unit RMS, then `depth` equalized FC + leaky ReLU."""

    def __init__(self, latent_dim, depth, rng, lr_multiplier=0.01):
        self.latent_dim = latent_dim
        self.layers = [
            EqualizedLinear(latent_dim, latent_dim, rng,
                            lr_multiplier=lr_multiplier)
            for _ in range(depth)
        ]

    def __call__(self, z):
        z = T.as_tensor(z)
        single = z.ndim == 1
        if single:
            z = z.reshape((1, -1))
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise DimensionError(
                f"latents must have shape (n, {self.latent_dim}), got {z.shape}")
        _check_finite("latent z", z.data)
        x = T.pixelwise_normalize(z)
        for layer in self.layers:
            x = lrelu(layer(x))
        return x.reshape((-1,)) if single else x


class SynthesisBlock(Module):
    """Two modulated 3x3x3 convolutions plus noise and a skip projection.

    Layout per block: optional x2 nearest upsample, conv1 + bias +
    activation, conv2, noise, bias, activation; the skip branch projects
    the result to the output feature channels with a 1^3 modulated
    convolution without demodulation.
    """

    def __init__(self, in_channels, out_channels, latent_dim, skip_channels,
                 rng, first=False):
        self.first = first
        self.conv1 = ModulatedConv3d(in_channels, out_channels, 3, latent_dim,
                                     rng)
        self.bias1 = T.Parameter(np.zeros(out_channels), name="bias1")
        self.conv2 = ModulatedConv3d(out_channels, out_channels, 3, latent_dim,
                                     rng)
        self.bias2 = T.Parameter(np.zeros(out_channels), name="bias2")
        self.noise_scale = T.Parameter(np.zeros(()), name="noise_scale")
        self.skip = ModulatedConv3d(out_channels, skip_channels, 1, latent_dim,
                                    rng, demodulate=False)
        self.skip_bias = T.Parameter(np.zeros(skip_channels), name="skip_bias")

    def __call__(self, x, w, noise_map):
        if not self.first:
            x = T.upsample3d_nearest(x)
        x = lrelu(self.conv1(x, w) + _bias_term(self.bias1))
        x = T.add_noise(self.conv2(x, w), noise_map, self.noise_scale.tensor)
        x = lrelu(x + _bias_term(self.bias2))
        skip = self.skip(x, w) + _bias_term(self.skip_bias)
        return x, skip


class SynthesisNetwork(Module):
    """Learned constant grown through style blocks with skip accumulation."""

    def __init__(self, config, rng):
        self.config = config
        self.const = T.Parameter(
            rng.standard_normal((config.const_channels,) + (BASE_RESOLUTION,) * 3),
            name="const")
        self.blocks = []
        in_channels = config.const_channels
        for i, out_channels in enumerate(config.channels):
            self.blocks.append(
                SynthesisBlock(in_channels, out_channels, config.latent_dim,
                               config.feature_channels, rng, first=i == 0))
            in_channels = out_channels

    def make_noise(self, n, rng):
        """Per-block standard-normal single-channel noise maps."""
        rng = np.random.default_rng(rng)
        return [
            T.Tensor(rng.standard_normal((n, 1, r, r, r)))
            for r in self.config.block_resolutions
        ]

    def zero_noise(self, n):
        return [
            T.Tensor(np.zeros((n, 1, r, r, r)))
            for r in self.config.block_resolutions
        ]

    def _noise_maps(self, noise, n):
        if noise is None:
            return self.zero_noise(n)
        if isinstance(noise, (int, np.integer, np.random.Generator)):
            return self.make_noise(n, noise)
        maps = [T.as_tensor(m) for m in noise]
        if len(maps) != len(self.blocks):
            raise DimensionError(
                f"expected {len(self.blocks)} noise maps, got {len(maps)}")
        for m, r in zip(maps, self.config.block_resolutions):
            if m.shape != (n, 1, r, r, r):
                raise DimensionError(
                    f"noise map shape {m.shape} does not match (n=1) x {r}^3")
        return maps

    def __call__(self, w, noise=None):
        w = T.as_tensor(w)
        single = w.ndim == 1
        if single:
            w = w.reshape((1, -1))
        n = w.shape[0]
        maps = self._noise_maps(noise, n)
        shape = (n,) + self.const.data.shape
        x = T.expand(self.const.tensor.reshape((1,) + self.const.data.shape),
                     shape)
        out = None
        for block, noise_map in zip(self.blocks, maps):
            x, skip = block(x, w, noise_map)
            out = skip if out is None else T.upsample3d_linear(out) + skip
        return out.reshape(out.shape[1:]) if single else out


class Generator(Module):
    """Mapping + synthesis + shared SDF head, the full latent-to-SDF path."""

    def __init__(self, config=None, rng=None):
        if config is None:
            config = paper_config()
        if rng is None:
            raise UsageError("Generator needs an rng for weight init")
        self.config = config
        self.mapping = MappingNetwork(config.latent_dim, config.mapping_depth,
                                      rng)
        self.synthesis = SynthesisNetwork(config, rng)
        self.mlp = SdfMlp(config.feature_channels, config.mlp_hidden, rng)

    def map_latent(self, z):
        """Intermediate latent w for z, shape-preserving."""
        return self.mapping(z)

    def synthesize(self, w, noise=None):
        """Feature volume(s) for intermediate latents.

        ``noise`` may be None (zero noise), an int seed or Generator, or
        an explicit list of per-block (n, 1, r, r, r) maps.
        """
        return self.synthesis(w, noise)

    def generate_volume(self, z, noise=None):
        return self.synthesize(self.map_latent(z), noise)

    def generate_sdf(self, z, noise=None):
        """ImplicitSdf for one latent vector z of shape (latent_dim,)."""
        z = T.as_tensor(z)
        if z.ndim != 1:
            raise DimensionError(
                f"generate_sdf takes a single latent (d,), got {z.shape}")
        volume = self.generate_volume(z, noise)
        feat = FeatureVolume(self.config.feature_resolution,
                             self.config.feature_channels, values=volume)
        return ImplicitSdf(feat, self.mlp)

    def sample_latents(self, n, rng):
        rng = np.random.default_rng(rng)
        return rng.standard_normal((n, self.config.latent_dim))


def clone_generator(gen):
    """Structural copy with identical weights (e.g. the EMA shadow)."""
    twin = Generator(gen.config, rng=np.random.default_rng(0))
    twin.load_state_arrays(gen.state_arrays())
    return twin


def ema_update(target, source, decay):
    """target <- decay * target + (1 - decay) * source, parameter-wise."""
    if not 0.0 <= decay <= 1.0:
        raise UsageError(f"EMA decay must lie in [0, 1], got {decay}")
    for (name_t, p_t), (name_s, p_s) in zip(target.named_parameters(),
                                            source.named_parameters()):
        if name_t != name_s:
            raise DimensionError(
                f"EMA parameter mismatch: {name_t!r} vs {name_s!r}")
        p_t.data = decay * p_t.data + (1.0 - decay) * p_s.data
