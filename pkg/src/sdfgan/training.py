"""Adversarial training: dual-discriminator GAN loop over SDF grids.

Each step updates the global discriminator, the local discriminator, and
the generator in that order, with softplus GAN losses, lazy R1 and
path-length regularization, a linear ramp alpha(t) weighting the local
term, and an EMA shadow of the generator.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .discriminator import global_discriminator, local_discriminator
from .errors import ConfigError, DataError, NumericError, UsageError
from .generator import Generator, ModelConfig, clone_generator, ema_update
from .geometry import SdfGrid, lattice_points
from .implicit import (
    FeatureVolume,
    GridSdf,
    ImplicitSdf,
    build_feature_grid_global,
    build_feature_grid_local,
    global_grids_batch,
    local_grids_batch,
    select_local_regions,
)
from .nn import Adam

GRID_SUFFIX = ".sdfgrid"


@dataclass
class TrainConfig:
    """Optimization hyperparameters for the GAN loop."""

    batch_size: int = 32
    t_max: int = 200
    alpha_min: float = 0.0
    alpha_max: float = 8.0
    beta: float = 2.0
    r1_gamma: float = 10.0
    r1_interval: int = 16
    pl_interval: int = 8
    pl_decay: float = 0.99
    ema_decay: float = 0.999
    lr: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "t_max", "r1_interval", "pl_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("pl_decay", "ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.alpha_max < 0 or self.alpha_min < 0:
            raise ConfigError("alpha range must be non-negative")


def alpha_schedule(t, config):
    """Linear ramp alpha(t) = alpha_min + alpha_max * t / t_max."""
    if not 0 <= t <= config.t_max:
        raise UsageError(f"epoch {t} outside [0, {config.t_max}]")
    return config.alpha_min + config.alpha_max * (t / config.t_max)


def d_loss(scores_real, scores_fake):
    """Softplus GAN discriminator loss: mean z(fake) + mean z(-real)."""
    return T.softplus(scores_fake).mean() + T.softplus(-scores_real).mean()


def g_loss(scores_fake):
    """Softplus GAN generator loss: mean z(-fake)."""
    return T.softplus(-scores_fake).mean()


def r1_penalty(disc, grids):
    """Mean per-sample squared norm of d score / d input at the given grids.

    ``grids`` is a plain array batch; the returned Tensor stays on the
    graph so the penalty trains the discriminator parameters.
    """
    var = T.Tensor(np.asarray(grids, dtype=np.float64), requires_grad=True)
    scores = disc(var)
    g = T.grad(scores.sum(), [var], create_graph=True)[0]
    n = g.shape[0]
    return (g * g).reshape((n, -1)).sum(axis=1).mean()


def path_lengths(volumes, w, y):
    """Per-sample norms of the Jacobian-vector product d(volumes . y)/dw."""
    s = (volumes * T.as_tensor(y)).sum()
    jac = T.grad(s, [w], create_graph=True)[0]
    return T.sqrt((jac * jac).sum(axis=1) + 1e-12)


class GridDataset:
    """Training shapes as SDF grids with cached discriminator-side inputs.

    Per shape the 4-channel global grid and the signed lattice values used
    for region selection are precomputed once; local grids are sampled
    fresh each step because their region centers are random.
    """

    def __init__(self, grids, model_config):
        if not grids:
            raise DataError("dataset contains no grids")
        self.config = model_config
        self.grids = [g if isinstance(g, SdfGrid) else SdfGrid(g) for g in grids]
        k = model_config.k_global
        pts = lattice_points(k)
        self.t_global = []
        self.lattice_values = []
        for grid in self.grids:
            src = GridSdf(grid)
            built = build_feature_grid_global(src, k=k)
            self.t_global.append(np.asarray(built.values.data, dtype=np.float64))
            self.lattice_values.append(src.sample(pts))

    @classmethod
    def from_dir(cls, path, model_config):
        names = sorted(n for n in os.listdir(path) if n.endswith(GRID_SUFFIX))
        if not names:
            raise DataError(f"no {GRID_SUFFIX} files under {path}")
        grids = [SdfGrid.load(os.path.join(path, n)) for n in names]
        return cls(grids, model_config)

    def __len__(self):
        return len(self.grids)

    def global_batch(self, indices):
        return np.stack([self.t_global[i] for i in indices])

    def region_centers(self, index, rng):
        cfg = self.config
        return select_local_regions(
            None,
            n_candidates=cfg.n_candidates,
            n_regions=cfg.n_regions,
            box_size=cfg.box_size,
            rng=rng,
            k=cfg.k_global,
            values=self.lattice_values[index],
        )

    def local_batch(self, indices, rng):
        cfg = self.config
        grids = []
        for i in indices:
            src = GridSdf(self.grids[i])
            for center in self.region_centers(i, rng):
                built = build_feature_grid_local(src, center, k=cfg.k_local,
                                                 box_size=cfg.box_size)
                grids.append(np.asarray(built.values.data, dtype=np.float64))
        return np.stack(grids)


class Trainer:
    """Owns the models, optimizers, and counters of one training run."""

    def __init__(self, model_config=None, train_config=None):
        self.model_config = model_config or ModelConfig()
        self.train_config = train_config or TrainConfig()
        seeds = np.random.SeedSequence(self.train_config.seed).spawn(2)
        init_rng = np.random.default_rng(seeds[0])
        self.rng = np.random.default_rng(seeds[1])
        tc = self.train_config
        self.generator = Generator(self.model_config, rng=init_rng)
        self.g_ema = clone_generator(self.generator)
        self.d_global = global_discriminator(self.model_config, init_rng)
        self.d_local = local_discriminator(self.model_config, init_rng)
        self.opt_g = Adam(self.generator.parameters(), lr=tc.lr,
                          beta1=tc.adam_beta1, beta2=tc.adam_beta2,
                          lazy_interval=tc.pl_interval)
        self.opt_dg = Adam(self.d_global.parameters(), lr=tc.lr,
                           beta1=tc.adam_beta1, beta2=tc.adam_beta2,
                           lazy_interval=tc.r1_interval)
        self.opt_dl = Adam(self.d_local.parameters(), lr=tc.lr,
                           beta1=tc.adam_beta1, beta2=tc.adam_beta2,
                           lazy_interval=tc.r1_interval)
        self.step = 0
        self.epoch = 0
        self.pl_mean = 0.0
        self.log = []

    # ------------------------------------------------------------------
    # building blocks

    def _zero_grads(self):
        self.opt_g.zero_grad()
        self.opt_dg.zero_grad()
        self.opt_dl.zero_grad()

    def _require_finite(self, name, loss):
        if not np.isfinite(loss.data).all():
            raise NumericError(
                f"{name} loss is not finite at step {self.step}")

    def _fake_volumes(self, n, z=None, noise=None):
        if z is None:
            z = self.rng.standard_normal((n, self.model_config.latent_dim))
        w = self.generator.map_latent(T.as_tensor(z))
        if noise is None:
            noise = self.generator.synthesis.make_noise(n, self.rng)
        return self.generator.synthesize(w, noise), w

    def _fake_centers(self, volumes):
        cfg = self.model_config
        pts = lattice_points(cfg.k_global)
        data = volumes.data if isinstance(volumes, T.Tensor) else volumes
        centers = []
        with T.no_grad():
            for i in range(data.shape[0]):
                vol = T.Tensor(np.asarray(data[i], dtype=np.float64))
                values = self._sample_volume(vol, pts)
                centers.append(select_local_regions(
                    None, n_candidates=cfg.n_candidates,
                    n_regions=cfg.n_regions, box_size=cfg.box_size,
                    rng=self.rng, k=cfg.k_global, values=values))
        return np.stack(centers)

    def _sample_volume(self, volume, pts):
        cfg = self.model_config
        feat = FeatureVolume(cfg.feature_resolution, cfg.feature_channels,
                             values=volume)
        return ImplicitSdf(feat, self.generator.mlp).sample(pts)

    # ------------------------------------------------------------------
    # losses

    def loss_d_global(self, real_grids, with_r1, z=None, noise=None):
        cfg = self.model_config
        tc = self.train_config
        with T.no_grad():
            volumes, _ = self._fake_volumes(real_grids.shape[0], z, noise)
            fake = global_grids_batch(volumes, self.generator.mlp,
                                      k=cfg.k_global)
        scores_real = self.d_global(T.Tensor(real_grids))
        scores_fake = self.d_global(T.Tensor(fake.data))
        loss = d_loss(scores_real, scores_fake)
        if with_r1:
            penalty = r1_penalty(self.d_global, real_grids)
            loss = loss + penalty * (0.5 * tc.r1_gamma * tc.r1_interval)
        return loss

    def loss_d_local(self, real_grids, with_r1, z=None, noise=None,
                     centers=None):
        cfg = self.model_config
        tc = self.train_config
        with T.no_grad():
            volumes, _ = self._fake_volumes(
                real_grids.shape[0] // cfg.n_regions, z, noise)
            if centers is None:
                centers = self._fake_centers(volumes)
            fake = local_grids_batch(volumes, self.generator.mlp, centers,
                                     k=cfg.k_local, box_size=cfg.box_size)
        scores_real = self.d_local(T.Tensor(real_grids))
        scores_fake = self.d_local(T.Tensor(fake.data))
        loss = d_loss(scores_real, scores_fake)
        if with_r1:
            penalty = r1_penalty(self.d_local, real_grids)
            loss = loss + penalty * (0.5 * tc.r1_gamma * tc.r1_interval)
        return loss

    def loss_g(self, n, alpha, with_pl, z=None, noise=None, centers=None):
        cfg = self.model_config
        tc = self.train_config
        volumes, w = self._fake_volumes(n, z, noise)
        t_global = global_grids_batch(volumes, self.generator.mlp,
                                      k=cfg.k_global)
        loss = g_loss(self.d_global(t_global))
        if alpha > 0.0:
            if centers is None:
                centers = self._fake_centers(volumes)
            t_local = local_grids_batch(volumes, self.generator.mlp, centers,
                                        k=cfg.k_local, box_size=cfg.box_size)
            loss = loss + g_loss(self.d_local(t_local)) * alpha
        if with_pl:
            scale = 1.0 / np.sqrt(np.prod(volumes.shape[1:]))
            y = self.rng.standard_normal(volumes.shape) * scale
            lengths = path_lengths(volumes, w, y)
            deviation = lengths - self.pl_mean
            penalty = (deviation * deviation).mean()
            loss = loss + penalty * (tc.beta * tc.pl_interval)
            self.pl_mean = (tc.pl_decay * self.pl_mean
                            + (1.0 - tc.pl_decay) * float(lengths.data.mean()))
        return loss

    # ------------------------------------------------------------------
    # stepping

    def train_step(self, dataset, indices):
        """One D_G -> D_L -> G update on the given shape indices."""
        tc = self.train_config
        indices = list(indices)
        alpha = alpha_schedule(self.epoch, tc)
        lazy_r1 = self.step % tc.r1_interval == 0
        lazy_pl = self.step % tc.pl_interval == 0

        self._zero_grads()
        loss_dg = self.loss_d_global(dataset.global_batch(indices), lazy_r1)
        self._require_finite("global discriminator", loss_dg)
        T.backward(loss_dg)
        self.opt_dg.step()

        self._zero_grads()
        loss_dl = self.loss_d_local(dataset.local_batch(indices, self.rng),
                                    lazy_r1)
        self._require_finite("local discriminator", loss_dl)
        T.backward(loss_dl)
        self.opt_dl.step()

        self._zero_grads()
        loss_g_total = self.loss_g(len(indices), alpha, lazy_pl)
        self._require_finite("generator", loss_g_total)
        T.backward(loss_g_total)
        self.opt_g.step()

        ema_update(self.g_ema, self.generator, tc.ema_decay)
        self.step += 1
        record = {
            "step": self.step,
            "loss_dg": float(loss_dg.data),
            "loss_dl": float(loss_dl.data),
            "loss_g": float(loss_g_total.data),
            "alpha": float(alpha),
        }
        self.log.append(record)
        return record

    def train(self, dataset, epochs, log_path=None, checkpoint_path=None,
              progress=None):
        """Run whole epochs, optionally logging and checkpointing each one."""
        tc = self.train_config
        for _ in range(epochs):
            order = self.rng.permutation(len(dataset))
            for start in range(0, len(order), tc.batch_size):
                batch = order[start:start + tc.batch_size]
                if len(batch) < tc.batch_size and len(order) >= tc.batch_size:
                    break
                record = self.train_step(dataset, batch)
                if progress is not None:
                    progress(record)
            self.epoch = min(self.epoch + 1, tc.t_max)
            if log_path is not None:
                write_loss_log(log_path, self.log)
            if checkpoint_path is not None:
                self.save_checkpoint(checkpoint_path)

    # ------------------------------------------------------------------
    # persistence

    def save_checkpoint(self, path):
        records = {
            "meta.model_config": _json_record(asdict(self.model_config)),
            "meta.train_config": _json_record(asdict(self.train_config)),
            "meta.rng_state": _json_record(self.rng.bit_generator.state),
            "meta.step": np.array([self.step], dtype=np.int64),
            "meta.epoch": np.array([self.epoch], dtype=np.int64),
            "meta.pl_mean": np.array([self.pl_mean], dtype=np.float64),
        }
        records.update(self.generator.state_arrays("g."))
        records.update(self.g_ema.state_arrays("g_ema."))
        records.update(self.d_global.state_arrays("d_global."))
        records.update(self.d_local.state_arrays("d_local."))
        records.update(self.opt_g.state_arrays("opt_g"))
        records.update(self.opt_dg.state_arrays("opt_dg"))
        records.update(self.opt_dl.state_arrays("opt_dl"))
        checkpoint.write_records(path, records)

    @classmethod
    def load_checkpoint(cls, path):
        records = checkpoint.read_records(path)
        for key in ("meta.model_config", "meta.train_config", "meta.rng_state"):
            if key not in records:
                raise DataError(f"checkpoint is missing record {key!r}")
        model_config = ModelConfig(**_json_value(records["meta.model_config"]))
        train_config = TrainConfig(**_json_value(records["meta.train_config"]))
        trainer = cls(model_config, train_config)
        trainer.rng.bit_generator.state = _json_value(records["meta.rng_state"])
        trainer.step = int(records["meta.step"][0])
        trainer.epoch = int(records["meta.epoch"][0])
        trainer.pl_mean = float(records["meta.pl_mean"][0])
        trainer.generator.load_state_arrays(records, "g.")
        trainer.g_ema.load_state_arrays(records, "g_ema.")
        trainer.d_global.load_state_arrays(records, "d_global.")
        trainer.d_local.load_state_arrays(records, "d_local.")
        trainer.opt_g.load_state_arrays(records, "opt_g")
        trainer.opt_dg.load_state_arrays(records, "opt_dg")
        trainer.opt_dl.load_state_arrays(records, "opt_dl")
        return trainer


def _json_record(value):
    return np.frombuffer(json.dumps(value).encode("utf-8"), dtype=np.uint8)


def _json_value(record):
    return json.loads(bytes(record).decode("utf-8"))


def write_loss_log(path, log):
    """Plain-text loss trace: step, loss_dg, loss_dl, loss_g, alpha."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("step loss_dg loss_dl loss_g alpha\n")
        for rec in log:
            f.write(f"{rec['step']} {rec['loss_dg']:.6f} {rec['loss_dl']:.6f} "
                    f"{rec['loss_g']:.6f} {rec['alpha']:.6f}\n")
