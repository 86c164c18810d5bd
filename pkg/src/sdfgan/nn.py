"""Module/parameter plumbing and equalized-learning-rate layers.

All weights are stored unit-normal and rescaled at use time by
gain / sqrt(fan_in) * lr_multiplier, the equalized-learning-rate
convention, so one optimizer step size fits every layer.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError

SQRT2 = math.sqrt(2.0)


class Module:
    """Minimal container with recursive parameter discovery."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, T.Parameter):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, T.Parameter):
                        out.append((f"{name}.{i}", item))
        return out

    def state_arrays(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_arrays(self, records, prefix=""):
        for name, p in self.named_parameters(prefix):
            if name not in records:
                raise DataError(f"checkpoint is missing record {name!r}")
            arr = np.asarray(records[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DataError(
                    f"checkpoint record {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None


def lrelu(x):
    """Leaky ReLU with the variance-preserving sqrt(2) gain."""
    return T.mul(T.leaky_relu(x, 0.2), SQRT2)


class EqualizedLinear(Module):
    def __init__(self, in_features, out_features, rng, lr_multiplier=1.0, bias=True,
                 bias_init=0.0):
        self.weight = T.Parameter(
            rng.standard_normal((out_features, in_features)) / lr_multiplier,
            name="weight",
            lr_multiplier=lr_multiplier,
        )
        self.coef = lr_multiplier / math.sqrt(in_features)
        self.bias = (
            T.Parameter(np.full(out_features, float(bias_init)), name="bias",
                        lr_multiplier=lr_multiplier)
            if bias
            else None
        )
        self.bias_coef = lr_multiplier

    def __call__(self, x):
        out = T.matmul(x, T.transpose(T.mul(self.weight.tensor, self.coef)))
        if self.bias is not None:
            out = T.add(out, T.mul(self.bias.tensor, self.bias_coef))
        return out


class EqualizedConv3d(Module):
    def __init__(self, in_channels, out_channels, kernel, rng, bias=True):
        self.weight = T.Parameter(
            rng.standard_normal((out_channels, in_channels, kernel, kernel, kernel)),
            name="weight",
        )
        self.coef = 1.0 / math.sqrt(in_channels * kernel ** 3)
        self.bias = (
            T.Parameter(np.zeros(out_channels), name="bias") if bias else None
        )

    def __call__(self, x):
        w = T.mul(self.weight.tensor, self.coef)
        b = self.bias.tensor if self.bias is not None else None
        return T.conv3d(x, w, b)


class ModulatedConv3d(Module):
    """Style-modulated 3-D convolution with its affine style head."""

    def __init__(self, in_channels, out_channels, kernel, latent_dim, rng,
                 demodulate=True):
        self.affine = EqualizedLinear(latent_dim, in_channels, rng, bias_init=1.0)
        self.weight = T.Parameter(
            rng.standard_normal((out_channels, in_channels, kernel, kernel, kernel)),
            name="weight",
        )
        self.coef = 1.0 / math.sqrt(in_channels * kernel ** 3)
        self.demodulate = demodulate

    def __call__(self, x, w_latent):
        if w_latent.ndim != 2:
            raise DimensionError(
                f"modulated conv expects latent rows (N, D), got {w_latent.ndim}-D"
            )
        style = self.affine(w_latent)
        weight = T.mul(self.weight.tensor, self.coef)
        return T.modulated_conv3d(x, weight, style, demodulate=self.demodulate)


class Adam(Module):
    """Adaptive-moment optimizer with the lazy-regularization correction.

    When a loss only includes its regularizer every ``lazy_interval``
    steps, lr and betas are corrected by interval/(interval+1) so the
    effective decay per wall-clock step matches the eager schedule.
    """

    def __init__(self, params, lr=2e-3, beta1=0.0, beta2=0.99, eps=1e-8,
                 lazy_interval=None):
        self.params = list(params)
        if lazy_interval:
            ratio = lazy_interval / (lazy_interval + 1.0)
            lr = lr * ratio
            beta1 = beta1 ** ratio
            beta2 = beta2 ** ratio
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.tensor.grad is None:
                continue
            g = p.tensor.grad.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (
                np.sqrt(self.v[i] / c2) + self.eps
            )

    def state_arrays(self, prefix):
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for i, _ in enumerate(self.params):
            out[f"{prefix}.m.{i}"] = self.m[i].copy()
            out[f"{prefix}.v.{i}"] = self.v[i].copy()
        return out

    def load_state_arrays(self, records, prefix):
        key = f"{prefix}.t"
        if key not in records:
            raise DataError(f"checkpoint is missing record {key!r}")
        self.t = int(records[key][0])
        for i, p in enumerate(self.params):
            for field, store in (("m", self.m), ("v", self.v)):
                name = f"{prefix}.{field}.{i}"
                if name not in records:
                    raise DataError(f"checkpoint is missing record {name!r}")
                arr = np.asarray(records[name], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise DataError(
                        f"checkpoint record {name!r} has shape {arr.shape}, "
                        f"expected {p.data.shape}"
                    )
                store[i] = arr
