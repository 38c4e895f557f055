"""Diagonal Gaussian densities and deterministic random streams.

All randomness in the package flows through :func:`make_rng`, a
counter-based generator keyed by an explicit seed plus a purpose tag (and
optionally a step index), so that training, dequantization, degradation
and restoration are reproducible and resumable without carrying generator
state around.
"""

from __future__ import annotations

import zlib

import numpy as np

from .autodiff import Tensor, constant, exp, mul, parameter, scale, sub, sum_samples

LOG_TWO_PI = float(np.log(2.0 * np.pi))


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Philox generator keyed by (seed, *tags); tags may be ints or strings."""
    keys = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            keys.append(zlib.crc32(t.encode()))
        else:
            keys.append(int(t) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))


def gaussian_log_prob(x: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Per-sample log N(x; mean, diag(exp(log_std))^2), summed over all but
    the batch axis. `mean`/`log_std` may broadcast against `x`."""
    z = mul(sub(x, mean), exp(scale(log_std, -1.0)))
    per_entry = scale(mul(z, z), -0.5) - log_std - constant(0.5 * LOG_TWO_PI)
    return sum_samples(per_entry)


class DiagGaussian:
    """Diagonal Gaussian with optionally trainable mean and log-std.

    The parameter tensors carry a leading broadcast axis of extent 1 so a
    single distribution scores whole batches.
    """

    def __init__(self, shape, trainable_mean=True, trainable_std=False):
        self.shape = tuple(shape)
        full = (1,) + self.shape
        make = parameter if trainable_mean else constant
        self.mean = make(np.zeros(full))
        make = parameter if trainable_std else constant
        self.log_std = make(np.zeros(full))
        self.trainable_mean = trainable_mean
        self.trainable_std = trainable_std

    def parameters(self):
        out = []
        if self.trainable_mean:
            out.append(("mean", self.mean))
        if self.trainable_std:
            out.append(("log_std", self.log_std))
        return out

    def log_prob(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else constant(x)
        if x.shape[1:] != self.shape:
            raise ValueError(f"log_prob: input shape {x.shape} does not match "
                             f"distribution shape {self.shape}")
        return gaussian_log_prob(x, self.mean, self.log_std)

    def sample(self, rng: np.random.Generator, n: int = 1) -> Tensor:
        """Reparameterized draw: mean + std * eps, differentiable w.r.t. the
        distribution parameters."""
        eps = constant(rng.standard_normal((n,) + self.shape))
        return self.mean + mul(exp(self.log_std), eps)

    def mean_of(self) -> Tensor:
        return self.mean
