"""Invertible layers with exact log-determinants.

Every layer exposes ``apply(x, inverse=False)`` returning ``(y, logdet)``
where ``logdet`` is a tape node holding log|det dy/dx| for a single sample
(a scalar for the per-channel layers, a length-N vector for the coupling,
whose Jacobian depends on the input). The inverse application returns the
negated forward value. Log-probability accumulators broadcast the scalar
cases over the batch.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import (ShapeError, Tensor, channels, concat_channels, constant,
                       conv2d, exp, log_abs_det, mat_inverse, mul, parameter,
                       relu, reshape, scale, squeeze2x, sub, sum_samples,
                       unsqueeze2x)
from .distributions import gaussian_log_prob

DET_FLOOR = 1e-12


class StateError(RuntimeError):
    """Layer used before its data-dependent initialization."""


class SingularMatrixError(ValueError):
    pass


def _coerce(x):
    return x if isinstance(x, Tensor) else constant(x)


class ActNorm:
    """Per-channel affine map y = s*x + t with s = exp(log_scale) > 0.

    On the first forward pass the parameters are set from the incoming
    batch so that each channel of the output has zero mean and unit
    variance; pass ``initialized=True`` to skip that and start from the
    identity.
    """

    def __init__(self, num_channels: int, initialized: bool = False):
        self.num_channels = num_channels
        self.log_scale = parameter(np.zeros(num_channels))
        self.bias = parameter(np.zeros(num_channels))
        self.initialized = initialized

    def parameters(self):
        return [("log_scale", self.log_scale), ("bias", self.bias)]

    def init_from(self, x: np.ndarray):
        mean = x.mean(axis=(0, 2, 3))
        std = np.sqrt(x.var(axis=(0, 2, 3)))
        if np.any(std < 1e-12):
            raise ad.DomainError("actnorm init: a channel has (near-)zero variance")
        self.log_scale.data[...] = -np.log(std)
        self.bias.data[...] = -mean / std
        self.initialized = True

    def apply(self, x, inverse: bool = False):
        x = _coerce(x)
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(f"actnorm: expected (N,{self.num_channels},H,W), got {x.shape}")
        if not self.initialized:
            if inverse:
                raise StateError("actnorm: inverse before data-dependent initialization")
            self.init_from(x.data)
        n, c, h, w = x.shape
        s = reshape(exp(self.log_scale), (1, c, 1, 1))
        t = reshape(self.bias, (1, c, 1, 1))
        logdet = scale(self.log_scale.sum(), float(h * w))
        if inverse:
            y = mul(sub(x, t), reshape(exp(scale(self.log_scale, -1.0)), (1, c, 1, 1)))
            return y, scale(logdet, -1.0)
        return mul(x, s) + t, logdet


class InvConv1x1:
    """Learned channel mixing by an invertible CxC matrix, applied per pixel.

    Initialized to a random rotation so the log-determinant starts at zero.
    """

    def __init__(self, num_channels: int, rng: np.random.Generator | None = None):
        self.num_channels = num_channels
        if rng is None:
            w = np.eye(num_channels)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((num_channels, num_channels)))
            w = q
        self.weight = parameter(w)

    def parameters(self):
        return [("weight", self.weight)]

    def _check_det(self) -> float:
        sign, logdet = np.linalg.slogdet(self.weight.data)
        absdet = math.exp(logdet) if sign != 0 else 0.0
        if absdet < DET_FLOOR:
            raise SingularMatrixError(
                f"1x1 convolution weight is near-singular: |det W| = {absdet:.3e}")
        return logdet

    def apply(self, x, inverse: bool = False):
        x = _coerce(x)
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(f"invconv: expected (N,{self.num_channels},H,W), got {x.shape}")
        self._check_det()
        n, c, h, w = x.shape
        logdet = scale(log_abs_det(self.weight), float(h * w))
        if inverse:
            kernel = reshape(mat_inverse(self.weight), (c, c, 1, 1))
            return conv2d(x, kernel), scale(logdet, -1.0)
        kernel = reshape(self.weight, (c, c, 1, 1))
        return conv2d(x, kernel), logdet


def _zero_conv(c_in: int, c_out: int, k: int):
    return parameter(np.zeros((c_out, c_in, k, k))), parameter(np.zeros(c_out))


def _rand_conv(c_in: int, c_out: int, k: int, rng: np.random.Generator):
    fan_in = c_in * k * k
    w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
    return parameter(w), parameter(np.zeros(c_out))


class AffineCoupling:
    """Affine coupling: the first half of the channels passes through and
    conditions a scale/translation of the second half.

    The conditioner is a 3x3 convolution followed by residual blocks of
    [3x3 conv, 1x1 conv, add] and a zero-initialized 3x3 output convolution
    emitting raw-scale and translation stacks, so the layer is the identity
    at initialization. The scale is exp(raw) and therefore never zero.
    """

    def __init__(self, num_channels: int, c_inter: int, n_blocks: int = 2,
                 rng: np.random.Generator | None = None):
        if num_channels % 2:
            raise ShapeError(f"coupling: channel count must be even, got {num_channels}")
        if rng is None:
            rng = np.random.Generator(np.random.Philox(0))
        self.num_channels = num_channels
        self.c_half = num_channels // 2
        self.c_inter = c_inter
        self.n_blocks = n_blocks
        self.w_in, self.b_in = _rand_conv(self.c_half, c_inter, 3, rng)
        self.blocks = []
        for _ in range(n_blocks):
            w3, b3 = _rand_conv(c_inter, c_inter, 3, rng)
            w1, b1 = _rand_conv(c_inter, c_inter, 1, rng)
            self.blocks.append((w3, b3, w1, b1))
        self.w_out, self.b_out = _zero_conv(c_inter, num_channels, 3)

    def parameters(self):
        out = [("w_in", self.w_in), ("b_in", self.b_in)]
        for i, (w3, b3, w1, b1) in enumerate(self.blocks):
            out += [(f"block{i}/w3", w3), (f"block{i}/b3", b3),
                    (f"block{i}/w1", w1), (f"block{i}/b1", b1)]
        out += [("w_out", self.w_out), ("b_out", self.b_out)]
        return out

    def _conditioner(self, x1: Tensor):
        h = relu(conv2d(x1, self.w_in, self.b_in))
        for w3, b3, w1, b1 in self.blocks:
            h = h + relu(conv2d(relu(conv2d(h, w3, b3)), w1, b1))
        out = conv2d(h, self.w_out, self.b_out)
        raw = channels(out, 0, self.c_half)
        t = channels(out, self.c_half, self.num_channels)
        return raw, t

    def apply(self, x, inverse: bool = False):
        x = _coerce(x)
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(f"coupling: expected (N,{self.num_channels},H,W), got {x.shape}")
        a = channels(x, 0, self.c_half)
        b = channels(x, self.c_half, self.num_channels)
        raw, t = self._conditioner(a)
        if inverse:
            b_out = mul(sub(b, t), exp(scale(raw, -1.0)))
            logdet = scale(sum_samples(raw), -1.0)
        else:
            b_out = mul(b, exp(raw)) + t
            logdet = sum_samples(raw)
        return concat_channels([a, b_out]), logdet


class ContextEncoder:
    """Predicts (mu, log_sigma) for the factored-out half from the kept half.

    Two variants: a single zero-initialized 3x3 convolution, or a deeper
    five-convolution stack with dropout at the input and a zero-initialized
    final convolution. Both predict mu = 0, sigma = 1 at initialization.
    """

    def __init__(self, num_channels: int, kind: str = "conv", width: int = 64,
                 dropout: float = 0.2, rng: np.random.Generator | None = None):
        if kind not in ("conv", "deep"):
            raise ValueError(f"context encoder kind must be 'conv' or 'deep', got {kind!r}")
        self.num_channels = num_channels
        self.kind = kind
        self.dropout = dropout
        if kind == "conv":
            self.convs = [_zero_conv(num_channels, 2 * num_channels, 3)]
        else:
            if rng is None:
                rng = np.random.Generator(np.random.Philox(0))
            self.convs = [
                _rand_conv(num_channels, width, 3, rng),
                _rand_conv(width, width, 3, rng),
                _rand_conv(width, width, 3, rng),
                _rand_conv(width, width, 1, rng),
            ]
            self.convs.append(_zero_conv(width, 2 * num_channels, 3))

    def parameters(self):
        return [(f"conv{i}/{nm}", t)
                for i, (w, b) in enumerate(self.convs)
                for nm, t in (("w", w), ("b", b))]

    def __call__(self, h: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None):
        x = h
        if self.kind == "deep" and training and self.dropout > 0.0:
            if rng is None:
                raise ad.ContractError("context encoder: dropout in training mode needs an rng")
            keep = 1.0 - self.dropout
            mask = constant((rng.random(x.shape) < keep) / keep)
            x = mul(x, mask)
        last = len(self.convs) - 1
        for i, (w, b) in enumerate(self.convs):
            x = conv2d(x, w, b)
            if i < last:
                x = relu(x)
        mu = channels(x, 0, self.num_channels)
        log_sigma = channels(x, self.num_channels, 2 * self.num_channels)
        return mu, log_sigma


class Split:
    """Factor-out: emit the second half of the channels as a latent scored
    under a conditional diagonal Gaussian predicted from the kept half."""

    def __init__(self, num_channels: int, encoder: ContextEncoder):
        if num_channels % 2:
            raise ShapeError(f"split: channel count must be even, got {num_channels}")
        self.num_channels = num_channels
        self.c_half = num_channels // 2
        self.encoder = encoder

    def parameters(self):
        return [(f"encoder/{n}", t) for n, t in self.encoder.parameters()]

    def forward(self, h, training: bool = False, rng=None):
        h = _coerce(h)
        if h.shape[1] != self.num_channels:
            raise ShapeError(f"split: expected {self.num_channels} channels, got {h.shape}")
        kept = channels(h, 0, self.c_half)
        u = channels(h, self.c_half, self.num_channels)
        mu, log_sigma = self.encoder(kept, training, rng)
        return kept, u, gaussian_log_prob(u, mu, log_sigma)

    def inverse(self, kept, u=None, *, fill: str | None = None,
                training: bool = False, rng=None):
        """Concatenate the factored-out latent back. ``u=None`` requires a
        fill mode: 'mean' uses the predicted mean (tape-connected),
        'detached_mean' cuts the value out of the tape, 'sample' draws from
        the conditional."""
        kept = _coerce(kept)
        mu, log_sigma = self.encoder(kept, training, rng)
        if u is None:
            if fill == "mean":
                u = mu
            elif fill == "detached_mean":
                u = constant(mu.data.copy())
            elif fill == "sample":
                if rng is None:
                    raise ad.ContractError("split inverse: sampling requires an rng")
                eps = constant(rng.standard_normal(mu.shape))
                u = mu + mul(exp(log_sigma), eps)
            else:
                raise ad.ContractError(
                    "split inverse: latent missing and no fill mode requested")
        else:
            u = _coerce(u)
        log_p = gaussian_log_prob(u, mu, log_sigma)
        return concat_channels([kept, u]), u, log_p


def squeeze_apply(x, inverse: bool = False) -> Tensor:
    """Space-to-depth by factor 2 (volume preserving, logdet 0)."""
    return unsqueeze2x(x) if inverse else squeeze2x(x)
