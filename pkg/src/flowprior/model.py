"""Multi-scale invertible flow: squeeze, K steps per level, factor-out.

Encoding maps an image to a stack of latents (index 0 = deepest/coarsest,
scored by the base distribution; higher indices were factored out at
progressively finer levels) together with the exact per-sample
log-density. Decoding inverts the map exactly; missing latents can be
filled with conditional means (optionally detached from the tape) or
conditional samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, constant, scale
from .distributions import DiagGaussian, make_rng
from .layers import ActNorm, AffineCoupling, ContextEncoder, InvConv1x1, Split, squeeze_apply


class LatentStack:
    """Ordered latents (u_0 deepest ... u_{L-1} finest) of one image batch."""

    def __init__(self, latents):
        self.latents = list(latents)

    def __len__(self):
        return len(self.latents)

    def __getitem__(self, i):
        return self.latents[i]

    def __iter__(self):
        return iter(self.latents)

    def shapes(self):
        return [t.shape for t in self.latents]

    def values(self):
        """Plain arrays, detached from any tape."""
        return [np.array(t.data if isinstance(t, Tensor) else t) for t in self.latents]


@dataclass
class EncodeResult:
    stack: LatentStack
    log_prob: Tensor      # per-sample (N,)
    logdet: Tensor        # sum of layer log-determinants, encode direction
    log_prior: Tensor     # base + conditional terms


@dataclass
class DecodeResult:
    x: Tensor
    log_prob: Tensor      # per-sample (N,), density of the decoded images
    stack: LatentStack    # latents actually used (fills included)


class FlowStep:
    """ActNorm -> invertible 1x1 convolution -> affine coupling."""

    def __init__(self, num_channels, c_inter, n_blocks, rng, actnorm_initialized):
        self.actnorm = ActNorm(num_channels, initialized=actnorm_initialized)
        self.invconv = InvConv1x1(num_channels, rng)
        self.coupling = AffineCoupling(num_channels, c_inter, n_blocks, rng)

    def parameters(self):
        return ([(f"actnorm/{n}", t) for n, t in self.actnorm.parameters()]
                + [(f"invconv/{n}", t) for n, t in self.invconv.parameters()]
                + [(f"coupling/{n}", t) for n, t in self.coupling.parameters()])

    def apply(self, x, inverse=False):
        if inverse:
            x, ld1 = self.coupling.apply(x, inverse=True)
            x, ld2 = self.invconv.apply(x, inverse=True)
            x, ld3 = self.actnorm.apply(x, inverse=True)
        else:
            x, ld1 = self.actnorm.apply(x)
            x, ld2 = self.invconv.apply(x)
            x, ld3 = self.coupling.apply(x)
        return x, ld1 + ld2 + ld3


class FlowModel:
    """The full generative flow for a fixed input shape.

    Each of the `levels` levels squeezes 2x then applies `steps_per_level`
    flow steps; all levels but the last factor out half their channels
    under a conditional Gaussian predicted by a context encoder. The last
    level's output is scored by a trainable diagonal-Gaussian base.
    """

    def __init__(self, in_shape, levels=1, steps_per_level=2, c_inter=32,
                 n_blocks=2, context_encoder="conv", encoder_width=64,
                 base_trainable_mean=True, base_trainable_std=False,
                 data_init_actnorm=True, seed=0):
        c, h, w = in_shape
        if h % (2 ** levels) or w % (2 ** levels):
            raise ShapeError(
                f"input {h}x{w} is not divisible by 2^{levels}; zero-pad the "
                f"image to a multiple of {2 ** levels} first")
        self.in_shape = (c, h, w)
        self.levels = levels
        self.steps_per_level = steps_per_level
        self.c_inter = c_inter
        self.n_blocks = n_blocks
        self.context_encoder = context_encoder
        self.encoder_width = encoder_width
        self.seed = seed

        self.level_steps: list[list[FlowStep]] = []
        self.splits: list[Split] = []
        ch, hh, ww = c, h, w
        for lvl in range(levels):
            ch, hh, ww = ch * 4, hh // 2, ww // 2
            rng = make_rng(seed, "model-init", lvl)
            steps = [FlowStep(ch, c_inter, n_blocks, rng, not data_init_actnorm)
                     for _ in range(steps_per_level)]
            self.level_steps.append(steps)
            if lvl < levels - 1:
                enc = ContextEncoder(ch // 2, kind=context_encoder,
                                     width=encoder_width, rng=rng)
                self.splits.append(Split(ch, enc))
                ch //= 2
        self.base = DiagGaussian((ch, hh, ww),
                                 trainable_mean=base_trainable_mean,
                                 trainable_std=base_trainable_std)
        # latent_shapes[0] is the base level; higher indices are finer
        shapes = [(ch, hh, ww)]
        cc, sh, sw = c, h, w
        for lvl in range(levels - 1):
            cc, sh, sw = cc * 4 // 2, sh // 2, sw // 2
            shapes.append((cc, sh, sw))
        self.latent_shapes = [shapes[0]] + shapes[:0:-1]

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        out = []
        for lvl, steps in enumerate(self.level_steps):
            for k, step in enumerate(steps):
                out += [(f"level{lvl}/step{k}/{n}", t) for n, t in step.parameters()]
            if lvl < self.levels - 1:
                out += [(f"level{lvl}/split/{n}", t)
                        for n, t in self.splits[lvl].parameters()]
        out += [(f"base/{n}", t) for n, t in self.base.parameters()]
        return out

    def actnorms(self):
        return [s.actnorm for steps in self.level_steps for s in steps]

    def freeze(self):
        for _, p in self.parameters():
            p.requires_grad = False

    def unfreeze(self):
        for _, p in self.parameters():
            p.requires_grad = True

    # -- forward / inverse ---------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.in_shape:
            c, h, w = self.in_shape
            raise ShapeError(
                f"expected input of shape (N,{c},{h},{w}), got {tuple(x.shape)}; "
                f"zero-pad images whose extents are not divisible by {2 ** self.levels}")

    def encode(self, x, training=False, rng=None) -> EncodeResult:
        x = x if isinstance(x, Tensor) else constant(x)
        self._check_input(x)
        h = x
        logdet = constant(0.0)
        log_prior = constant(0.0)
        stack: list = [None] * self.levels
        for lvl in range(self.levels):
            h = squeeze_apply(h)
            for step in self.level_steps[lvl]:
                h, ld = step.apply(h)
                logdet = logdet + ld
            if lvl < self.levels - 1:
                h, u, lp = self.splits[lvl].forward(h, training, rng)
                stack[self.levels - 1 - lvl] = u
                log_prior = log_prior + lp
        stack[0] = h
        log_prior = log_prior + self.base.log_prob(h)
        return EncodeResult(LatentStack(stack), log_prior + logdet, logdet, log_prior)

    def decode(self, latents, fill=None, training=False, rng=None) -> DecodeResult:
        """Invert the flow. `latents` is a length-L sequence whose entries are
        Tensors/arrays or None; None entries are filled according to `fill`
        ('mean', 'detached_mean' or 'sample')."""
        if len(latents) != self.levels:
            raise ShapeError(f"expected {self.levels} latents, got {len(latents)}")
        latents = [t if (t is None or isinstance(t, Tensor)) else constant(t)
                   for t in latents]
        for i, t in enumerate(latents):
            if t is not None and tuple(t.shape[1:]) != self.latent_shapes[i]:
                raise ShapeError(
                    f"latent {i}: expected trailing shape {self.latent_shapes[i]}, "
                    f"got {tuple(t.shape)}")
        h = latents[0]
        if h is None:
            n = next((t.shape[0] for t in latents if t is not None), 1)
            if fill == "sample":
                if rng is None:
                    raise ad.ContractError("decode: sampling requires an rng")
                h = self.base.sample(rng, n)
            elif fill == "mean":
                # broadcast the (1,...) mean up to the batch inside the tape
                h = self.base.mean_of() + constant(np.zeros((n, 1, 1, 1)))
            elif fill == "detached_mean":
                h = constant(np.broadcast_to(self.base.mean_of().data,
                                             (n,) + self.base.shape).copy())
            else:
                raise ad.ContractError("decode: base latent missing and no fill mode")
        used: list = [None] * self.levels
        used[0] = h
        log_prior = self.base.log_prob(h)
        inv_logdet = constant(0.0)
        for lvl in range(self.levels - 1, -1, -1):
            if lvl < self.levels - 1:
                idx = self.levels - 1 - lvl
                h, u, lp = self.splits[lvl].inverse(
                    h, latents[idx], fill=fill, training=training, rng=rng)
                used[idx] = u
                log_prior = log_prior + lp
            for step in reversed(self.level_steps[lvl]):
                h, ld = step.apply(h, inverse=True)
                inv_logdet = inv_logdet + ld
            h = squeeze_apply(h, inverse=True)
        log_prob = log_prior + scale(inv_logdet, -1.0)
        return DecodeResult(h, log_prob, LatentStack(used))

    def mean_decode(self, u0) -> Tensor:
        """Decode from the deepest latent alone, filling every factored-out
        level with its predicted conditional mean."""
        latents = [u0] + [None] * (self.levels - 1)
        return self.decode(latents, fill="mean").x

    def sample(self, rng, n=1) -> np.ndarray:
        base = self.base.sample(rng, n)
        return self.decode([base] + [None] * (self.levels - 1),
                           fill="sample", rng=rng).x.data
