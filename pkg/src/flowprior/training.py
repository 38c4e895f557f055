"""Training: dequantization, the four losses, Adam, clipping, the loop.

Pixel data enters as integers in [0, 255], is dequantized with uniform
noise and mapped to [0, 1) by dividing by 256; bits/dim reporting adds
the log2(256) offset for that range map. All stochastic draws come from
counter-based streams keyed by (seed, purpose, step) so that a run is
bit-reproducible and a resumed run continues the exact same trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backprop, constant, scale, sqrt, sum_samples, tensor_sum
from .distributions import make_rng
from .model import FlowModel

LOG_TWO_PI = float(np.log(2.0 * np.pi))


class ValidationError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Architecture plus optimization settings; presets mirror the published
    parameter tables."""

    levels: int = 1
    steps_per_level: int = 2
    c_inter: int = 32
    n_blocks: int = 2
    in_channels: int = 1
    image_size: int = 32
    context_encoder: str = "conv"
    encoder_width: int = 64
    base_trainable_mean: bool = True
    base_trainable_std: bool = False
    learning_rate: float = 1e-4
    batch_size: int = 50
    total_steps: int = 1000
    grad_clip_value: float = 1e5
    grad_clip_norm: float = 1e4
    beta_ln: float = 0.0
    beta_ae: float = 0.0
    beta_in: float = 0.0
    latent_noise_magnitude: float = 0.5
    image_noise_magnitude: float = 10.0
    seed: int = 0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        for name in ("levels", "steps_per_level", "c_inter", "n_blocks",
                     "in_channels", "image_size", "learning_rate", "batch_size",
                     "grad_clip_value", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        for name in ("beta_ln", "beta_ae", "beta_in", "total_steps",
                     "latent_noise_magnitude", "image_noise_magnitude"):
            if getattr(self, name) < 0:
                raise ValidationError(f"config field {name} must be non-negative")

    @classmethod
    def mnist(cls, **overrides):
        cfg = cls(levels=1, steps_per_level=16, c_inter=128, in_channels=1,
                  image_size=32, base_trainable_mean=True, base_trainable_std=False,
                  learning_rate=1e-4, batch_size=50, total_steps=100_000,
                  grad_clip_value=1e5, grad_clip_norm=1e4,
                  beta_ln=0.0, beta_ae=0.0, beta_in=0.0)
        return replace(cfg, **overrides)

    @classmethod
    def sprites(cls, **overrides):
        cfg = cls(levels=3, steps_per_level=8, c_inter=128, in_channels=3,
                  image_size=64, base_trainable_mean=True, base_trainable_std=True,
                  learning_rate=1e-4, batch_size=20, total_steps=100_000,
                  grad_clip_value=1e5, grad_clip_norm=1e4,
                  beta_ln=100.0, beta_ae=1.0, beta_in=0.0,
                  latent_noise_magnitude=0.5)
        return replace(cfg, **overrides)

    @classmethod
    def div2k(cls, **overrides):
        # the table's 3 levels; the deeper 8-level variant from the running
        # text is reachable through overrides
        cfg = cls(levels=3, steps_per_level=4, c_inter=256, in_channels=3,
                  image_size=64, base_trainable_mean=True, base_trainable_std=True,
                  context_encoder="deep", learning_rate=1e-4, batch_size=15,
                  total_steps=200_000, grad_clip_value=1e5, grad_clip_norm=1e4,
                  beta_ln=100.0, beta_ae=1.0, beta_in=100.0,
                  latent_noise_magnitude=0.5, image_noise_magnitude=10.0)
        return replace(cfg, **overrides)

    def build_model(self) -> FlowModel:
        shape = (self.in_channels, self.image_size, self.image_size)
        return FlowModel(shape, levels=self.levels,
                         steps_per_level=self.steps_per_level,
                         c_inter=self.c_inter, n_blocks=self.n_blocks,
                         context_encoder=self.context_encoder,
                         encoder_width=self.encoder_width,
                         base_trainable_mean=self.base_trainable_mean,
                         base_trainable_std=self.base_trainable_std,
                         seed=self.seed)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

def dequantize(x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Integer pixels in [0,255] -> continuous values in [0,1).

    Adds U[0,1) noise per entry (skipped when rng is None) and divides by
    256.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValidationError(
            f"pixel values outside [0,255]: range [{x.min()}, {x.max()}]")
    if x.size and np.any(x != np.round(x)):
        raise ValidationError("dequantize expects integer-valued pixels")
    if rng is not None:
        x = x + rng.random(x.shape)
    return x / 256.0


def to_model_range(pixels: np.ndarray) -> np.ndarray:
    """0-255 pixels to [0,1) bin centers (the noise-free dequantization)."""
    return (np.asarray(pixels, dtype=np.float64) + 0.5) / 256.0


def to_pixels(x: np.ndarray) -> np.ndarray:
    """Model range [0,1) back to the 0-255 scale (float, no rounding)."""
    return np.clip(np.asarray(x) * 256.0 - 0.5, 0.0, 255.0)


def bits_per_dim(nll_nats: float, dims: int) -> float:
    """Mean negative log-likelihood in nats -> bits/dim on the pixel scale
    (includes the log2 256 offset of the [0,1) range map)."""
    return nll_nats / (dims * math.log(2.0)) + 8.0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _per_sample_l2(diff: Tensor) -> Tensor:
    return sqrt(sum_samples(diff * diff))


def _batch_mean(v: Tensor, n: int) -> Tensor:
    return scale(tensor_sum(v), 1.0 / n)


def _check_finite(log_prob: Tensor):
    bad = np.flatnonzero(~np.isfinite(log_prob.data))
    if bad.size:
        raise NumericalError(f"non-finite log-likelihood at batch index {bad[0]}")


def loss_nll(model: FlowModel, batch, *, enc=None, training=False, rng=None):
    """Mean negative log-likelihood of an already-dequantized batch, plus the
    bits/dim equivalent."""
    x = batch if isinstance(batch, Tensor) else constant(batch)
    n = x.shape[0]
    if enc is None:
        enc = model.encode(x, training=training, rng=rng)
    _check_finite(enc.log_prob)
    loss = scale(tensor_sum(enc.log_prob), -1.0 / n)
    dims = int(np.prod(model.in_shape))
    return loss, bits_per_dim(float(loss.data), dims)

def loss_latent_noise(model: FlowModel, x, magnitude: float, rng, *,
                      enc=None, training=False, drop_rng=None):
    """Decode noise-perturbed latents and penalize distance to the input."""
    x = x if isinstance(x, Tensor) else constant(x)
    n = x.shape[0]
    if enc is None:
        enc = model.encode(x, training=training, rng=drop_rng)
    noisy = []
    for u in enc.stack:
        xi = rng.uniform(-magnitude, magnitude, u.shape) if rng is not None else 0.0
        noisy.append(u + constant(xi) if rng is not None else u)
    dec = model.decode(noisy, training=training, rng=drop_rng)
    return _batch_mean(_per_sample_l2(dec.x - x), n)


def loss_autoencoder(model: FlowModel, x, *, enc=None, training=False, drop_rng=None):
    """Reconstruction through the deepest latent with conditional-mean fills.
    Identically zero for single-level models (no factor-out)."""
    x = x if isinstance(x, Tensor) else constant(x)
    if model.levels < 2:
        return constant(0.0)
    n = x.shape[0]
    if enc is None:
        enc = model.encode(x, training=training, rng=drop_rng)
    latents = [enc.stack[0]] + [None] * (model.levels - 1)
    dec = model.decode(latents, fill="mean", training=training, rng=drop_rng)
    return _batch_mean(_per_sample_l2(dec.x - x), n)


def loss_image_noise(model: FlowModel, x, magnitude_pixels: float, rng, *,
                     enc=None, training=False, drop_rng=None):
    """Distance between the latent stacks of the image and a noisy copy.
    The magnitude is given on the 0-255 pixel scale."""
    x = x if isinstance(x, Tensor) else constant(x)
    n = x.shape[0]
    if enc is None:
        enc = model.encode(x, training=training, rng=drop_rng)
    a = magnitude_pixels / 256.0
    eta = rng.uniform(-a, a, x.shape) if rng is not None else np.zeros(x.shape)
    enc2 = model.encode(x + constant(eta), training=training, rng=drop_rng)
    total = None
    for u1, u2 in zip(enc.stack, enc2.stack):
        d = u1 - u2
        s = sum_samples(d * d)
        total = s if total is None else total + s
    return _batch_mean(sqrt(total), n)


@dataclass
class LossBreakdown:
    total: Tensor
    nll: float
    bits_per_dim: float
    l_ln: float
    l_ae: float
    l_in: float


def total_loss(model: FlowModel, batch, cfg: TrainConfig, *, step: int = 0,
               training: bool = False) -> LossBreakdown:
    """Weighted training objective; a zero weight skips the term entirely."""
    x = batch if isinstance(batch, Tensor) else constant(batch)
    drop_rng = make_rng(cfg.seed, "dropout", step) if training else None
    enc = model.encode(x, training=training, rng=drop_rng)
    nll, bpd = loss_nll(model, x, enc=enc)
    total = nll
    l_ln = l_ae = l_in = 0.0
    if cfg.beta_ln > 0:
        ln = loss_latent_noise(model, x, cfg.latent_noise_magnitude,
                               make_rng(cfg.seed, "latent-noise", step),
                               enc=enc, training=training, drop_rng=drop_rng)
        l_ln = float(ln.data)
        total = total + scale(ln, cfg.beta_ln)
    if cfg.beta_ae > 0:
        ae = loss_autoencoder(model, x, enc=enc, training=training, drop_rng=drop_rng)
        l_ae = float(ae.data)
        total = total + scale(ae, cfg.beta_ae)
    if cfg.beta_in > 0:
        inn = loss_image_noise(model, x, cfg.image_noise_magnitude,
                               make_rng(cfg.seed, "image-noise", step),
                               enc=enc, training=training, drop_rng=drop_rng)
        l_in = float(inn.data)
        total = total + scale(inn, cfg.beta_in)
    return LossBreakdown(total, float(nll.data), bpd, l_ln, l_ae, l_in)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def clip_gradients(grads: dict, max_value: float, max_norm: float):
    """Clamp entries to [-max_value, max_value], then rescale everything if
    the global L2 norm still exceeds max_norm. Returns (clipped, norm) with
    the post-clamp global norm."""
    if max_value <= 0 or max_norm <= 0:
        raise ValidationError("clip thresholds must be positive")
    clipped = {k: np.clip(g, -max_value, max_value) for k, g in grads.items()}
    sq = sum(float((g * g).sum()) for g in clipped.values())
    norm = math.sqrt(sq)
    if norm > max_norm:
        s = max_norm / norm
        clipped = {k: g * s for k, g in clipped.items()}
    return clipped, norm


class Adam:
    """Standard Adam with bias correction; state mirrors parameter shapes."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"t": self.t, "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}

    def load_state(self, state):
        self.t = int(state["t"])
        self.m = [np.asarray(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.asarray(a, dtype=np.float64) for a in state["v"]]


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

METRICS_HEADER = "step,nll,bits_per_dim,l_ln,l_ae,l_in,total,grad_norm"


def batch_indices(seed: int, n: int, batch: int, step: int) -> np.ndarray:
    """Deterministic batch selection: epoch-wise shuffles keyed by the seed,
    wrapping across epoch boundaries."""
    out = np.empty(batch, dtype=np.int64)
    got = 0
    pos = step * batch
    while got < batch:
        epoch, off = divmod(pos, n)
        order = make_rng(seed, "shuffle", epoch).permutation(n)
        take = min(batch - got, n - off)
        out[got:got + take] = order[off:off + take]
        got += take
        pos += take
    return out


@dataclass
class TrainResult:
    model: FlowModel
    metrics: list = field(default_factory=list)
    steps_run: int = 0


def train(model: FlowModel, images: np.ndarray, cfg: TrainConfig, *,
          metrics_path=None, ckpt_path=None, start_step: int = 0,
          adam: Adam | None = None) -> TrainResult:
    """Run cfg.total_steps Adam updates with gradient clipping.

    `images` holds integer pixels (N,C,H,W) in [0,255]. Emits one metrics
    row per step and checkpoints periodically when `ckpt_path` is given;
    a non-finite loss aborts with the last checkpoint intact.
    """
    from .io.checkpoint import save_checkpoint  # local import, io depends on us

    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValidationError("training needs a non-empty dataset")
    params = [p for _, p in model.parameters()]
    if adam is None:
        adam = Adam(params, cfg.learning_rate)
    else:
        adam.params = params

    if any(not a.initialized for a in model.actnorms()):
        # same selection and noise stream as step start_step will use, so the
        # initialization is part of the deterministic trajectory
        idx = batch_indices(cfg.seed, n, cfg.batch_size, start_step)
        first = dequantize(images[idx], make_rng(cfg.seed, "dequant", start_step))
        model.encode(first)

    metrics = []
    mfile = open(metrics_path, "a") if metrics_path else None
    if mfile and start_step == 0:
        mfile.write(METRICS_HEADER + "\n")
    try:
        for step in range(start_step, cfg.total_steps):
            idx = batch_indices(cfg.seed, n, cfg.batch_size, step)
            batch = dequantize(images[idx], make_rng(cfg.seed, "dequant", step))
            parts = total_loss(model, batch, cfg, step=step, training=True)
            if not np.isfinite(parts.total.data):
                raise NumericalError(
                    f"non-finite training loss at step {step}; last checkpoint kept")
            grads = backprop(parts.total, release=True)
            clipped, gnorm = clip_gradients(grads, cfg.grad_clip_value,
                                            cfg.grad_clip_norm)
            adam.step(clipped)
            row = (step, parts.nll, parts.bits_per_dim, parts.l_ln, parts.l_ae,
                   parts.l_in, float(parts.total.data), gnorm)
            metrics.append(row)
            if mfile:
                mfile.write(",".join(f"{v:.6g}" if i else str(v)
                                     for i, v in enumerate(row)) + "\n")
            done = step + 1
            if ckpt_path and cfg.checkpoint_interval and (
                    done % cfg.checkpoint_interval == 0 or done == cfg.total_steps):
                save_checkpoint(ckpt_path, model, cfg, step=done, adam=adam)
    finally:
        if mfile:
            mfile.close()
    if ckpt_path and (cfg.total_steps == start_step or not cfg.checkpoint_interval):
        save_checkpoint(ckpt_path, model, cfg, step=cfg.total_steps, adam=adam)
    return TrainResult(model, metrics, cfg.total_steps - start_step)
