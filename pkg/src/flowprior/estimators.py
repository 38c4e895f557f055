"""Scikit-learn style wrappers around the flow prior and the restorer.

`FlowPrior` is a density model over image batches laid out (N, C, H, W)
with integer pixels in [0, 255]: `fit` trains the flow, `transform` /
`inverse_transform` move between images and flattened latent vectors,
`score_samples` returns exact per-image log-densities, and `sample`
generates. `FlowRestorer` wraps a fitted prior and repairs degraded
images via latent-space MAP descent. Fitted state does not pickle (the
tape holds closures); persist through the checkpoint format instead.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .restoration import RestorationProblem, Schedule, coarse_to_fine_optimize
from .tiler import plan, restore_tiled
from .training import TrainConfig, to_model_range, to_pixels, train
from .distributions import make_rng


def check_images(X, *, channels=None, size=None, name="X") -> np.ndarray:
    """Validate an image batch: 4-d (N,C,H,W), finite, pixels in [0,255]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name}: expected (N,C,H,W) images, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains non-finite values")
    if X.size and (X.min() < 0 or X.max() > 255):
        raise ValueError(f"{name}: pixel values must lie in [0,255]")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"{name}: expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2:] != (size, size):
        raise ValueError(f"{name}: expected {size}x{size} images, got {X.shape[2:]}")
    return X


def check_mask(mask, like: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[None]
    if mask.shape != like.shape:
        raise ValueError(f"mask shape {mask.shape} does not match images {like.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return mask


class FlowPrior(BaseEstimator):
    """Exact-likelihood image prior trained by maximum likelihood.

    Parameters mirror the training configuration; the input geometry
    (channels, image size) is inferred from the data at fit time.
    """

    def __init__(self, levels=1, steps_per_level=2, c_inter=32, n_blocks=2,
                 context_encoder="conv", encoder_width=64,
                 base_trainable_mean=True, base_trainable_std=False,
                 learning_rate=1e-4, batch_size=50, total_steps=1000,
                 grad_clip_value=1e5, grad_clip_norm=1e4,
                 beta_ln=0.0, beta_ae=0.0, beta_in=0.0,
                 latent_noise_magnitude=0.5, image_noise_magnitude=10.0,
                 seed=0):
        self.levels = levels
        self.steps_per_level = steps_per_level
        self.c_inter = c_inter
        self.n_blocks = n_blocks
        self.context_encoder = context_encoder
        self.encoder_width = encoder_width
        self.base_trainable_mean = base_trainable_mean
        self.base_trainable_std = base_trainable_std
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.grad_clip_value = grad_clip_value
        self.grad_clip_norm = grad_clip_norm
        self.beta_ln = beta_ln
        self.beta_ae = beta_ae
        self.beta_in = beta_in
        self.latent_noise_magnitude = latent_noise_magnitude
        self.image_noise_magnitude = image_noise_magnitude
        self.seed = seed

    # -- fitting --------------------------------------------------------------

    def _make_config(self, X) -> TrainConfig:
        n, c, h, w = X.shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        return TrainConfig(
            levels=self.levels, steps_per_level=self.steps_per_level,
            c_inter=self.c_inter, n_blocks=self.n_blocks, in_channels=c,
            image_size=h, context_encoder=self.context_encoder,
            encoder_width=self.encoder_width,
            base_trainable_mean=self.base_trainable_mean,
            base_trainable_std=self.base_trainable_std,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            total_steps=self.total_steps,
            grad_clip_value=self.grad_clip_value,
            grad_clip_norm=self.grad_clip_norm,
            beta_ln=self.beta_ln, beta_ae=self.beta_ae, beta_in=self.beta_in,
            latent_noise_magnitude=self.latent_noise_magnitude,
            image_noise_magnitude=self.image_noise_magnitude,
            seed=self.seed)

    def fit(self, X, y=None, *, metrics_path=None, ckpt_path=None):
        X = check_images(X)
        if np.any(X != np.round(X)):
            raise ValueError("fit expects integer pixel values in [0,255]")
        self.config_ = self._make_config(X)
        model = self.config_.build_model()
        result = train(model, X, self.config_, metrics_path=metrics_path,
                       ckpt_path=ckpt_path)
        self.model_ = result.model
        self.metrics_ = result.metrics
        return self

    @classmethod
    def from_model(cls, model, cfg: TrainConfig) -> "FlowPrior":
        """Wrap an already-trained model (e.g. loaded from a checkpoint)."""
        est = cls()
        est.model_ = model
        est.config_ = cfg
        est.metrics_ = []
        return est

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this FlowPrior instance is not fitted yet")
        return self.model_

    # -- latent mapping --------------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Images -> flattened latent vectors (N, D), D = C*H*W."""
        model = self._require_fitted()
        X = check_images(X, channels=model.in_shape[0], size=model.in_shape[1])
        enc = model.encode(to_model_range(X))
        return np.concatenate([u.data.reshape(X.shape[0], -1) for u in enc.stack],
                              axis=1)

    def inverse_transform(self, Z) -> np.ndarray:
        """Flattened latent vectors back to images on the 0-255 scale."""
        model = self._require_fitted()
        Z = np.asarray(Z, dtype=np.float64)
        sizes = [int(np.prod(s)) for s in model.latent_shapes]
        if Z.ndim != 2 or Z.shape[1] != sum(sizes):
            raise ValueError(f"expected (N,{sum(sizes)}) latent matrix, got {Z.shape}")
        parts, off = [], 0
        for shape, size in zip(model.latent_shapes, sizes):
            parts.append(Z[:, off:off + size].reshape((Z.shape[0],) + shape))
            off += size
        return to_pixels(model.decode(parts).x.data)

    def score_samples(self, X) -> np.ndarray:
        """Exact per-image log-density (nats) on the discrete pixel scale."""
        model = self._require_fitted()
        X = check_images(X, channels=model.in_shape[0], size=model.in_shape[1])
        enc = model.encode(to_model_range(X))
        dims = int(np.prod(model.in_shape))
        return enc.log_prob.data - dims * math.log(256.0)

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))

    def bits_per_dim(self, X) -> np.ndarray:
        dims = int(np.prod(self._require_fitted().in_shape))
        return -self.score_samples(X) / (dims * math.log(2.0))

    def sample(self, n_samples=1, seed=0) -> np.ndarray:
        model = self._require_fitted()
        return to_pixels(model.sample(make_rng(seed, "sample"), n_samples))


class FlowRestorer(BaseEstimator):
    """Blind restoration with a fitted FlowPrior as the MAP regularizer.

    `predict(X, mask=None)` restores degraded images (0-255 pixels) and
    returns images on the same scale. Images larger than the prior's
    input are restored patch-wise with overlapping margins.
    """

    def __init__(self, prior=None, lam=99.0, schedule=None, eta=1.0,
                 init="encode", margin=4, seed=0):
        self.prior = prior
        self.lam = lam
        self.schedule = schedule
        self.eta = eta
        self.init = init
        self.margin = margin
        self.seed = seed

    def _model(self):
        if self.prior is None:
            raise NotFittedError("FlowRestorer needs a fitted FlowPrior")
        return self.prior._require_fitted()

    def _schedule(self, model) -> Schedule:
        if self.schedule is None:
            sched = Schedule.sprites_default(model.levels)
            sched.eta = self.eta
            return sched
        if isinstance(self.schedule, Schedule):
            return self.schedule
        return Schedule.parse(self.schedule, eta=self.eta)

    def fit(self, X=None, y=None):
        self._model()
        return self

    def predict(self, X, mask=None) -> np.ndarray:
        model = self._model()
        X = check_images(X)
        mask = np.ones_like(X) if mask is None else check_mask(mask, X)
        sched = self._schedule(model)
        c, ph, pw = model.in_shape
        if X.shape[1] != c:
            raise ValueError(f"expected {c}-channel images, got {X.shape[1]}")
        out = np.empty_like(X)
        if X.shape[2:] == (ph, pw):
            problem = RestorationProblem(to_model_range(X), mask, self.lam)
            res = coarse_to_fine_optimize(model, problem, sched,
                                          seed=self.seed, init=self.init)
            out[:] = to_pixels(res.image)
        else:
            for i in range(X.shape[0]):
                grid = plan(X.shape[2], X.shape[3], patch=ph, margin=self.margin)
                problem = RestorationProblem(to_model_range(X[i:i + 1]),
                                             mask[i:i + 1], self.lam)
                res = restore_tiled(model, problem, sched, grid,
                                    seed=self.seed, init=self.init)
                out[i] = to_pixels(res.image[0])
        return out

    def transform(self, X) -> np.ndarray:
        return self.predict(X)
