"""Shared helpers: independent numeric oracles and small model builders."""

import numpy as np

from flowprior.model import FlowModel


def dense_jacobian(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Jacobian of a flattened map assembled column-by-column from central
    forward perturbations; independent of the tape."""
    y0 = np.asarray(f(x))
    dim_in = x.size
    dim_out = y0.size
    jac = np.empty((dim_out, dim_in))
    flat = x.reshape(-1)
    for i in range(dim_in):
        hi = flat.copy()
        hi[i] += step
        lo = flat.copy()
        lo[i] -= step
        jac[:, i] = (np.asarray(f(hi.reshape(x.shape))).reshape(-1)
                     - np.asarray(f(lo.reshape(x.shape))).reshape(-1)) / (2 * step)
    return jac


def logdet_oracle(f, x: np.ndarray, step: float = 1e-6) -> float:
    _, logdet = np.linalg.slogdet(dense_jacobian(f, x, step))
    return float(logdet)


def identity_model(in_shape, levels=1, steps_per_level=1, c_inter=4) -> FlowModel:
    """A model whose flow is exactly the squeeze permutation cascade:
    identity actnorm (pre-marked initialized), identity 1x1 convolutions,
    zero-initialized couplings and context encoders, N(0,1) base."""
    m = FlowModel(in_shape, levels=levels, steps_per_level=steps_per_level,
                  c_inter=c_inter, base_trainable_mean=True, seed=0,
                  data_init_actnorm=False)
    for steps in m.level_steps:
        for s in steps:
            s.invconv.weight.data[...] = np.eye(s.invconv.num_channels)
    return m


def random_model(in_shape, levels, steps_per_level, c_inter=6, seed=0,
                 perturb=0.1) -> FlowModel:
    """Random rotations plus small random coupling/context outputs, so the
    flow is non-trivial but still well-conditioned. The zero-initialized
    output convolutions get noise scaled by their fan-in, which keeps the
    exponential coupling scales bounded through many steps."""
    m = FlowModel(in_shape, levels=levels, steps_per_level=steps_per_level,
                  c_inter=c_inter, base_trainable_std=True, seed=seed,
                  data_init_actnorm=False)
    rng = np.random.default_rng(seed + 7)

    def nudge(t, scale):
        t.data += scale * rng.standard_normal(t.data.shape)

    for steps in m.level_steps:
        for s in steps:
            nudge(s.actnorm.log_scale, 0.3 * perturb)
            nudge(s.actnorm.bias, perturb)
            nudge(s.coupling.w_out, perturb / np.sqrt(s.coupling.c_inter * 9))
            nudge(s.coupling.b_out, perturb)
    for split in m.splits:
        w, b = split.encoder.convs[-1]
        nudge(w, perturb / np.sqrt(max(w.data.shape[1] * 9, 1)))
        nudge(b, perturb)
    nudge(m.base.mean, perturb)
    nudge(m.base.log_std, 0.3 * perturb)
    return m
