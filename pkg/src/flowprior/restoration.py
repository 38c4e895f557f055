"""MAP restoration in latent space with a coarse-to-fine schedule.

The objective for latents u is  lambda * ||m (x_hat - T(u))||_2  -  log p(T(u)),
evaluated per image. Optimization proceeds stage by stage: stage j updates
latent levels 0..j with Adam while finer levels are re-filled with their
predicted conditional means every step (the fills depend on the active
latents, so they are recomputed rather than carried). After the last
stage, `final_steps` further updates run with the whole stack active.
Batches of independent images restore jointly in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, backprop, constant, l2_norm, scale, sqrt, sum_samples, tensor_sum
from .model import FlowModel, LatentStack
from .training import Adam, NumericalError


@dataclass
class RestorationProblem:
    """Degraded observation in model range [0,1), a binary validity mask
    (1 = trusted pixel) and the data weight lambda."""

    degraded: np.ndarray
    mask: np.ndarray | None = None
    lam: float = 99.0

    def __post_init__(self):
        self.degraded = np.asarray(self.degraded, dtype=np.float64)
        if self.degraded.ndim == 3:
            self.degraded = self.degraded[None]
        if self.mask is None:
            self.mask = np.ones_like(self.degraded)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim == 3:
            self.mask = self.mask[None]
        if self.mask.shape != self.degraded.shape:
            raise ShapeError(f"mask shape {self.mask.shape} does not match "
                             f"degraded shape {self.degraded.shape}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        if self.lam < 0:
            raise ValueError("data weight lambda must be non-negative")


@dataclass
class Schedule:
    """Per-stage iteration counts (deepest level first), extra full-stack
    iterations, and the optimizer rate."""

    steps_per_stage: list
    final_steps: int = 150
    eta: float = 1.0

    def __post_init__(self):
        self.steps_per_stage = [int(s) for s in self.steps_per_stage]
        if any(s < 0 for s in self.steps_per_stage) or self.final_steps < 0:
            raise ValueError("schedule step counts must be non-negative")

    @classmethod
    def sprites_default(cls, levels: int):
        return cls([50] * levels, final_steps=150, eta=1.0)

    @classmethod
    def parse(cls, text: str, eta: float = 1.0):
        """Grammar: 'a,b,c+f' = per-stage steps plus final steps."""
        text = text.strip()
        if "+" in text:
            stages, _, fin = text.partition("+")
            final = int(fin)
        else:
            stages, final = text, 0
        return cls([int(s) for s in stages.split(",")], final_steps=final, eta=eta)

    def format(self) -> str:
        return ",".join(str(s) for s in self.steps_per_stage) + f"+{self.final_steps}"


def data_term(degraded, mask, lam: float, x) -> Tensor:
    """lambda * L2 norm of the masked residual (norm over everything)."""
    x = x if isinstance(x, Tensor) else constant(x)
    degraded = np.asarray(degraded, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if degraded.shape != tuple(x.shape) or mask.shape != degraded.shape:
        raise ShapeError(f"data term shapes differ: degraded {degraded.shape}, "
                         f"mask {mask.shape}, image {tuple(x.shape)}")
    resid = (constant(degraded) - x) * constant(mask)
    return scale(l2_norm(resid), lam)


def _per_sample_objective(model: FlowModel, problem: RestorationProblem, dec):
    resid = (constant(problem.degraded) - dec.x) * constant(problem.mask)
    data = scale(sqrt(sum_samples(resid * resid)), problem.lam)
    return data, scale(dec.log_prob, -1.0)


def map_objective(model: FlowModel, problem: RestorationProblem, latents) -> Tensor:
    """Scalar MAP objective (summed over the batch), differentiable with
    respect to the latent tensors."""
    stack = latents.latents if isinstance(latents, LatentStack) else list(latents)
    dec = model.decode(stack)
    data, neg_prior = _per_sample_objective(model, problem, dec)
    total = tensor_sum(data + neg_prior)
    if not np.isfinite(total.data):
        raise NumericalError("MAP objective is not finite")
    return total


def init_latents(model: FlowModel, degraded: np.ndarray) -> list:
    """Starting point: the deepest latent from a full encode of the degraded
    image, the finer levels replaced by their conditional means along the
    mean-decode path. Returns plain arrays."""
    degraded = np.asarray(degraded, dtype=np.float64)
    if degraded.ndim == 3:
        degraded = degraded[None]
    enc = model.encode(degraded)
    u0 = enc.stack[0].data.copy()
    if model.levels == 1:
        return [u0]
    dec = model.decode([u0] + [None] * (model.levels - 1), fill="detached_mean")
    return dec.stack.values()


def _base_mean_init(model: FlowModel, n: int) -> list:
    u0 = np.broadcast_to(model.base.mean_of().data, (n,) + model.base.shape).copy()
    if model.levels == 1:
        return [u0]
    dec = model.decode([u0] + [None] * (model.levels - 1), fill="detached_mean")
    return dec.stack.values()


@dataclass
class RestoreResult:
    image: np.ndarray                 # (N,C,H,W), clamped to the model range
    trace: list = field(default_factory=list)   # (step, stage, objective, data, neg_log_prior)
    objective_curve: np.ndarray | None = None   # (steps, N)
    grad_gate: list = field(default_factory=list)  # (step, stage, per-level grad norms)
    best_objective: np.ndarray | None = None
    aborted: bool = False


def coarse_to_fine_optimize(model: FlowModel, problem: RestorationProblem,
                            schedule: Schedule, seed: int = 0,
                            init: str = "encode") -> RestoreResult:
    """Stage-wise MAP optimization; returns the best-objective decode seen.

    `init` selects the starting point: 'encode' (deepest latent of the
    degraded image) or 'base_mean' (mean of the base distribution, the
    single-level mode used for simple data).
    """
    levels = model.levels
    if len(schedule.steps_per_stage) != levels:
        raise ad.ContractError(
            f"schedule has {len(schedule.steps_per_stage)} stages, model has {levels} levels")
    n = problem.degraded.shape[0]
    if tuple(problem.degraded.shape[1:]) != model.in_shape:
        raise ShapeError(f"degraded shape {problem.degraded.shape} does not match "
                         f"model input {model.in_shape}")

    if init == "base_mean":
        latents = _base_mean_init(model, n)
    elif init == "encode":
        latents = init_latents(model, problem.degraded)
    else:
        raise ValueError(f"unknown init mode {init!r}")

    best_obj = np.full(n, np.inf)
    best_x = np.clip(model.decode(latents).x.data, 0.0, 1.0)
    trace: list = []
    gate: list = []
    curve: list = []
    step_no = 0
    aborted = False

    phases = [(j, schedule.steps_per_stage[j]) for j in range(levels)]
    phases.append((levels - 1, schedule.final_steps))

    for phase, (active_top, steps) in enumerate(phases):
        if steps == 0:
            continue
        stage_label = levels if phase == levels else active_top
        leaves = [Tensor(latents[i].copy(), requires_grad=True)
                  for i in range(active_top + 1)]
        adam = Adam(leaves, schedule.eta)
        for _ in range(steps):
            dec_in: list = list(leaves) + [None] * (levels - 1 - active_top)
            dec = model.decode(dec_in, fill="detached_mean")
            data, neg_prior = _per_sample_objective(model, problem, dec)
            obj = data + neg_prior
            obj_vals = np.asarray(obj.data, dtype=np.float64)
            finite = np.isfinite(obj_vals)
            improved = finite & (obj_vals < best_obj)
            if improved.any():
                best_obj[improved] = obj_vals[improved]
                best_x[improved] = np.clip(dec.x.data[improved], 0.0, 1.0)
            trace.append((step_no, stage_label, float(obj_vals.mean()),
                          float(np.mean(data.data)), float(np.mean(neg_prior.data))))
            curve.append(obj_vals.copy())
            if not finite.all():
                aborted = True
                break
            grads = backprop(tensor_sum(obj), release=True)
            norms = [math.sqrt(float((grads[l] ** 2).sum())) if l in grads else 0.0
                     for l in leaves]
            norms += [0.0] * (levels - len(norms))
            gate.append((step_no, stage_label, norms))
            adam.step(grads)
            for i, leaf in enumerate(leaves):
                latents[i] = leaf.data
            for i, u in enumerate(dec.stack.values()):
                if i > active_top:
                    latents[i] = u
            step_no += 1
        if aborted:
            break

    if not aborted:
        dec = model.decode(latents)
        data, neg_prior = _per_sample_objective(model, problem, dec)
        obj_vals = np.asarray((data + neg_prior).data, dtype=np.float64)
        improved = np.isfinite(obj_vals) & (obj_vals < best_obj)
        if improved.any():
            best_obj[improved] = obj_vals[improved]
            best_x[improved] = np.clip(dec.x.data[improved], 0.0, 1.0)

    return RestoreResult(best_x, trace, np.array(curve) if curve else None,
                         gate, best_obj, aborted)
