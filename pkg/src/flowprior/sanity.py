"""Quick self-checks behind the `sanity` CLI subcommand.

Each check prints one ok/FAIL line; the run exits nonzero when anything
fails. The full verification lives in the test suite; this is the fast
field diagnostic.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .autodiff import Tensor, backprop, grad_check, l2_norm, squeeze2x, unsqueeze2x
from .distributions import make_rng
from .io.checkpoint import load_checkpoint, save_checkpoint
from .layers import ActNorm, AffineCoupling, InvConv1x1
from .model import FlowModel
from .training import TrainConfig


def _checks():
    rng = make_rng(7, "sanity")

    def squeeze_roundtrip():
        x = rng.standard_normal((2, 3, 8, 8))
        back = unsqueeze2x(squeeze2x(Tensor(x))).data
        return np.array_equal(back, x), "bit-exact"

    def layer_roundtrips():
        x = rng.standard_normal((2, 4, 6, 6))
        worst = 0.0
        an = ActNorm(4)
        y, _ = an.apply(Tensor(x))
        back, _ = an.apply(y, inverse=True)
        worst = max(worst, float(np.abs(back.data - x).max()))
        for layer in (InvConv1x1(4, rng), AffineCoupling(4, 8, rng=rng)):
            y, _ = layer.apply(Tensor(x))
            back, _ = layer.apply(y, inverse=True)
            worst = max(worst, float(np.abs(back.data - x).max()))
        return worst < 1e-9, f"max err {worst:.2e}"

    def model_bijectivity():
        worst = 0.0
        for levels, steps in ((1, 2), (2, 2)):
            m = FlowModel((1, 8, 8), levels=levels, steps_per_level=steps,
                          c_inter=8, data_init_actnorm=False, seed=3)
            x = rng.standard_normal((2, 1, 8, 8))
            enc = m.encode(x)
            back = m.decode(list(enc.stack)).x.data
            worst = max(worst, float(np.abs(back - x).max()))
        return worst < 1e-8, f"max err {worst:.2e}"

    def coupling_logdet():
        layer = AffineCoupling(2, 4, rng=rng)
        x = rng.standard_normal((1, 2, 4, 4))
        _, ld = layer.apply(Tensor(x))
        dim = x.size
        jac = np.empty((dim, dim))
        h = 1e-6
        flat = x.reshape(-1)
        for i in range(dim):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += h
            lo[i] -= h
            fhi, _ = layer.apply(Tensor(hi.reshape(x.shape)))
            flo, _ = layer.apply(Tensor(lo.reshape(x.shape)))
            jac[:, i] = (fhi.data - flo.data).reshape(-1) / (2 * h)
        _, ref = np.linalg.slogdet(jac)
        err = abs(float(ld.data[0]) - ref) / max(1.0, abs(ref))
        return err < 1e-6, f"rel err {err:.2e}"

    def actnorm_init():
        x = rng.standard_normal((8, 3, 4, 4)) * 3.0 + 1.0
        an = ActNorm(3)
        y, _ = an.apply(Tensor(x))
        mean = np.abs(y.data.mean(axis=(0, 2, 3))).max()
        var = np.abs(y.data.var(axis=(0, 2, 3)) - 1).max()
        return mean < 1e-6 and var < 1e-6, f"mean {mean:.1e} var dev {var:.1e}"

    def gradient_check():
        x = rng.standard_normal((1, 2, 4, 4))
        layer = AffineCoupling(2, 4, rng=rng)
        err = grad_check(lambda t: l2_norm(layer.apply(t)[0]), Tensor(x))
        return err < 1e-5, f"rel err {err:.2e}"

    def checkpoint_roundtrip():
        cfg = TrainConfig(levels=1, steps_per_level=1, c_inter=4,
                          in_channels=1, image_size=4, total_steps=1)
        model = cfg.build_model()
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "m.ckpt")
            save_checkpoint(path, model, cfg)
            loaded, _, _, _ = load_checkpoint(path)
        ok = all(np.array_equal(a.data, b.data)
                 for (_, a), (_, b) in zip(model.parameters(), loaded.parameters()))
        return ok, "bit-exact"

    return [
        ("squeeze round-trip", squeeze_roundtrip),
        ("layer round-trips", layer_roundtrips),
        ("model bijectivity", model_bijectivity),
        ("coupling log-det vs dense Jacobian", coupling_logdet),
        ("actnorm data-dependent init", actnorm_init),
        ("backprop vs finite differences", gradient_check),
        ("checkpoint round-trip", checkpoint_roundtrip),
    ]


def run_sanity() -> int:
    failures = 0
    for name, fn in _checks():
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report, keep checking
            ok, detail = False, repr(exc)
        print(f"{'ok  ' if ok else 'FAIL'} - {name} ({detail})")
        failures += 0 if ok else 1
    return 1 if failures else 0
