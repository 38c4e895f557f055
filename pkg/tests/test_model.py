import numpy as np
import pytest

from flowprior.autodiff import ContractError, ShapeError, backprop, constant, tensor_sum
from flowprior.distributions import make_rng
from flowprior.model import FlowModel
from util import identity_model, random_model

LOG_2PI = np.log(2.0 * np.pi)


class TestEncode:
    def test_identity_model_reduces_to_gaussian(self, rng):
        m = identity_model((1, 4, 4))
        x = rng.standard_normal((3, 1, 4, 4))
        enc = m.encode(x)
        expect = (-0.5 * x.reshape(3, -1) ** 2 - 0.5 * LOG_2PI).sum(axis=1)
        np.testing.assert_allclose(enc.log_prob.data, expect, atol=1e-9)

    def test_identity_at_init_is_rotations_only(self, rng):
        # fresh model pre actnorm-init: zero couplings and encoders leave
        # only squeezes and the orthonormal channel rotations
        m = FlowModel((1, 8, 8), levels=2, steps_per_level=2, c_inter=4,
                      data_init_actnorm=False, seed=5)
        x = rng.standard_normal((2, 1, 8, 8))
        enc = m.encode(x)
        assert np.allclose(enc.logdet.data, 0.0, atol=1e-9)
        np.testing.assert_allclose(enc.log_prob.data, enc.log_prior.data, atol=1e-9)
        # rotations preserve the norm, so the Gaussian score depends on |x| only
        expect = (-0.5 * x.reshape(2, -1) ** 2 - 0.5 * LOG_2PI).sum(axis=1)
        np.testing.assert_allclose(enc.log_prob.data, expect, atol=1e-9)

    def test_latent_shapes(self):
        m = FlowModel((3, 32, 32), levels=3, steps_per_level=1, c_inter=4)
        assert m.latent_shapes == [(48, 4, 4), (12, 8, 8), (6, 16, 16)]
        total = sum(np.prod(s) for s in m.latent_shapes)
        assert total == 3 * 32 * 32

    def test_indivisible_extent_directs_to_pad(self):
        with pytest.raises(ShapeError) as exc:
            FlowModel((1, 12, 12), levels=3, steps_per_level=1, c_inter=4)
        assert "pad" in str(exc.value)

    def test_wrong_input_shape(self, rng):
        m = FlowModel((1, 8, 8), levels=1, steps_per_level=1, c_inter=4)
        with pytest.raises(ShapeError):
            m.encode(rng.standard_normal((1, 1, 8, 10)))


class TestBijectivity:
    @pytest.mark.parametrize("levels,steps", [(1, 1), (1, 4), (2, 2), (3, 2)])
    def test_roundtrip(self, levels, steps, rng):
        m = random_model((1, 8, 8), levels, steps, c_inter=6, seed=levels * 10 + steps)
        x = rng.standard_normal((2, 1, 8, 8))
        enc = m.encode(x)
        back = m.decode(list(enc.stack)).x.data
        assert np.abs(back - x).max() < 1e-8

    def test_decode_log_prob_equals_encode(self, rng):
        m = random_model((3, 8, 8), 2, 2, c_inter=6, seed=4)
        x = rng.standard_normal((2, 3, 8, 8))
        enc = m.encode(x)
        dec = m.decode(enc.stack.values())
        np.testing.assert_allclose(dec.log_prob.data, enc.log_prob.data, atol=1e-8)

    def test_decode_validates_shapes(self, rng):
        m = FlowModel((1, 8, 8), levels=2, steps_per_level=1, c_inter=4)
        with pytest.raises(ShapeError):
            m.decode([rng.standard_normal((1, 2, 2, 2))] * 2)
        with pytest.raises(ShapeError):
            m.decode([None])

    def test_missing_latent_without_fill(self):
        m = FlowModel((1, 8, 8), levels=2, steps_per_level=1, c_inter=4,
                      data_init_actnorm=False)
        with pytest.raises(ContractError):
            m.decode([np.zeros((1, 8, 2, 2)), None])


class TestMeanDecode:
    def test_zero_init_zero_latent_decodes_to_zero(self):
        m = identity_model((1, 8, 8), levels=2)
        out = m.mean_decode(np.zeros((1, 8, 2, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 8, 8)))

    def test_equals_decode_with_explicit_means(self, rng):
        m = random_model((1, 8, 8), 2, 1, c_inter=4, seed=8, perturb=0.05)
        u0 = rng.standard_normal((2, 8, 2, 2))
        via_mean = m.mean_decode(u0).data
        dec = m.decode([u0, None], fill="mean")
        explicit = m.decode([u0, dec.stack[1].data]).x.data
        np.testing.assert_allclose(via_mean, explicit, atol=1e-12)


class TestLogDetComposition:
    def test_model_logdet_matches_dense_jacobian(self, rng):
        from util import dense_jacobian
        m = random_model((1, 4, 4), 1, 2, c_inter=4, seed=3, perturb=0.05)
        x = rng.standard_normal((1, 1, 4, 4))
        enc = m.encode(x)

        def flat_encode(v):
            st = m.encode(v.reshape(1, 1, 4, 4)).stack
            return np.concatenate([u.data.reshape(-1) for u in st])
        _, ref = np.linalg.slogdet(dense_jacobian(flat_encode, x))
        got = float(enc.logdet.data if enc.logdet.ndim == 0 else enc.logdet.data[0])
        assert abs(got - ref) / max(1.0, abs(ref)) < 1e-6


class TestNormalization:
    def test_density_integrates_to_one(self):
        # importance-sampled check that exp(log_prob) is a normalized density
        m = FlowModel((1, 4, 4), levels=1, steps_per_level=2, c_inter=4,
                      data_init_actnorm=False, seed=3)
        prng = np.random.default_rng(42)
        for steps in m.level_steps:
            for s in steps:
                s.coupling.w_out.data[...] = 0.05 * prng.standard_normal(s.coupling.w_out.shape)
                s.coupling.b_out.data[...] = 0.05 * prng.standard_normal(s.coupling.b_out.shape)
        rng = make_rng(99, "is")
        samp = m.sample(rng, 4000).reshape(4000, -1)
        mu, sd = samp.mean(0), samp.std(0) * 1.4
        total, n_tot = 0.0, 0
        for _ in range(10):
            z = rng.standard_normal((20000, 16))
            x = mu + sd * z
            logq = (-0.5 * z ** 2 - np.log(sd) - 0.5 * LOG_2PI).sum(1)
            logp = m.encode(x.reshape(-1, 1, 4, 4)).log_prob.data
            total += np.exp(logp - logq).sum()
            n_tot += len(z)
        assert abs(total / n_tot - 1.0) < 0.02


class TestSampling:
    def test_sample_shapes_and_determinism(self):
        m = random_model((1, 8, 8), 2, 1, c_inter=4, seed=2, perturb=0.05)
        a = m.sample(make_rng(7, "s"), 3)
        b = m.sample(make_rng(7, "s"), 3)
        assert a.shape == (3, 1, 8, 8)
        np.testing.assert_array_equal(a, b)


class TestParameters:
    def test_names_unique_and_freeze(self):
        m = FlowModel((1, 8, 8), levels=2, steps_per_level=2, c_inter=4,
                      base_trainable_std=True)
        names = [n for n, _ in m.parameters()]
        assert len(names) == len(set(names))
        m.freeze()
        assert not any(p.requires_grad for _, p in m.parameters())
        m.unfreeze()
        assert all(p.requires_grad for _, p in m.parameters())

    def test_gradients_reach_every_parameter(self, rng):
        m = random_model((1, 8, 8), 2, 1, c_inter=4, seed=6, perturb=0.05)
        x = rng.standard_normal((2, 1, 8, 8))
        grads = backprop(tensor_sum(m.encode(x).log_prob))
        missing = [n for n, p in m.parameters() if p not in grads]
        assert missing == []
