import numpy as np
import pytest
from scipy import stats

from flowprior.autodiff import Tensor, constant, grad_check, tensor_sum
from flowprior.distributions import DiagGaussian, gaussian_log_prob, make_rng


class TestLogProb:
    def test_standard_normal_at_zero(self):
        d = DiagGaussian((1,))
        lp = d.log_prob(constant(np.zeros((1, 1))))
        assert np.isclose(float(lp.data[0]), -0.918939, atol=1e-6)

    def test_two_unit_entries(self):
        d = DiagGaussian((2,))
        lp = d.log_prob(constant(np.ones((1, 2))))
        assert np.isclose(float(lp.data[0]), -2.837877, atol=1e-6)

    def test_matches_scipy_per_entry_product(self, rng):
        d = DiagGaussian((3, 2, 2), trainable_std=True)
        d.mean.data[...] = rng.standard_normal(d.mean.shape)
        d.log_std.data[...] = 0.5 * rng.standard_normal(d.log_std.shape)
        x = rng.standard_normal((4, 3, 2, 2))
        lp = d.log_prob(constant(x)).data
        ref = stats.norm.logpdf(x, loc=d.mean.data,
                                scale=np.exp(d.log_std.data)).reshape(4, -1).sum(1)
        np.testing.assert_allclose(lp, ref, rtol=1e-12)

    def test_shape_mismatch(self, rng):
        d = DiagGaussian((2, 2))
        with pytest.raises(ValueError):
            d.log_prob(constant(rng.standard_normal((1, 3, 2))))

    def test_maximized_at_mean(self, rng):
        d = DiagGaussian((4,), trainable_std=True)
        d.mean.data[...] = rng.standard_normal((1, 4))
        at_mean = float(d.log_prob(constant(d.mean.data)).data[0])
        for _ in range(20):
            probe = d.mean.data + rng.standard_normal((1, 4))
            assert float(d.log_prob(constant(probe)).data[0]) <= at_mean


class TestSampling:
    def test_tiny_sigma_collapses_to_mean(self, rng):
        d = DiagGaussian((5,), trainable_std=True)
        d.mean.data[...] = rng.standard_normal((1, 5))
        d.log_std.data[...] = np.log(1e-10)
        s = d.sample(make_rng(0, "s"), 1)
        np.testing.assert_allclose(s.data, d.mean.data, atol=1e-8)

    def test_fixed_seed_reproducible(self):
        d = DiagGaussian((3, 2, 2))
        a = d.sample(make_rng(3, "x"), 2).data
        b = d.sample(make_rng(3, "x"), 2).data
        np.testing.assert_array_equal(a, b)

    def test_standard_normal_statistics(self):
        d = DiagGaussian((1,))
        s = d.sample(make_rng(11, "stats"), 100_000).data
        assert abs(s.mean()) < 0.02
        assert 0.98 < s.var() < 1.02

    def test_reparameterized_gradients(self, rng):
        eps = make_rng(5, "eps").standard_normal((2, 3))

        def logp_of_sample_wrt_mean(mu):
            d = DiagGaussian((3,))
            sample = mu + constant(eps[0:1])
            return tensor_sum(gaussian_log_prob(sample, mu, constant(np.zeros((1, 3)))))
        err = grad_check(logp_of_sample_wrt_mean, Tensor(rng.standard_normal((1, 3))))
        assert err < 1e-5

        def logp_of_sample_wrt_logstd(ls):
            from flowprior.autodiff import exp, mul
            mu = constant(np.zeros((1, 3)))
            sample = mu + mul(exp(ls), constant(eps[0:1]))
            return tensor_sum(gaussian_log_prob(sample, mu, ls))
        err = grad_check(logp_of_sample_wrt_logstd,
                         Tensor(0.3 * rng.standard_normal((1, 3))))
        assert err < 1e-5

    def test_mean_of(self, rng):
        d = DiagGaussian((2, 2))
        d.mean.data[...] = rng.standard_normal((1, 2, 2))
        np.testing.assert_array_equal(d.mean_of().data, d.mean.data)


class TestRng:
    def test_streams_are_independent(self):
        a = make_rng(0, "one").random(4)
        b = make_rng(0, "two").random(4)
        assert not np.array_equal(a, b)

    def test_step_keyed_streams(self):
        a = make_rng(0, "dequant", 3).random(4)
        b = make_rng(0, "dequant", 3).random(4)
        c = make_rng(0, "dequant", 4).random(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
