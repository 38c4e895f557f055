import numpy as np
import pytest

from flowprior import _convkernels as ck
from flowprior import autodiff as ad
from flowprior.autodiff import (ContractError, DomainError, ShapeError, Tensor,
                                backprop, channels, concat_channels, constant,
                                conv2d, exp, grad_check, l2_norm, log,
                                log_abs_det, mat_inverse, mul, parameter, relu,
                                reshape, scale, sqrt, squeeze2x, sub,
                                sum_samples, tensor_mean, tensor_sum,
                                unsqueeze2x)


class TestConv2d:
    def test_1x1_identity(self, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        out = conv2d(constant(x), constant(np.ones((1, 1, 1, 1))),
                     constant(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias_constant(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out = conv2d(constant(x), constant(np.zeros((3, 2, 3, 3))),
                     constant(np.full(3, 2.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 4, 4), 2.5))

    def test_delta_kernel_passthrough(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(constant(x), constant(w))
        np.testing.assert_array_equal(out.data, x)

    def test_linearity(self, rng):
        w = constant(rng.standard_normal((4, 3, 3, 3)))
        x = rng.standard_normal((2, 3, 5, 5))
        y = rng.standard_normal((2, 3, 5, 5))
        lhs = conv2d(constant(2.0 * x + 3.0 * y), w).data
        rhs = 2.0 * conv2d(constant(x), w).data + 3.0 * conv2d(constant(y), w).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch_reports_both_shapes(self, rng):
        x = constant(rng.standard_normal((1, 3, 4, 4)))
        w = constant(rng.standard_normal((2, 5, 3, 3)))
        with pytest.raises(ShapeError) as exc:
            conv2d(x, w)
        assert "(1, 3, 4, 4)" in str(exc.value) and "(2, 5, 3, 3)" in str(exc.value)

    def test_rejects_other_kernels(self, rng):
        with pytest.raises(ShapeError):
            conv2d(constant(rng.standard_normal((1, 2, 4, 4))),
                   constant(rng.standard_normal((2, 2, 5, 5))))

    def test_bias_length_checked(self, rng):
        with pytest.raises(ShapeError):
            conv2d(constant(rng.standard_normal((1, 2, 4, 4))),
                   constant(rng.standard_normal((3, 2, 1, 1))),
                   constant(np.zeros(2)))

    def test_kernels_match_numpy_fallback(self, rng):
        for shape in [(2, 3, 5, 7), (1, 1, 4, 4), (3, 8, 6, 6)]:
            x = rng.standard_normal(shape)
            np.testing.assert_array_equal(ck.im2col3(x), ck._im2col3_np(x))
            g = rng.standard_normal((shape[0], shape[1] * 9, shape[2] * shape[3]))
            np.testing.assert_allclose(ck.col2im3(g, shape[2], shape[3]),
                                       ck._col2im3_np(g, shape[2], shape[3]),
                                       atol=1e-12)


class TestElementwise:
    def test_exp_of_zeros(self):
        np.testing.assert_array_equal(exp(constant(np.zeros(4))).data, np.ones(4))

    def test_relu(self):
        np.testing.assert_array_equal(relu(constant([-1.0, 2.0])).data, [0.0, 2.0])

    def test_mul(self):
        np.testing.assert_array_equal(
            mul(constant([2.0, 3.0]), constant([4.0, 5.0])).data, [8.0, 15.0])

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            log(constant([1.0, -2.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mul(constant(np.zeros(3)), constant(np.zeros(4)))

    def test_scalar_operand_broadcasts(self):
        out = constant([1.0, 2.0]) + 1.5
        np.testing.assert_array_equal(out.data, [2.5, 3.5])


class TestReduce:
    def test_sum(self):
        assert tensor_sum(constant([1.0, 2.0, 3.0])).item() == 6.0

    def test_l2_norm(self):
        assert l2_norm(constant([3.0, 4.0])).item() == 5.0

    def test_mean(self):
        assert tensor_mean(constant([2.0, 4.0])).item() == 3.0

    def test_sum_samples(self, rng):
        x = rng.standard_normal((3, 2, 2))
        np.testing.assert_allclose(sum_samples(constant(x)).data,
                                   x.reshape(3, -1).sum(axis=1))


class TestBackprop:
    def test_sum_gradient_is_ones(self, rng):
        x = parameter(rng.standard_normal((2, 3)))
        grads = backprop(tensor_sum(x))
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_sum_exp_gradient(self):
        x = parameter(np.array([0.0, 1.0]))
        grads = backprop(tensor_sum(exp(x)))
        np.testing.assert_allclose(grads[x], [1.0, np.e], rtol=1e-15)

    def test_l2_norm_matches_finite_differences(self, rng):
        c = constant(rng.standard_normal((2, 5)))
        err = grad_check(lambda t: l2_norm(sub(t, c)),
                         Tensor(rng.standard_normal((2, 5))), step=1e-5)
        assert err < 1e-6

    def test_non_scalar_loss_rejected(self, rng):
        x = parameter(rng.standard_normal(3))
        with pytest.raises(ContractError):
            backprop(exp(x))

    def test_same_tape_twice_is_bit_identical(self, rng):
        x = parameter(rng.standard_normal((2, 4, 4, 4)))
        w = parameter(rng.standard_normal((4, 4, 3, 3)))
        loss = l2_norm(relu(conv2d(x, w)))
        g1 = backprop(loss)
        g2 = backprop(loss)
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])

    def test_release_frees_tape(self, rng):
        x = parameter(rng.standard_normal((1, 2, 4, 4)))
        w = parameter(rng.standard_normal((2, 2, 3, 3)))
        loss = l2_norm(conv2d(x, w))
        g1 = backprop(loss, release=True)
        assert set(g1) == {x, w}
        assert loss._parents == ()

    def test_fanout_accumulation(self, rng):
        x = parameter(rng.standard_normal(5))
        y = exp(x)
        loss = tensor_sum(y) + tensor_sum(mul(y, y))
        grads = backprop(loss)
        expect = np.exp(x.data) + 2.0 * np.exp(2.0 * x.data)
        np.testing.assert_allclose(grads[x], expect, rtol=1e-12)

    def test_frozen_leaves_get_no_entry(self, rng):
        x = parameter(rng.standard_normal((1, 2, 4, 4)))
        w = parameter(rng.standard_normal((2, 2, 1, 1)))
        w.requires_grad = False
        grads = backprop(l2_norm(conv2d(x, w)))
        assert x in grads and w not in grads


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        # both sides are 1 up to the rounding of x_i +- h in the probe sums
        assert grad_check(tensor_sum, Tensor(rng.standard_normal(6))) < 1e-10

    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]))
        err = grad_check(lambda t: scale(tensor_sum(mul(t, t)), 0.5), x, step=1e-5)
        assert err < 1e-8


def _probe(shape, rng):
    return Tensor(rng.standard_normal(shape))


OPS = [
    ("add_broadcast", lambda t, c: tensor_sum(exp(t + constant(c[0, :, :1, :1])))),
    ("sub", lambda t, c: l2_norm(sub(t, constant(c)))),
    ("mul", lambda t, c: tensor_sum(mul(t, constant(c)))),
    ("scale", lambda t, c: tensor_sum(scale(t, -1.7))),
    ("exp", lambda t, c: tensor_sum(exp(t))),
    ("sqrt_shifted", lambda t, c: tensor_sum(sqrt(exp(t)))),
    ("mean", lambda t, c: tensor_mean(mul(t, t))),
    ("sum_samples", lambda t, c: tensor_sum(mul(sum_samples(t), constant(c[0, 0, 0, :2])))),
    ("reshape", lambda t, c: l2_norm(reshape(t, (2, 18)))),
    ("concat_channels", lambda t, c: l2_norm(concat_channels([t, mul(t, t)]))),
    ("channels", lambda t, c: l2_norm(channels(t, 0, 1))),
]


@pytest.mark.parametrize("name,build", OPS, ids=[o[0] for o in OPS])
def test_op_gradients(name, build, rng):
    worst = 0.0
    for trial in range(10):
        x = _probe((2, 2, 3, 3), rng)
        fixed = rng.standard_normal((1, 2, 3, 3))
        worst = max(worst, grad_check(lambda t: build(t, fixed), x, step=1e-5))
    assert worst < 1e-5, f"{name}: max rel err {worst}"


def test_log_gradient(rng):
    worst = 0.0
    for _ in range(10):
        x = Tensor(rng.uniform(0.5, 3.0, (2, 4)))
        worst = max(worst, grad_check(lambda t: tensor_sum(log(t)), x))
    assert worst < 1e-5


def test_relu_gradient_away_from_kink(rng):
    worst = 0.0
    for _ in range(10):
        raw = rng.standard_normal((2, 8))
        raw[np.abs(raw) < 0.2] = 0.5
        worst = max(worst, grad_check(lambda t: tensor_sum(relu(t)), Tensor(raw)))
    assert worst < 1e-5


def test_squeeze_gradients(rng):
    worst = 0.0
    for _ in range(10):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        worst = max(worst, grad_check(lambda t: l2_norm(squeeze2x(t)), x))
        z = Tensor(rng.standard_normal((1, 8, 2, 2)))
        worst = max(worst, grad_check(lambda t: l2_norm(unsqueeze2x(t)), z))
    assert worst < 1e-5


def test_conv_gradients_all_arguments(rng):
    worst = 0.0
    for k in (1, 3):
        for _ in range(5):
            x = rng.standard_normal((2, 3, 4, 4))
            w = rng.standard_normal((2, 3, k, k))
            b = rng.standard_normal(2)
            worst = max(worst, grad_check(
                lambda t: l2_norm(conv2d(t, constant(w), constant(b))), Tensor(x)))
            worst = max(worst, grad_check(
                lambda t: l2_norm(conv2d(constant(x), t, constant(b))), Tensor(w)))
            worst = max(worst, grad_check(
                lambda t: l2_norm(conv2d(constant(x), constant(w), t)), Tensor(b)))
    assert worst < 1e-5


def test_matrix_op_gradients(rng):
    worst = 0.0
    for _ in range(10):
        a = rng.standard_normal((3, 3)) + 3.0 * np.eye(3)
        worst = max(worst, grad_check(lambda t: l2_norm(mat_inverse(t)), Tensor(a)))
        worst = max(worst, grad_check(lambda t: log_abs_det(t), Tensor(a)))
    assert worst < 1e-5


def test_mat_inverse_value(rng):
    a = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
    np.testing.assert_allclose(mat_inverse(constant(a)).data, np.linalg.inv(a),
                               atol=1e-12)


def test_log_abs_det_value(rng):
    a = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
    assert np.isclose(log_abs_det(constant(a)).item(),
                      np.linalg.slogdet(a)[1], atol=1e-12)


class TestStructuralOps:
    def test_squeeze_declared_ordering(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = squeeze2x(constant(x))
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 2.0, 3.0, 4.0])

    def test_squeeze_roundtrip_bit_exact(self, rng):
        x = rng.standard_normal((2, 3, 6, 8))
        back = unsqueeze2x(squeeze2x(constant(x)))
        np.testing.assert_array_equal(back.data, x)

    def test_squeeze_preserves_multiset(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out = squeeze2x(constant(x))
        np.testing.assert_array_equal(np.sort(out.data.reshape(-1)),
                                      np.sort(x.reshape(-1)))

    def test_squeeze_odd_extent_rejected(self, rng):
        with pytest.raises(ShapeError):
            squeeze2x(constant(rng.standard_normal((1, 1, 3, 4))))

    def test_concat_then_slice_roundtrip(self, rng):
        a = constant(rng.standard_normal((1, 2, 3, 3)))
        b = constant(rng.standard_normal((1, 3, 3, 3)))
        cat = concat_channels([a, b])
        np.testing.assert_array_equal(channels(cat, 0, 2).data, a.data)
        np.testing.assert_array_equal(channels(cat, 2, 5).data, b.data)
