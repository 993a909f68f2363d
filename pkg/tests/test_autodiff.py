import numpy as np
import pytest

from aeriallab import autodiff as ad
from aeriallab.autodiff import Graph, Tensor, constant, param
from aeriallab.errors import (
    ContractError,
    NumericError,
    ParameterError,
    ShapeError,
)

from oracles import grad_check, rel_err


def rand(rng, *shape):
    return param(rng.standard_normal(shape))


class TestMatmul:
    def test_identity(self):
        i2 = constant(np.eye(2))
        out = ad.matmul(i2, constant(np.eye(2)))
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_permutation_swaps_columns(self):
        a = constant([[1.0, 2.0], [3.0, 4.0]])
        p = constant([[0.0, 1.0], [1.0, 0.0]])
        out = ad.matmul(a, p)
        np.testing.assert_array_equal(out.data, [[2.0, 1.0], [4.0, 3.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(constant(np.zeros((2, 3))), constant(np.zeros((2, 3))))

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 3, 4)
        b = constant(rng.standard_normal((4, 2)))
        with Graph() as g:
            loss = ad.reduce_sum(ad.matmul(a, b))
            g.backward(loss)
        expect = np.ones((3, 2)) @ b.data.T
        assert rel_err(a.grad, expect) < 1e-12

    @pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (2, 4, 5)), ((2, 5, 3), (3, 4))])
    def test_grad_matches_finite_differences(self, shapes):
        rng = np.random.default_rng(1)
        a = rand(rng, *shapes[0])
        b = rand(rng, *shapes[1])
        w = constant(rng.standard_normal(np.matmul(a.data, b.data).shape))
        err = grad_check(lambda: ad.reduce_sum(ad.mul(ad.matmul(a, b), w)), [a, b])
        assert err < 1e-7


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = ad.softmax_lastdim(constant([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = ad.softmax_lastdim(constant([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.uniform(-1e4, 1e4, size=(5, 7))
            y = ad.softmax_lastdim(constant(x)).data
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            ad.softmax_lastdim(constant([np.nan, 1.0]))

    def test_grad(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 4, 5)
        w = constant(rng.standard_normal((4, 5)))
        err = grad_check(lambda: ad.reduce_sum(ad.mul(ad.softmax_lastdim(x), w)), [x])
        assert err < 1e-6


class TestLayernorm:
    def test_constant_row_maps_to_zero(self):
        x = constant(np.full((1, 4), 7.0))
        out = ad.layernorm(x, constant(np.ones(4)), constant(np.zeros(4)), eps=1e-6)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_two_point_row(self):
        # variance of [1, 3] is 1, mean 2; tiny eps leaves [-1, 1] intact
        x = constant([[1.0, 3.0]])
        out = ad.layernorm(x, constant(np.ones(2)), constant(np.zeros(2)), eps=1e-30)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(4)
        x = constant(rng.standard_normal((6, 16)) * 3 + 5)
        out = ad.layernorm(x, constant(np.ones(16)), constant(np.zeros(16)), eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-8)

    def test_rejects_nonpositive_eps(self):
        x = constant(np.zeros((1, 4)))
        with pytest.raises(ParameterError):
            ad.layernorm(x, constant(np.ones(4)), constant(np.zeros(4)), eps=0.0)

    def test_grad(self):
        rng = np.random.default_rng(5)
        x = rand(rng, 3, 8)
        gamma = param(rng.standard_normal(8))
        beta = param(rng.standard_normal(8))
        w = constant(rng.standard_normal((3, 8)))
        err = grad_check(
            lambda: ad.reduce_sum(ad.mul(ad.layernorm(x, gamma, beta, 1e-5), w)),
            [x, gamma, beta],
        )
        assert err < 1e-6


class TestGelu:
    def test_zero(self):
        assert ad.gelu(constant(0.0)).item() == 0.0

    def test_asymptotes(self):
        assert ad.gelu(constant(20.0)).item() == pytest.approx(20.0, abs=1e-12)
        assert abs(ad.gelu(constant(-20.0)).item()) < 1e-12

    def test_grad(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 17)
        err = grad_check(lambda: ad.reduce_sum(ad.gelu(x)), [x])
        assert err < 1e-6


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(7)
        x = constant(rng.standard_normal((3, 6, 6)))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        out = ad.depthwise_conv2d(x, constant(k), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_ones_kernel_on_constant_image(self):
        x = constant(np.full((1, 5, 5), 2.0))
        k = constant(np.ones((1, 3, 3)))
        out = ad.depthwise_conv2d(x, k, padding=1)
        np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 18.0, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ParameterError):
            ad.depthwise_conv2d(constant(np.zeros((1, 4, 4))), constant(np.zeros((1, 2, 2))), padding=0)

    def test_channels_never_mix(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 8, 8))
        k = constant(rng.standard_normal((4, 3, 3)))
        full = ad.depthwise_conv2d(constant(x), k, padding=1).data
        x2 = x.copy()
        x2[2] = 0.0
        part = ad.depthwise_conv2d(constant(x2), k, padding=1).data
        np.testing.assert_array_equal(part[2], 0.0)
        others = [0, 1, 3]
        np.testing.assert_array_equal(part[others], full[others])

    def test_grad_input_and_kernels(self):
        rng = np.random.default_rng(9)
        x = rand(rng, 2, 5, 5)
        k = rand(rng, 2, 3, 3)
        w = constant(rng.standard_normal((2, 5, 5)))
        err = grad_check(
            lambda: ad.reduce_sum(ad.mul(ad.depthwise_conv2d(x, k, padding=1), w)),
            [x, k],
        )
        assert err < 1e-5

    def test_grad_batched(self):
        rng = np.random.default_rng(10)
        x = rand(rng, 2, 3, 4, 4)
        k = rand(rng, 3, 3, 3)
        err = grad_check(lambda: ad.reduce_sum(ad.depthwise_conv2d(x, k, padding=1)), [x, k])
        assert err < 1e-5


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = param(np.arange(6.0).reshape(2, 3))
        with Graph() as g:
            g.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic_gradient(self):
        x = param(np.array([1.0, -2.0, 3.0]))
        with Graph() as g:
            g.backward(ad.reduce_sum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-14)

    def test_non_scalar_loss_rejected(self):
        x = param(np.ones(3))
        with Graph() as g:
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                g.backward(y)

    def test_unrecorded_loss_rejected(self):
        x = param(np.ones(3))
        loss = ad.reduce_sum(x)  # no graph active: value only
        with pytest.raises(ContractError):
            ad.backward(loss)

    def test_second_backward_doubles_accumulation(self):
        x = param(np.array([1.0, 2.0]))
        with Graph() as g:
            loss = ad.reduce_sum(ad.mul(x, x))
            g.backward(loss)
            first = x.grad.copy()
            g.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_explicit_zero_grad(self):
        x = param(np.array([3.0]))
        with Graph() as g:
            g.backward(ad.reduce_sum(x))
        x.zero_grad()
        assert x.grad is None

    def test_gradient_map_returned(self):
        x = param(np.ones(4))
        y = param(np.ones(4))
        with Graph() as g:
            leaves = g.backward(ad.reduce_sum(ad.add(x, ad.mul(y, y))))
        assert set(leaves) == {x, y}

    def test_fanout_accumulates(self):
        x = param(np.array([2.0]))
        with Graph() as g:
            y = ad.mul(x, x)
            g.backward(ad.reduce_sum(ad.add(y, y)))
        np.testing.assert_allclose(x.grad, [8.0])


class TestCompositeGradients:
    """Random small-tensor finite-difference checks across the op set."""

    @pytest.mark.parametrize("seed", range(5))
    def test_deep_composite(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rand(rng, 4, 6)
        w1 = rand(rng, 6, 6)
        b1 = rand(rng, 6)
        g2 = rand(rng, 6)
        b2 = rand(rng, 6)

        def make_loss():
            h = ad.linear(x, w1, b1)
            h = ad.gelu(h)
            h = ad.layernorm(h, g2, b2, eps=1e-5)
            h = ad.softmax_lastdim(h)
            return ad.reduce_mean(ad.mul(h, h))

        assert grad_check(make_loss, [x, w1, b1, g2, b2]) < 1e-5

    def test_reshape_transpose_slice_concat(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 4, 6)

        def make_loss():
            t = ad.transpose(ad.reshape(x, (2, 2, 6)), (1, 0, 2))
            a = ad.slice_axis(t, 2, 0, 3)
            b = ad.slice_axis(t, 2, 3, 6)
            joined = ad.concat([b, a], axis=2)
            return ad.reduce_sum(ad.mul(joined, joined))

        assert grad_check(make_loss, [x]) < 1e-6

    def test_roll_axis_matches_numpy_and_grad(self):
        rng = np.random.default_rng(12)
        x = rand(rng, 3, 5)
        out = ad.roll_axis(x, 2, axis=1)
        np.testing.assert_array_equal(out.data, np.roll(x.data, 2, axis=1))
        assert grad_check(lambda: ad.reduce_sum(ad.mul(ad.roll_axis(x, 2, 1), ad.roll_axis(x, 2, 1))), [x]) < 1e-6

    def test_take_rows_grad(self):
        rng = np.random.default_rng(13)
        table = rand(rng, 5, 3)
        idx = np.array([0, 2, 2, 4, 1])
        w = constant(rng.standard_normal((5, 3)))
        err = grad_check(lambda: ad.reduce_sum(ad.mul(ad.take_rows(table, idx), w)), [table])
        assert err < 1e-6

    def test_reductions_and_losses(self):
        rng = np.random.default_rng(14)
        a = rand(rng, 3, 4)
        b = rand(rng, 3, 4)

        def make_loss():
            s = ad.reduce_sum(a, axis=0)
            m = ad.reduce_mean(b, axis=1, keepdims=True)
            return ad.add(ad.l1_loss(a, b), ad.add(ad.l2_loss(a, b), ad.reduce_sum(ad.mul(s, s)) + ad.reduce_sum(ad.mul(m, m))))

        assert grad_check(make_loss, [a, b]) < 1e-5

    def test_div_grad_and_zero_denominator(self):
        rng = np.random.default_rng(18)
        a = rand(rng, 3, 4)
        b = param(rng.uniform(0.5, 2.0, size=(1, 4)))
        assert grad_check(lambda: ad.reduce_sum(ad.div(a, b)), [a, b]) < 1e-6
        with pytest.raises(NumericError):
            ad.div(a, constant(np.zeros((3, 4))))

    def test_exp_log_sqrt_abs(self):
        rng = np.random.default_rng(15)
        x = param(rng.uniform(0.5, 2.0, size=(4, 4)))

        def make_loss():
            return ad.reduce_sum(ad.add(ad.log(ad.exp(x)), ad.sqrt(ad.abs_(x))))

        assert grad_check(make_loss, [x]) < 1e-6

    def test_logsumexp_matches_reference(self):
        rng = np.random.default_rng(16)
        x = rand(rng, 3, 6)
        out = ad.logsumexp_lastdim(x)
        ref = np.log(np.exp(x.data).sum(axis=-1))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)
        assert grad_check(lambda: ad.reduce_sum(ad.logsumexp_lastdim(x)), [x]) < 1e-6

    def test_broadcast_add_mul(self):
        rng = np.random.default_rng(17)
        x = rand(rng, 2, 3, 4)
        b = rand(rng, 4)
        m = rand(rng, 3, 1)
        err = grad_check(lambda: ad.reduce_sum(ad.mul(ad.add(x, b), m)), [x, b, m])
        assert err < 1e-6


class TestInferenceWithoutGraph:
    def test_no_recording_outside_graph(self):
        x = param(np.ones(3))
        y = ad.reduce_sum(x)
        assert y.node is None

    def test_log_rejects_nonpositive(self):
        with pytest.raises(NumericError):
            ad.log(constant([0.0, 1.0]))
