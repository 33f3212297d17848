"""Autodiff engine tests: oracle comparisons and finite-difference checks."""

import numpy as np
import pytest

from nlic import tensor as T
from nlic.errors import ConfigError, ContractViolation

from conftest import finite_difference, rel_err

GRAD_TOL = 1e-4


def naive_conv2d(x, w, b, stride=1, pad=0):
    """Independent nested-loop cross-correlation oracle."""
    bsz, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, co, oh, ow))
    for n in range(bsz):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[n, c, i * stride + u, j * stride + v]
                    out[n, o, i, j] = acc + b[o]
    return out


def naive_conv2d_transposed(x, w, b, stride=1, pad=0):
    """Scatter-add oracle for the transposed convolution."""
    bsz, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    full = np.zeros((bsz, co, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for n in range(bsz):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    for o in range(co):
                        for u in range(kh):
                            for v in range(kw):
                                full[n, o, i * stride + u, j * stride + v] += \
                                    x[n, c, i, j] * w[c, o, u, v]
    return full[:, :, pad:pad + oh, pad:pad + ow] + b[None, :, None, None]


def check_grads(fn, arrays, tol=GRAD_TOL, h=1e-5):
    """fn maps Tensors to a scalar Tensor; compares backward to central FD."""
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    loss.backward()

    def scalar_fn(*arrs):
        return fn(*[T.Tensor(a) for a in arrs]).item()

    fd = finite_difference(scalar_fn, [a.copy() for a in arrays], h=h)
    for t, g in zip(tensors, fd):
        assert t.grad is not None
        assert rel_err(t.grad, g) < tol


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        b = np.zeros(1)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_kernel_matches_oracle(self):
        x = np.ones((1, 1, 5, 5))
        w = np.ones((1, 1, 3, 3))
        b = np.zeros(1)
        expected = naive_conv2d(x, w, b, pad=1)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), pad=1)
        # oracle gives 9.0 in the interior, 4.0 at corners
        assert expected[0, 0, 2, 2] == 9.0
        assert expected[0, 0, 0, 0] == 4.0
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2)])
    def test_matches_nested_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), atol=1e-10)

    def test_gradients_vs_finite_differences(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)

        def fn(xt, wt, bt):
            return T.reduce_sum(T.square(T.conv2d(xt, wt, bt, stride=2, pad=1)))

        check_grads(fn, [x, w, b])

    def test_shape_contract_errors(self, rng):
        x = rng.normal(size=(1, 3, 4, 4))
        with pytest.raises(ContractViolation, match="channels"):
            T.conv2d(T.Tensor(x), T.Tensor(np.zeros((2, 4, 3, 3))), T.Tensor(np.zeros(2)))
        with pytest.raises(ContractViolation, match="odd"):
            T.conv2d(T.Tensor(x), T.Tensor(np.zeros((2, 3, 2, 2))), T.Tensor(np.zeros(2)))


class TestConvTransposed:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        out = T.conv2d_transposed(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x)

    def test_stride2_scatter_matches_oracle(self, rng):
        x = rng.normal(size=(1, 1, 2, 2))
        w = np.ones((1, 1, 2, 2))
        b = np.zeros(1)
        out = T.conv2d_transposed(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2)
        expected = naive_conv2d_transposed(x, w, b, stride=2)
        assert out.data.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 0, 2), (2, 1, 4)])
    def test_matches_oracle(self, rng, stride, pad, k):
        x = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(2, 3, k, k))
        b = rng.normal(size=3)
        out = T.conv2d_transposed(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(
            out.data, naive_conv2d_transposed(x, w, b, stride, pad), atol=1e-10)

    def test_gradients(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 4, 4))
        b = rng.normal(size=2)

        def fn(xt, wt, bt):
            return T.reduce_sum(T.square(T.conv2d_transposed(xt, wt, bt, stride=2, pad=1)))

        check_grads(fn, [x, w, b])


class TestMaskedConv:
    def test_mask_shape(self):
        m5 = T.causal_mask(5)
        assert m5[2, 2] == 0.0 and m5[2, 1] == 1.0 and m5[2, 3] == 0.0
        assert m5[:2].all() and not m5[3:].any()
        with pytest.raises(ConfigError):
            T.causal_mask(4)

    def test_strict_causality_bias_only(self, rng):
        # only position (i,j) and raster-later positions are nonzero
        x = np.zeros((1, 2, 6, 6))
        i, j = 3, 2
        raster = np.arange(36).reshape(6, 6)
        x[:, :, raster >= raster[i, j]] = rng.normal(size=(1, 2, (raster >= raster[i, j]).sum()))
        w = rng.normal(size=(3, 2, 5, 5))
        b = rng.normal(size=3)
        out = T.masked_conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), kernel=5)
        np.testing.assert_array_equal(out.data[0, :, i, j], b)

    @pytest.mark.parametrize("kernel", [5, 7])
    def test_exhaustive_perturbation(self, rng, kernel):
        # perturbing input at raster position p leaves all outputs before p
        # bit-identical
        x = rng.normal(size=(1, 4, 6, 6))
        w = rng.normal(size=(2, 4, kernel, kernel))
        b = rng.normal(size=2)
        base = T.masked_conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), kernel=kernel).data
        for p in range(36):
            i, j = divmod(p, 6)
            xp = x.copy()
            xp[0, rng.integers(0, 4), i, j] += rng.normal()
            out = T.masked_conv2d(T.Tensor(xp), T.Tensor(w), T.Tensor(b), kernel=kernel).data
            flat_base = base.reshape(1, 2, -1)
            flat_out = out.reshape(1, 2, -1)
            assert np.array_equal(flat_base[:, :, :p], flat_out[:, :, :p])

    def test_masked_weights_get_zero_grad(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = T.Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        b = T.Tensor(rng.normal(size=2), requires_grad=True)
        loss = T.reduce_sum(T.square(T.masked_conv2d(T.Tensor(x), w, b, kernel=5)))
        loss.backward()
        mask = T.causal_mask(5)
        assert np.array_equal(w.grad * (1 - mask), np.zeros_like(w.grad))
        # unmasked taps do receive gradient
        assert np.abs(w.grad * mask).max() > 0

    def test_gradients(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(2, 2, 5, 5))
        b = rng.normal(size=2)

        def fn(xt, wt, bt):
            return T.reduce_sum(T.square(T.masked_conv2d(xt, wt, bt, kernel=5)))

        check_grads(fn, [x, w, b])


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(T.Tensor(np.zeros(3))).data[0] == 0.5

    def test_softplus_positive(self, rng):
        x = rng.normal(scale=10, size=100)
        assert (T.softplus(T.Tensor(x)).data > 0).all()

    def test_leaky_relu_slope(self):
        out = T.leaky_relu(T.Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    @pytest.mark.parametrize("op", ["add", "mul", "sub", "div", "leaky_relu", "sigmoid",
                                    "exp", "softplus", "log", "square", "tanh",
                                    "normal_cdf"])
    def test_gradients_each_op(self, rng, op):
        x = rng.normal(size=(2, 3, 4, 4))
        y = rng.normal(size=(2, 3, 4, 4))
        if op == "log":
            x = np.abs(x) + 0.5
        if op == "div":
            y = np.abs(y) + 0.5
        binary = {"add": T.add, "mul": T.mul, "sub": T.sub, "div": T.div}
        if op in binary:
            def fn(a, b2):
                return T.reduce_sum(T.square(binary[op](a, b2)))
            check_grads(fn, [x, y])
        else:
            unary = getattr(T, op)

            def fn(a):
                return T.reduce_sum(T.square(unary(a)))
            check_grads(fn, [x])

    def test_bias_broadcast_gradient(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        bias = rng.normal(size=(1, 3, 1, 1))

        def fn(a, b2):
            return T.reduce_sum(T.square(T.add(a, b2)))

        check_grads(fn, [x, bias])

    def test_clamp_min_directional_gradient(self):
        t = T.Tensor(np.array([0.5, 2.0]), requires_grad=True)
        out = T.clamp_min(t, 1.0)
        np.testing.assert_allclose(out.data, [1.0, 2.0])
        loss = T.reduce_sum(out)
        loss.backward()
        # gradient of +1 at a clamped element pushes it further down: blocked
        np.testing.assert_allclose(t.grad, [0.0, 1.0])
        t2 = T.Tensor(np.array([0.5]), requires_grad=True)
        T.reduce_sum(T.mul(T.clamp_min(t2, 1.0), -1.0)).backward()
        np.testing.assert_allclose(t2.grad, [-1.0])  # upward pull passes


class TestSoftmaxGroups:
    def test_uniform_logits(self):
        x = np.zeros((1, 6, 2, 2))
        out = T.softmax_channel_groups(T.Tensor(x), 3)
        np.testing.assert_allclose(out.data, 1.0 / 3.0)

    def test_limit_case(self):
        x = np.zeros((1, 3, 1, 1))
        x[0, 2] = 50.0
        out = T.softmax_channel_groups(T.Tensor(x), 3).data[0, :, 0, 0]
        assert out[2] > 1 - 1e-9 and out[0] < 1e-9 and out[1] < 1e-9

    def test_groups_sum_to_one(self, rng):
        x = rng.normal(scale=4, size=(2, 12, 3, 3))
        out = T.softmax_channel_groups(T.Tensor(x), 3).data
        sums = out.reshape(2, 4, 3, 3, 3).sum(axis=2)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        assert (out > 0).all()

    def test_indivisible_channels(self):
        with pytest.raises(ConfigError):
            T.softmax_channel_groups(T.Tensor(np.zeros((1, 5, 1, 1))), 3)

    def test_gradients(self, rng):
        x = rng.normal(size=(1, 6, 2, 2))

        def fn(a):
            sm = T.softmax_channel_groups(a, 3)
            return T.reduce_sum(T.mul(sm, T.Tensor(np.linspace(0, 1, sm.size).reshape(sm.shape))))

        check_grads(fn, [x])


class TestShapeOps:
    def test_concat_narrow_roundtrip(self, rng):
        a = rng.normal(size=(1, 2, 3, 3))
        b = rng.normal(size=(1, 4, 3, 3))

        def fn(at, bt):
            cat = T.concat([at, bt], axis=1)
            return T.reduce_sum(T.square(T.narrow(cat, 1, 1, 3)))

        check_grads(fn, [a, b])

    def test_transpose_reshape(self, rng):
        x = rng.normal(size=(2, 6, 2, 2))

        def fn(a):
            r = T.reshape(a, (2, 2, 3, 2, 2))
            tr = T.transpose(r, (0, 2, 1, 3, 4))
            return T.reduce_sum(T.square(tr))

        check_grads(fn, [x])

    def test_reduce_sum_axis(self, rng):
        x = rng.normal(size=(2, 3, 4))

        def fn(a):
            return T.reduce_sum(T.square(T.reduce_sum(a, axis=1, keepdims=True)))

        check_grads(fn, [x])


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares_gradient(self, rng):
        data = rng.normal(size=(3, 4))
        x = T.Tensor(data, requires_grad=True)
        T.reduce_sum(T.square(x)).backward()
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_composite_conv_relu_sum(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)

        def fn(xt, wt, bt):
            return T.reduce_sum(T.leaky_relu(T.conv2d(xt, wt, bt, pad=1)))

        check_grads(fn, [x, w, b])

    def test_non_scalar_loss_rejected(self, rng):
        x = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(ContractViolation, match="scalar"):
            T.square(x).backward()

    def test_second_backward_rejected(self, rng):
        x = T.Tensor(rng.normal(size=3), requires_grad=True)
        loss = T.reduce_sum(T.square(x))
        loss.backward()
        with pytest.raises(ContractViolation):
            loss.backward()

    def test_debug_nan_guard(self):
        T.set_debug_checks(True)
        try:
            with pytest.raises(ContractViolation):
                T.log(T.Tensor(np.array([-1.0])))
            with np.errstate(over="ignore"), pytest.raises(ContractViolation):
                T.exp(T.Tensor(np.array([1e9])))  # overflows to inf
        finally:
            T.set_debug_checks(False)


class TestGradientSuiteRandomized:
    """Spec-level property: >=10 seeds, rel. gradient error < 1e-4 per op."""

    @pytest.mark.parametrize("seed", range(10))
    def test_conv_pipeline_many_seeds(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)

        def fn(xt, wt, bt):
            h = T.conv2d(xt, wt, bt, stride=1, pad=1)
            h = T.leaky_relu(h)
            h = T.sigmoid(h)
            return T.reduce_sum(T.square(h))

        check_grads(fn, [x, w, b])
