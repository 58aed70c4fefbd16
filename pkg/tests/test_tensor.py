import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpsim import tensor as T
from hpsim.exceptions import ConfigurationError, DimensionError, DomainError, PrecisionError
from oracles import central_difference, naive_conv2d, naive_logistic_xent, naive_matmul, rel_err


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((2, 2))
        assert np.array_equal(T.matmul(a, np.eye(2)), a)

    def test_zero(self, rng):
        out = T.matmul(np.zeros((3, 4)), rng.standard_normal((4, 2)))
        assert out.shape == (3, 2)
        assert not out.any()

    @pytest.mark.parametrize("precision", ["single", "double"])
    def test_matches_triple_loop_exactly(self, rng, precision):
        a = T.as_tensor(rng.standard_normal((5, 7)), precision)
        b = T.as_tensor(rng.standard_normal((7, 3)), precision)
        assert np.array_equal(T.matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_mixed_precision_rejected(self):
        with pytest.raises(PrecisionError):
            T.matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2)))

    def test_repeatable_bitwise(self, rng):
        a, b = rng.standard_normal((6, 9)), rng.standard_normal((9, 4))
        assert T.matmul(a, b).tobytes() == T.matmul(a.copy(), b.copy()).tobytes()


class TestConvForward:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        k = np.ones((1, 1, 1, 1))
        assert np.array_equal(T.conv2d_forward(x, k), x)

    def test_zero_kernels(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        out = T.conv2d_forward(x, np.zeros((4, 3, 3, 3)), 1, 1)
        assert out.shape == (2, 4, 5, 5)
        assert not out.any()

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (3, 2)])
    def test_matches_nested_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        if (5 + 2 * pad - 3) % stride:
            pytest.skip("non-integral geometry")
        assert np.array_equal(T.conv2d_forward(x, k, stride, pad), naive_conv2d(x, k, stride, pad))

    def test_single_precision_matches_nested_loops(self, rng):
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        assert np.array_equal(T.conv2d_forward(x, k, 1, 1), naive_conv2d(x, k, 1, 1))

    def test_non_integral_output_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            T.conv2d_forward(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 3, 3)), stride=2, pad=1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 1, 1)))


class TestConvBackward:
    def test_zero_grad_output(self, rng):
        x = rng.standard_normal((2, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        gx, gk = T.conv2d_backward(x, k, np.zeros((2, 3, 5, 5)), 1, 1)
        assert not gx.any() and not gk.any()

    def test_identity_kernel_passes_gradient(self, rng):
        x = rng.standard_normal((2, 1, 4, 4))
        g = rng.standard_normal((2, 1, 4, 4))
        gx, _ = T.conv2d_backward(x, np.ones((1, 1, 1, 1)), g)
        assert np.array_equal(gx, g)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_finite_differences(self, rng, stride, pad):
        x = rng.standard_normal((2, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        out_shape = T.conv2d_forward(x, k, stride, pad).shape
        probe = rng.standard_normal(out_shape)
        gx, gk = T.conv2d_backward(x, k, probe, stride, pad)

        def f():
            return float((T.conv2d_forward(x, k, stride, pad) * probe).sum())

        for arr, grad in ((x, gx), (k, gk)):
            for _ in range(8):
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                assert rel_err(central_difference(f, arr, idx), grad[idx]) < 1e-6


class TestLogisticXent:
    def test_zero_logit_positive_target(self):
        loss, grad = T.logistic_xent(np.zeros((1, 1)), np.ones((1, 1)))
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        assert grad[0, 0] == -0.5

    def test_saturation(self):
        loss, grad = T.logistic_xent(np.full((1, 1), 40.0), np.ones((1, 1)))
        assert loss < 1e-15
        assert abs(grad[0, 0]) < 1e-15

    def test_stable_for_huge_logits(self):
        z = np.array([[1e3, -1e3]])
        loss, grad = T.logistic_xent(z, np.array([[0.0, 1.0]]))
        assert loss == pytest.approx(2e3)
        assert np.array_equal(grad, [[1.0, -1.0]])

    def test_matches_naive_loss(self, rng):
        z = rng.standard_normal((3, 4))
        t = rng.random((3, 4))
        assert T.logistic_xent(z, t)[0] == pytest.approx(naive_logistic_xent(z, t), rel=1e-12)

    def test_gradient_finite_differences(self, rng):
        z = rng.standard_normal((3, 4))
        t = rng.random((3, 4))
        _, grad = T.logistic_xent(z, t)
        for idx in np.ndindex(z.shape):
            fd = central_difference(lambda: T.logistic_xent(z, t)[0], z, idx)
            assert rel_err(fd, grad[idx]) < 1e-6

    def test_target_out_of_range(self):
        with pytest.raises(DomainError):
            T.logistic_xent(np.zeros((1, 2)), np.array([[0.5, 1.5]]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.logistic_xent(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_column_slices_score_independently(self, rng):
        z = rng.standard_normal((4, 6))
        t = (rng.random((4, 6)) < 0.5).astype(float)
        terms, _ = T.logistic_xent_terms(z, t)
        left, _ = T.logistic_xent_terms(z[:, :2], t[:, :2])
        assert np.array_equal(terms[:, :2], left)


@settings(max_examples=30, deadline=None)
@given(
    m=st.integers(1, 5),
    p=st.integers(1, 6),
    n=st.integers(1, 5),
    seed=st.integers(0, 2**32 - 1),
)
def test_matmul_property_matches_oracle(m, p, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, p)), r.standard_normal((p, n))
    assert np.array_equal(T.matmul(a, b), naive_matmul(a, b))


def test_precision_lookup():
    assert T.dtype_for("single") == np.float32
    assert T.precision_of(np.zeros(1)) == "double"
    with pytest.raises(DomainError):
        T.dtype_for("half")
