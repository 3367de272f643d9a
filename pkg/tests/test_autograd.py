import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from passnorm.autograd import (
    Tensor,
    avg_pool2d,
    conv2d,
    cross_entropy,
    global_avg_pool,
    grad_check,
    leaky_relu,
    make_rng,
    matmul,
    sgd_step,
)
from passnorm.errors import DimensionError, UsageError


def matmul_oracle(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_oracle(x, w, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            out[o, i, j] += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
    return out


@pytest.fixture
def rng():
    return make_rng(1234)


# -- matmul -------------------------------------------------------------------


def test_matmul_selects_column():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [0]]))
    np.testing.assert_array_equal(out.data, [[1], [3]])


def test_matmul_identity(rng):
    a = rng.normal(size=(4, 4)).astype(np.float32)
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(4))).data, a)


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    got = matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, matmul_oracle(a, b), atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_storage_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[1.0], [2.0]])).data.dtype == np.float32
    # explicit float64 arrays are the grad_check path and keep their precision
    assert Tensor(np.ones(2)).data.dtype == np.float64


# -- conv2d ---------------------------------------------------------------------


def test_conv_scalar_kernel_scales_input():
    out = conv2d(Tensor([[[1, 2], [3, 4]]]), Tensor([[[[2]]]]))
    np.testing.assert_array_equal(out.data, [[[2, 4], [6, 8]]])


def test_conv_zero_kernel(rng):
    out = conv2d(Tensor(rng.normal(size=(2, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), padding=1)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_six_loop_oracle(rng, stride, pad):
    x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad).data
    np.testing.assert_allclose(got, conv_oracle(x, w, stride, pad), atol=1e-5)


def test_conv_batched_equals_per_sample(rng):
    x, w = rng.normal(size=(3, 2, 5, 5)), Tensor(rng.normal(size=(4, 2, 3, 3)))
    batched = conv2d(Tensor(x), w, 1, 1).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], conv2d(Tensor(x[n]), w, 1, 1).data, atol=1e-6)


def test_conv_1x1_is_channel_matmul(rng):
    x, w = rng.normal(size=(3, 4, 4)), rng.normal(size=(5, 3, 1, 1))
    got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    want = np.einsum("oc,chw->ohw", w[:, :, 0, 0], x)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv_backward_is_adjoint(rng):
    """<conv(x), g> == <x, dL/dx> for L = <conv(x), g>, exercised via col2im."""
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
    out = conv2d(x, w, 2, 1)
    g = rng.normal(size=out.shape)
    (out * Tensor(g, dtype=np.float64)).sum().backward()
    assert np.isclose((out.data * g).sum(), (x.grad * x.data).sum())


# -- pooling and activations ----------------------------------------------------------


def test_gap_mean_of_four():
    np.testing.assert_array_equal(global_avg_pool(Tensor([[[2, 4], [6, 8]]])).data, [5])


def test_gap_constant_channel():
    np.testing.assert_array_equal(global_avg_pool(Tensor(np.full((2, 3, 3), 7.0))).data, [7, 7])


def test_gap_matches_summation_oracle(rng):
    x = rng.normal(size=(4, 3, 3))
    want = [sum(x[c, i, j] for i in range(3) for j in range(3)) / 9 for c in range(4)]
    np.testing.assert_allclose(global_avg_pool(Tensor(x, dtype=np.float64)).data, want, atol=1e-12)


def test_avg_pool2d(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    got = avg_pool2d(Tensor(x, dtype=np.float64), 2).data
    assert got.shape == (1, 2, 2, 2)
    assert np.isclose(got[0, 1, 1, 0], x[0, 1, 2:4, 0:2].mean())


@pytest.mark.parametrize("x,want", [(2.0, 2.0), (-1.0, -0.01), (0.0, 0.0)])
def test_leaky_relu_values(x, want):
    assert leaky_relu(Tensor([x]), 0.01).data[0] == pytest.approx(want)


@pytest.mark.parametrize("slope", [-0.1, 1.0])
def test_leaky_relu_slope_range(slope):
    with pytest.raises(UsageError):
        leaky_relu(Tensor([1.0]), slope)


def test_cross_entropy_uniform_logits():
    assert cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(np.log(4), rel=1e-6)


# -- sgd --------------------------------------------------------------------------------


def test_sgd_single_step():
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([0.5])
    sgd_step([w], 0.1)
    assert w.data[0] == pytest.approx(0.95)
    assert w.grad is None


def test_sgd_zero_lr():
    w = Tensor([1.0, -2.0], requires_grad=True)
    w.grad = np.array([3.0, 4.0])
    sgd_step([w], 0.0)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_sgd_two_steps_on_square():
    w = Tensor([1.0], requires_grad=True)
    for _ in range(2):
        (w * w).sum().backward()
        sgd_step([w], 0.1)
    assert w.data[0] == pytest.approx(0.64, abs=1e-7)


def test_sgd_missing_grad():
    with pytest.raises(UsageError):
        sgd_step([Tensor([1.0], requires_grad=True)], 0.1)


# -- grad_check --------------------------------------------------------------------------


def test_grad_check_quadratic():
    assert grad_check(lambda x: (x * x).sum(), np.array([1.0, 2.0]), eps=1e-3) < 1e-4


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)))
@settings(max_examples=30, deadline=None)
def test_grad_check_linear(x):
    assert grad_check(lambda t: t.sum(), x) < 1e-6


def test_grad_check_rejects_non_scalar():
    with pytest.raises(UsageError):
        grad_check(lambda t: t * 2.0, np.ones(3))


def test_grad_check_rejects_bad_eps():
    with pytest.raises(UsageError):
        grad_check(lambda t: t.sum(), np.ones(3), eps=0)


def test_grad_check_catches_wrong_gradient():
    def bad(t):
        out = Tensor._op(t.data * 2.0, (t,), lambda g: (g * 3.0,))
        return out.sum()

    assert grad_check(bad, np.ones(3)) > 0.1


# -- engine invariants -----------------------------------------------------------------


def test_non_finite_result_raises():
    with pytest.raises(FloatingPointError):
        Tensor([1.0]) / Tensor([0.0])


def test_backward_visits_shared_node_once():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(3000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_seeded_rng_is_deterministic():
    np.testing.assert_array_equal(make_rng(5).normal(size=8), make_rng(5).normal(size=8))


@given(
    arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
)
@settings(max_examples=40, deadline=None)
def test_broadcast_add_grad_shapes(a, b):
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b[0], requires_grad=True)
    (ta + tb).sum().backward()
    assert ta.grad.shape == a.shape and tb.grad.shape == (4,)
    np.testing.assert_allclose(tb.grad, np.full(4, 3.0))
