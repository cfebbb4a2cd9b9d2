import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import correlate

from cdcl import ops
from cdcl.gradcheck import grad_check
from cdcl.nn import BatchNorm1d, ConvNeXtBlock
from cdcl.tensor import GraphError, NonFiniteError, Tensor, backward, no_grad

from conftest import f64, probe


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.random((1, 1, 3, 3)).astype(np.float32))
    w = Tensor(np.ones((1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(ops.conv2d(x, w).data, x.data)


def test_conv_ones_reflect_gives_nine():
    x = Tensor(np.ones((1, 1, 4, 4), np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), np.float32))
    out = ops.conv2d(x, w, padding=1, pad_mode="reflect")
    np.testing.assert_array_equal(out.data, np.full((1, 1, 4, 4), 9.0))


def test_conv_stride_two_shape(rng):
    x = Tensor(rng.random((1, 16, 8, 8)).astype(np.float32))
    w = Tensor(rng.random((64, 16, 3, 3)).astype(np.float32))
    assert ops.conv2d(x, w, stride=2, padding=1).shape == (1, 64, 4, 4)


@pytest.mark.parametrize("mode", ["zero", "reflect"])
def test_conv_matches_scipy_correlate(rng, mode):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1, pad_mode=mode).data
    padmode = "constant" if mode == "zero" else "reflect"
    for n in range(2):
        for o in range(4):
            ref = sum(correlate(np.pad(x[n, c], 1, mode=padmode), w[o, c], mode="valid") for c in range(3))
            np.testing.assert_allclose(out[n, o], ref, atol=1e-12)


def test_depthwise_equals_per_channel(rng):
    x = rng.normal(size=(1, 4, 9, 9))
    w = rng.normal(size=(4, 1, 7, 7))
    out = ops.conv2d(Tensor(x), Tensor(w), padding=3, pad_mode="reflect", groups=4).data
    for c in range(4):
        ref = correlate(np.pad(x[0, c], 3, mode="reflect"), w[c, 0], mode="valid")
        np.testing.assert_allclose(out[0, c], ref, atol=1e-12)


def test_grouped_conv_is_block_diagonal(rng):
    x = rng.normal(size=(1, 4, 5, 5))
    w = rng.normal(size=(6, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=2).data
    a = ops.conv2d(Tensor(x[:, :2]), Tensor(w[:3]), padding=1).data
    b = ops.conv2d(Tensor(x[:, 2:]), Tensor(w[3:]), padding=1).data
    np.testing.assert_allclose(out, np.concatenate([a, b], axis=1), atol=1e-12)


def test_conv_errors(rng):
    x = Tensor(rng.random((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(rng.random((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(rng.random((2, 3, 3, 3))), padding=4, pad_mode="reflect")
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(rng.random((2, 1, 3, 3))), groups=2)


@given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(3, 9), w=st.integers(3, 9),
       k=st.sampled_from([1, 3]), s=st.integers(1, 2), o=st.integers(1, 4))
def test_conv_shape_contract(n, c, h, w, k, s, o):
    x = Tensor(np.ones((n, c, h, w), np.float32))
    wt = Tensor(np.ones((o, c, k, k), np.float32))
    p = k // 2
    out = ops.conv2d(x, wt, stride=s, padding=p, pad_mode="reflect")
    assert out.shape == (n, o, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


# -- dense / activations / pooling ---------------------------------------------

def test_dense_examples():
    y = ops.dense(Tensor(np.array([[1.0, 2.0, 3.0]])), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, [[1, 2, 3]])
    y = ops.dense(Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([[1.0, -1.0]])), Tensor(np.array([0.5])))
    np.testing.assert_allclose(y.data, [[0.5]])
    assert ops.dense(Tensor(np.ones((2, 4))), Tensor(np.ones((8, 4)))).shape == (2, 8)
    with pytest.raises(ValueError):
        ops.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((8, 4))))


def test_activation_values():
    z = Tensor(np.zeros((1, 1)))
    assert ops.activation(z, "gelu").data[0, 0] == 0.0
    assert ops.activation(z, "sigmoid").data[0, 0] == 0.5
    assert abs(ops.gelu(Tensor(np.ones((1, 1)))).data[0, 0] - 0.8413447460685429) < 1e-5
    with pytest.raises(ValueError):
        ops.activation(z, "relu")


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_gelu_odd_part_identity(xs):
    x = np.array(xs)
    diff = ops.gelu(Tensor(x)).data - ops.gelu(Tensor(-x)).data
    np.testing.assert_allclose(diff, x, atol=1e-5)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_sigmoid_open_interval(xs):
    y = ops.sigmoid(Tensor(np.array(xs, np.float32))).data
    assert np.all(y > 0) and np.all(y < 1)


def test_global_avg_pool():
    assert ops.global_avg_pool(Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))).data.item() == 2.5
    c = ops.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.75))).data
    np.testing.assert_array_equal(c, np.full((2, 3, 1, 1), 1.75))
    assert ops.global_avg_pool(Tensor(np.ones((4, 64, 16, 16)))).shape == (4, 64, 1, 1)
    with pytest.raises(ValueError):
        ops.global_avg_pool(Tensor(np.ones((1, 2, 0, 3))))


# -- pixel shuffle --------------------------------------------------------------

def test_pixel_shuffle_examples():
    assert ops.pixel_shuffle(Tensor(np.ones((1, 16, 2, 2))), 4).shape == (1, 1, 8, 8)
    out = ops.pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)), 2).data
    np.testing.assert_array_equal(out[0, 0], [[1, 2], [3, 4]])
    with pytest.raises(ValueError):
        ops.pixel_shuffle(Tensor(np.ones((1, 6, 2, 2))), 2)


@given(c=st.integers(1, 3), r=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4),
       seed=st.integers(0, 2 ** 16))
def test_unshuffle_inverts_shuffle(c, r, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(2, c * r * r, h, w)).astype(np.float32)
    back = ops.pixel_unshuffle(ops.pixel_shuffle(Tensor(x), r), r).data
    assert np.array_equal(back, x)


# -- batch norm ------------------------------------------------------------------

def test_batch_norm_train_stats(rng):
    bn = BatchNorm1d(5)
    y = bn(Tensor(rng.normal(3.0, 2.0, size=(64, 5)))).data
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-3)


def test_batch_norm_fixed_point(rng):
    x = rng.normal(size=(32, 4))
    x = (x - x.mean(0)) / x.std(0)
    y = BatchNorm1d(4)(Tensor(x)).data
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_batch_norm_eval_affine():
    bn = BatchNorm1d(1)
    bn.gamma.data[...] = 2.0
    bn.beta.data[...] = 1.0
    bn.eval()
    assert abs(bn(Tensor(np.array([[0.5]]))).data.item() - 2.0) < 1e-4


def test_batch_norm_needs_two_rows():
    with pytest.raises(ValueError):
        BatchNorm1d(3)(Tensor(np.ones((1, 3))))


def test_batch_norm_running_update(rng):
    bn = BatchNorm1d(2)
    x = rng.normal(size=(10, 2))
    bn(Tensor(x))
    np.testing.assert_allclose(bn._buffers["running_mean"], 0.1 * x.mean(0), rtol=1e-5)
    np.testing.assert_allclose(bn._buffers["running_var"], 0.9 + 0.1 * x.var(0, ddof=1), rtol=1e-5)


# -- backward ---------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(ops.sum_all(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_half_square():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.scale(ops.sum_all(ops.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, [1, -2])


def test_detached_branch_gets_no_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    backward(ops.sum_all(ops.mul(x, y.detach())))
    np.testing.assert_array_equal(x.grad, [3, 4])
    assert y.grad is None


def test_grads_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ops.sum_all(x))
    backward(ops.sum_all(x))
    np.testing.assert_array_equal(x.grad, [2, 2])


def test_backward_errors():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(ValueError):
        backward(ops.scale(x, 2.0))
    loss = ops.sum_all(x)
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_no_grad_records_nothing():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with no_grad():
        y = ops.scale(x, 2.0)
    assert not y.requires_grad


def test_non_finite_is_hard_error():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        ops.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))


def test_repeated_forward_bit_identical(rng):
    block = ConvNeXtBlock(4, rng)
    x = Tensor(rng.random((1, 4, 8, 8)).astype(np.float32))
    with no_grad():
        assert np.array_equal(block(x).data, block(x).data)


# -- gradient checks ----------------------------------------------------------------

def test_grad_check_rejects_bad_eps(rng):
    x = f64(rng, 3)
    with pytest.raises(ValueError):
        grad_check(lambda: ops.sum_all(x), [x], eps=1.0)


def test_grad_check_flags_wrong_gradient(rng):
    from cdcl.tensor import make_result
    x = f64(rng, 4)

    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    assert grad_check(lambda: ops.sum_all(bad_square(x)), [x]) > 0.4


@pytest.mark.parametrize("seed", range(3))
def test_grad_dense_gelu_sigmoid_chain(seed):
    rng = np.random.default_rng(seed)
    x, W, b = f64(rng, 5, 4), f64(rng, 3, 4), f64(rng, 3)
    f = lambda: probe(ops.sigmoid(ops.gelu(ops.dense(x, W, b))), seed)
    assert grad_check(f, [x, W, b], seed=seed) <= 1e-3


def test_grad_conv_reflect_stride_two(rng):
    x, w, b = f64(rng, 2, 3, 8, 8), f64(rng, 4, 3, 3, 3), f64(rng, 4)
    f = lambda: probe(ops.conv2d(x, w, b, stride=2, padding=1, pad_mode="reflect"))
    assert grad_check(f, [x, w, b]) <= 1e-3


def test_grad_check_restores_dtype(rng):
    x = Tensor(rng.random(3).astype(np.float32), requires_grad=True)
    grad_check(lambda: ops.sum_all(ops.mul(x, x)), [x])
    assert x.dtype == np.float32 and x.grad is None
    assert math.isfinite(float(x.data.sum()))
