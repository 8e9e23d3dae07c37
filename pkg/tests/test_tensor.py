import numpy as np
import pytest

from stereonas import tensor as T

from oracles import finite_diff, max_rel_err


def test_sum_backward_is_ones():
    x = T.Tensor(np.random.default_rng(0).normal(size=(3, 4, 2)), requires_grad=True)
    loss = T.tsum(x)
    T.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 4, 2)))


def test_half_sum_of_squares_backward_is_x():
    x = T.Tensor(np.random.default_rng(1).normal(size=(5, 3)), requires_grad=True)
    loss = T.scale(T.tsum(x * x), 0.5)
    T.backward(loss)
    assert np.allclose(x.grad, x.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x + x)


def test_backward_accumulates_until_zeroed():
    x = T.Tensor(np.ones(4), requires_grad=True)
    for _ in range(2):
        T.backward(T.tsum(x))
    assert np.array_equal(x.grad, 2 * np.ones(4))
    x.zero_grad()
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones(4))


def test_shared_operand_grad():
    # y = x + x must give grad 2, not corrupt shared buffers
    x = T.Tensor(np.arange(3.0), requires_grad=True)
    T.backward(T.tsum(x + x))
    assert np.array_equal(x.grad, 2 * np.ones(3))


def test_broadcast_mul_unbroadcasts_grad():
    rng = np.random.default_rng(2)
    a = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 1)), requires_grad=True)

    def f(av, bv):
        return float((av * bv).sum())

    T.backward(T.tsum(a * b))
    fd_a = finite_diff(f, [a.data.copy(), b.data.copy()], 0)
    fd_b = finite_diff(f, [a.data.copy(), b.data.copy()], 1)
    assert max_rel_err(a.grad, fd_a) < 1e-8
    assert max_rel_err(b.grad, fd_b) < 1e-8


def test_concat_narrow_pad_index_roundtrip_grads():
    rng = np.random.default_rng(3)
    a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    cat = T.concat([a, b], axis=1)
    sl = T.narrow(cat, 1, 2, 4)          # covers last col of a, first 3 of b
    padded = T.pad_axis(sl, 0, 1, 1)
    T.backward(T.tsum(padded * padded))
    assert a.grad[:, :2].sum() == 0 and np.all(a.grad[:, 2] != 0)
    assert np.all(b.grad[:, 3:] == 0)


def test_no_grad_blocks_recording():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_mean_and_reshape_transpose():
    rng = np.random.default_rng(4)
    x = T.Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    y = T.transpose(T.reshape(x, (3, 4)), (1, 0))
    T.backward(T.tmean(y))
    assert np.allclose(x.grad, np.full((2, 6), 1.0 / 12))
