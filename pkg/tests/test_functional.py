import numpy as np
import pytest

from stereonas import functional as F
from stereonas import tensor as T

from oracles import (conv2d_loops, conv3d_loops, depthwise2d_loops,
                     finite_diff, interpolate_formula, max_rel_err)


def _t(arr, rg=False):
    return T.Tensor(arr, requires_grad=rg)


# ---- conv2d ----------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 1, 1))
    spec = F.conv_spec(1, 1, 0, 1, 1, nd=2)
    out = F.conv2d(_t(x), spec, _t(w))
    assert np.array_equal(out.data, x)


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.zeros((4, 3, 3, 3))
    spec = F.conv_spec(3, 1, 1, 3, 4, nd=2)
    out = F.conv2d(_t(x), spec, _t(w))
    assert np.all(out.data == 0)


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    spec = F.conv_spec(3, 1, 1, 2, 3, nd=2)
    out = F.conv2d(_t(x), spec, _t(w))
    ref = conv2d_loops(x, w, stride=1, pad=1)
    assert np.max(np.abs(out.data - ref)) < 1e-12


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (3, 2, 1)])
def test_conv2d_stride_pad_dilation_against_loops(stride, pad, dil):
    rng = np.random.default_rng(stride * 7 + pad * 3 + dil)
    x = rng.normal(size=(2, 2, 9, 8))
    w = rng.normal(size=(3, 2, 3, 3))
    spec = F.conv_spec(3, stride, pad, 2, 3, nd=2, dilation=dil)
    out = F.conv2d(_t(x), spec, _t(w))
    ref = conv2d_loops(x, w, stride=stride, pad=pad, dilation=dil)
    assert out.data.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_conv2d_output_extent_formula():
    spec = F.conv_spec(3, 2, 1, 1, 1, nd=2)
    x = _t(np.zeros((1, 1, 7, 9)))
    out = F.conv2d(x, spec, _t(np.zeros((1, 1, 3, 3))))
    assert out.shape == (1, 1, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv2d_rejects_weight_spec_mismatch():
    spec = F.conv_spec(3, 1, 1, 2, 4, nd=2)
    with pytest.raises(ValueError) as err:
        F.conv2d(_t(np.zeros((1, 2, 4, 4))), spec, _t(np.zeros((4, 2, 5, 5))))
    assert "(4, 2, 5, 5)" in str(err.value) and "(4, 2, 3, 3)" in str(err.value)


def test_conv2d_rejects_too_small_input():
    spec = F.conv_spec(3, 1, 0, 1, 1, nd=2)
    with pytest.raises(ValueError, match="smaller than"):
        F.conv2d(_t(np.zeros((1, 1, 2, 2))), spec, _t(np.zeros((1, 1, 3, 3))))


def test_conv2d_linear_in_input_and_weights():
    rng = np.random.default_rng(2)
    x1, x2 = rng.normal(size=(2, 1, 2, 6, 6))
    w = rng.normal(size=(2, 2, 3, 3))
    spec = F.conv_spec(3, 1, 1, 2, 2, nd=2)
    a, b = 0.37, -1.7
    mix = F.conv2d(_t(a * x1 + b * x2), spec, _t(w)).data
    sep = a * F.conv2d(_t(x1), spec, _t(w)).data + b * F.conv2d(_t(x2), spec, _t(w)).data
    assert np.max(np.abs(mix - sep)) < 1e-10
    w1, w2 = rng.normal(size=(2, 2, 2, 3, 3))
    mix = F.conv2d(_t(x1), spec, _t(a * w1 + b * w2)).data
    sep = a * F.conv2d(_t(x1), spec, _t(w1)).data + b * F.conv2d(_t(x1), spec, _t(w2)).data
    assert np.max(np.abs(mix - sep)) < 1e-10


# ---- conv3d ----------------------------------------------------------------


def test_conv3d_identity_kernel():
    x = np.arange(8.0).reshape(1, 1, 2, 2, 2)
    spec = F.conv_spec(1, 1, 0, 1, 1, nd=3)
    out = F.conv3d(_t(x), spec, _t(np.ones((1, 1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv3d_zero_kernel():
    x = np.random.default_rng(3).normal(size=(1, 2, 3, 3, 3))
    spec = F.conv_spec(3, 1, 1, 2, 2, nd=3)
    out = F.conv3d(_t(x), spec, _t(np.zeros((2, 2, 3, 3, 3))))
    assert np.all(out.data == 0)


def test_conv3d_matches_nested_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 4, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3, 3))
    spec = F.conv_spec(3, 1, 1, 1, 2, nd=3)
    out = F.conv3d(_t(x), spec, _t(w))
    ref = conv3d_loops(x, w, stride=1, pad=1)
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_depthwise_conv_matches_loops():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    spec = F.conv_spec(3, 1, 2, 3, 3, nd=2, dilation=2)
    out = F.conv_depthwise(_t(x), spec, _t(w))
    ref = depthwise2d_loops(x, w, stride=1, pad=2, dilation=2)
    assert np.max(np.abs(out.data - ref)) < 1e-12


# ---- gradients --------------------------------------------------------------


def _gradcheck(make_loss, arrays, tol=1e-4):
    """Compare analytic grads of make_loss against central differences."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = make_loss(*tensors)
    T.backward(loss)

    def scalar(*arrs):
        with T.no_grad():
            return make_loss(*[T.Tensor(a) for a in arrs]).item()

    for k, t in enumerate(tensors):
        fd = finite_diff(scalar, [a.copy() for a in arrays], k)
        assert max_rel_err(t.grad, fd) < tol, f"gradient mismatch on input {k}"


def test_conv2d_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    spec = F.conv_spec(3, 2, 1, 2, 3, nd=2)
    _gradcheck(lambda xt, wt: T.tsum(F.conv2d(xt, spec, wt) * F.conv2d(xt, spec, wt)),
               [x, w])


def test_conv3d_gradients():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 3, 4, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    spec = F.conv_spec(3, 1, 1, 2, 2, nd=3)
    _gradcheck(lambda xt, wt: T.tsum(F.conv3d(xt, spec, wt) * F.conv3d(xt, spec, wt)),
               [x, w])


def test_depthwise_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 3, 5, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    spec = F.conv_spec(3, 1, 1, 3, 3, nd=2)
    _gradcheck(lambda xt, wt: T.tsum(F.conv_depthwise(xt, spec, wt)
                                     * F.conv_depthwise(xt, spec, wt)), [x, w])


def test_channel_norm_standardizes_each_slice():
    rng = np.random.default_rng(30)
    x = rng.normal(size=(2, 3, 6, 5)) * 4 + 7
    out = F.channel_norm(_t(x))
    mu = out.data.mean(axis=(2, 3))
    var = out.data.var(axis=(2, 3))
    assert np.max(np.abs(mu)) < 1e-12
    assert np.max(np.abs(var - 1.0)) < 1e-4  # eps slightly deflates variance


def test_channel_norm_constant_slice_is_zero_and_finite():
    out = F.channel_norm(_t(np.full((1, 2, 3, 3), 5.0)))
    assert np.all(out.data == 0)


def test_channel_norm_gradients():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(1, 2, 4, 3))
    tgt = rng.normal(size=(1, 2, 4, 3))
    _gradcheck(lambda xt: T.tsum((F.channel_norm(xt) - T.Tensor(tgt))
                                 * (F.channel_norm(xt) - T.Tensor(tgt))), [x])


def test_affine_gradients():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 4, 3, 3))
    s = rng.normal(size=4)
    b = rng.normal(size=4)
    _gradcheck(lambda xt, st, bt: T.tsum(F.channel_affine(xt, st, bt)
                                         * F.channel_affine(xt, st, bt)), [x, s, b])


def test_leaky_relu_gradients():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 5)) + 0.05  # keep away from the kink
    _gradcheck(lambda xt: T.tsum(F.leaky_relu(xt) * F.leaky_relu(xt)), [x])


def test_softmax_conv_composition_gradient():
    # loss through conv2d + softmax, checked against finite differences
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    spec = F.conv_spec(3, 1, 1, 2, 2, nd=2)
    tgt = rng.normal(size=(1, 2, 4, 4))

    def loss(xt, wt):
        p = F.softmax(F.conv2d(xt, spec, wt), axis=1)
        d = p - T.Tensor(tgt)
        return T.tsum(d * d)

    _gradcheck(loss, [x, w])


def test_pool_gradients():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 2, 5, 5))
    _gradcheck(lambda xt: T.tsum(F.avg_pool(xt) * F.avg_pool(xt)), [x])
    _gradcheck(lambda xt: T.tsum(F.max_pool(xt) * F.max_pool(xt)), [x])


def test_interpolate_gradients():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(1, 2, 6, 4))
    _gradcheck(lambda xt: T.tsum(F.interpolate(xt, (3, 7))
                                 * F.interpolate(xt, (3, 7))), [x])


# ---- softmax ----------------------------------------------------------------


def test_softmax_basic_values():
    out = F.softmax(_t(np.array([0.0, 0.0])), 0)
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)
    out = F.softmax(_t(np.array([np.log(2.0), 0.0])), 0)
    assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-12)


def test_softmax_large_logits_stable():
    out = F.softmax(_t(np.array([1000.0, 0.0])), 0)
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [1.0, 0.0], atol=1e-300)


def test_softmax_is_probability_vector():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 7, 2)) * 10
    out = F.softmax(_t(x), 1)
    assert np.all(out.data >= 0)
    assert np.max(np.abs(out.data.sum(axis=1) - 1)) < 1e-12


def test_softmax_shift_invariant():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(5,))
    a = F.softmax(_t(x), 0).data
    b = F.softmax(_t(x + 123.456), 0).data
    assert np.max(np.abs(a - b)) < 1e-12


# ---- interpolate ------------------------------------------------------------


def test_interpolate_identity_when_same_size():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(2, 3, 4, 5))
    out = F.interpolate(_t(x), (4, 5))
    assert np.array_equal(out.data, x)


def test_interpolate_midpoint_upsample():
    a, b = 1.25, -3.5
    x = np.array([a, b]).reshape(1, 1, 1, 2)
    out = F.interpolate(_t(x), (1, 3))
    assert np.allclose(out.data.ravel(), [a, (a + b) / 2, b], atol=1e-15)


def test_interpolate_matches_sampling_formula_oracle():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(1, 1, 6, 6))
    out = F.interpolate(_t(x), (3, 3))
    ref = interpolate_formula(x, (3, 3))
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_interpolate_trilinear_matches_oracle():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(1, 2, 4, 5, 3))
    for target in [(2, 3, 5), (7, 2, 1), (1, 1, 2)]:
        out = F.interpolate(_t(x), target)
        ref = interpolate_formula(x, target)
        assert np.max(np.abs(out.data - ref)) < 1e-12, target


def test_interpolate_rejects_zero_extent():
    with pytest.raises(ValueError, match=">= 1"):
        F.interpolate(_t(np.zeros((1, 1, 4, 4))), (0, 2))


# ---- pooling ----------------------------------------------------------------


def test_avg_pool_uniform_input_interior():
    x = np.ones((1, 1, 5, 5))
    out = F.avg_pool(_t(x), 3)
    # interior windows see nine ones; the border shares zeros from padding
    assert np.allclose(out.data[0, 0, 1:4, 1:4], 1.0)
    assert np.allclose(out.data[0, 0, 0, 0], 4 / 9)


def test_max_pool_picks_window_max():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 2, 2] = 5.0
    out = F.max_pool(_t(x), 3)
    assert out.data[0, 0, 1, 1] == 5.0
    assert out.data[0, 0, 0, 0] == 0.0
