import numpy as np
import pytest

from stereonas import pipeline as P
from stereonas import tensor as T
from stereonas import trellis as TR
from stereonas.modules import SGD

from oracles import finite_diff, max_rel_err, soft_argmin_direct


def _t(a):
    return T.Tensor(a)


# ---- feature volume ---------------------------------------------------------


def test_volume_shift_slice_matches_definition():
    f_left = np.zeros((1, 1, 1, 3))
    f_right = np.array([[[[1.0, 2.0, 3.0]]]])
    vol = P.build_feature_volume(_t(f_left), _t(f_right), 2)
    # d=1 right half: [0, r0, r1]
    assert np.array_equal(vol.data[0, 1, 1, 0], [0.0, 1.0, 2.0])


def test_volume_definition_loop_oracle():
    rng = np.random.default_rng(0)
    fl = rng.normal(size=(2, 3, 4, 6))
    fr = rng.normal(size=(2, 3, 4, 6))
    vol = P.build_feature_volume(_t(fl), _t(fr), 3).data
    for n in range(2):
        for c in range(3):
            for d in range(3):
                for h in range(4):
                    for w in range(6):
                        assert vol[n, c, d, h, w] == fl[n, c, h, w]
                        want = fr[n, c, h, w - d] if w - d >= 0 else 0.0
                        assert vol[n, 3 + c, d, h, w] == want


def test_volume_d0_slice_is_plain_concat():
    rng = np.random.default_rng(1)
    fl, fr = rng.normal(size=(2, 1, 2, 3, 4))
    vol = P.build_feature_volume(_t(fl), _t(fr), 2).data
    assert np.array_equal(vol[:, :2, 0], fl)
    assert np.array_equal(vol[:, 2:, 0], fr)


def test_volume_zero_right_gives_zero_right_half():
    fl = np.ones((1, 2, 3, 5))
    vol = P.build_feature_volume(_t(fl), _t(np.zeros((1, 2, 3, 5))), 4).data
    assert np.all(vol[:, 2:] == 0)


def test_volume_left_half_reconstruction_invariant():
    rng = np.random.default_rng(2)
    fl = rng.normal(size=(1, 3, 4, 5))
    fr = rng.normal(size=(1, 3, 4, 5))
    for dprime in (1, 3, 5):
        vol = P.build_feature_volume(_t(fl), _t(fr), dprime).data
        assert np.isclose(np.abs(vol[:, :3]).sum(), dprime * np.abs(fl).sum())


def test_volume_rejects_bad_shift_count():
    fl = np.zeros((1, 1, 2, 4))
    with pytest.raises(ValueError, match="shift count"):
        P.build_feature_volume(_t(fl), _t(fl), 5)


def test_volume_gradients():
    rng = np.random.default_rng(3)
    fl = rng.normal(size=(1, 2, 3, 4))
    fr = rng.normal(size=(1, 2, 3, 4))
    tl, tr = T.Tensor(fl, requires_grad=True), T.Tensor(fr, requires_grad=True)
    out = P.build_feature_volume(tl, tr, 3)
    T.backward(T.tsum(out * out))

    def loss(a, b):
        with T.no_grad():
            v = P.build_feature_volume(_t(a), _t(b), 3)
            return T.tsum(v * v).item()

    assert max_rel_err(tl.grad, finite_diff(loss, [fl.copy(), fr.copy()], 0)) < 1e-6
    assert max_rel_err(tr.grad, finite_diff(loss, [fl.copy(), fr.copy()], 1)) < 1e-6


# ---- projection ---------------------------------------------------------------


def test_project_one_hot_limit():
    cost = np.zeros((1, 1, 10, 2, 2))
    cost[:, :, 5] = -1e6
    disp = P.project_disparity(_t(cost), (2, 2), 10)
    assert np.max(np.abs(disp.data - 5.0)) < 1e-6


def test_project_uniform_cost_gives_midpoint():
    disp = P.project_disparity(_t(np.zeros((1, 1, 10, 3, 3))), (3, 3), 10)
    assert np.max(np.abs(disp.data - 4.5)) < 1e-12


def test_project_matches_direct_formula():
    rng = np.random.default_rng(4)
    cost = rng.normal(size=(1, 1, 6, 1, 1))
    disp = P.project_disparity(_t(cost), (1, 1), 6)
    ref = soft_argmin_direct(cost[0, 0, :, 0, 0])
    assert abs(disp.data[0, 0, 0] - ref) < 1e-12


def test_project_output_bounds_and_shift_invariance():
    rng = np.random.default_rng(5)
    cost = rng.normal(size=(2, 1, 4, 2, 3)) * 3
    disp = P.project_disparity(_t(cost), (4, 6), 12)
    assert disp.shape == (2, 4, 6)
    assert np.all(disp.data >= 0) and np.all(disp.data <= 11)
    shifted = P.project_disparity(_t(cost + 17.0), (4, 6), 12)
    assert np.max(np.abs(disp.data - shifted.data)) < 1e-10


def test_project_upsamples_reduced_cost():
    cost = np.zeros((1, 1, 4, 2, 4))
    disp = P.project_disparity(_t(cost), (6, 12), 12)
    assert disp.shape == (1, 6, 12)


def test_project_disparity_axis_recovers_pixel_units():
    # a sharp minimum at source bin b of a 1/s-scale volume must project to
    # disparity b*s (bin units are full-resolution pixels, not stretched)
    for b, want in ((0, 0.0), (1, 3.0), (2, 6.0)):
        cost = np.zeros((1, 1, 4, 2, 2))
        cost[0, 0, b] = -1e4
        disp = P.project_disparity(_t(cost), (2, 2), 12)
        assert np.max(np.abs(disp.data - want)) < 0.35, (b, disp.data[0, 0, 0])


def test_project_disparity_axis_matrix_rows_sum_to_one():
    m = P._disparity_axis_matrix(4, 12)
    assert m.shape == (12, 4)
    assert np.allclose(m.sum(axis=1), 1.0)
    assert m[0, 0] == 1.0 and m[3, 1] == 1.0  # bins land on exact multiples
    assert np.all(m[10:] == m[9])             # beyond last shift: replicate


def test_project_rejects_nonfinite():
    cost = np.zeros((1, 1, 2, 2, 2))
    cost[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        P.project_disparity(_t(cost), (2, 2), 2)


# ---- smooth L1 ------------------------------------------------------------------


def test_smooth_l1_closed_forms():
    gt = np.zeros((1, 2, 2))
    mask = np.ones((1, 2, 2), bool)
    assert P.smooth_l1_loss(_t(gt), gt, mask).item() == 0.0
    assert P.smooth_l1_loss(_t(gt + 1.0), gt, mask).item() == pytest.approx(0.5)
    assert P.smooth_l1_loss(_t(gt + 2.0), gt, mask).item() == pytest.approx(1.5)


def test_smooth_l1_continuous_and_c1_at_knee():
    def ell(x):
        return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5

    eps = 1e-7
    assert abs(ell(1 - 1e-12) - ell(1 + 1e-12)) < 1e-9
    left_slope = (ell(1 - eps) - ell(1 - 2 * eps)) / eps
    right_slope = (ell(1 + 2 * eps) - ell(1 + eps)) / eps
    assert abs(left_slope - 1.0) < 1e-6 and abs(right_slope - 1.0) < 1e-6
    left_slope = (ell(-1 + eps) - ell(-1 + 2 * eps)) / eps
    assert abs(left_slope - (-1.0) * -1) < 1e-6  # magnitude 1 approaching -1


def test_smooth_l1_respects_mask():
    gt = np.zeros((1, 2, 2))
    pred = np.array([[[10.0, 0.0], [0.0, 0.0]]])
    mask = np.array([[[False, True], [True, True]]])
    assert P.smooth_l1_loss(_t(pred), gt, mask).item() == 0.0


def test_smooth_l1_empty_mask_rejected():
    gt = np.zeros((1, 2, 2))
    with pytest.raises(ValueError, match="mask"):
        P.smooth_l1_loss(_t(gt), gt, np.zeros((1, 2, 2), bool))


def test_smooth_l1_gradient():
    rng = np.random.default_rng(6)
    pred = rng.normal(size=(1, 3, 3)) * 2
    gt = rng.normal(size=(1, 3, 3))
    mask = rng.random((1, 3, 3)) > 0.3
    t = T.Tensor(pred, requires_grad=True)
    T.backward(P.smooth_l1_loss(t, gt, mask))

    def loss(p):
        with T.no_grad():
            return P.smooth_l1_loss(_t(p), gt, mask).item()

    assert max_rel_err(t.grad, finite_diff(loss, [pred.copy()], 0)) < 1e-6


# ---- full pipeline ----------------------------------------------------------------


def _toy_net(seed=0):
    cfg = TR.NetworkConfig(feature_layers=2, matching_layers=2,
                           feature_filters=2, matching_filters=2,
                           max_disparity=12)
    return TR.Supernet(cfg, seed=seed), cfg


def test_full_forward_shape_chain():
    net, cfg = _toy_net()
    rng = np.random.default_rng(7)
    left = rng.random((1, 3, 24, 48))
    f = net.extract_features(T.Tensor(left))
    assert f.shape == (1, 6, 8, 16)           # 1/3 resolution exit
    vol = P.build_feature_volume(f, f, cfg.max_disparity // net.feature_scale)
    assert vol.shape == (1, 12, 4, 8, 16)     # D' = 12/3 = 4


def test_full_forward_deterministic():
    rng = np.random.default_rng(8)
    left = rng.random((1, 3, 24, 48))
    right = rng.random((1, 3, 24, 48))
    gt = rng.random((1, 24, 48)) * 3
    valid = np.ones((1, 24, 48), bool)
    losses = []
    for _ in range(2):
        net, cfg = _toy_net(seed=42)
        _d, loss = P.full_forward(net, left, right, gt, valid, cfg.max_disparity)
        losses.append(loss.item())
    assert losses[0] == losses[1]


def test_full_forward_gradients_match_finite_differences():
    net, cfg = _toy_net(seed=1)
    rng = np.random.default_rng(9)
    left = rng.random((1, 3, 24, 48))
    right = rng.random((1, 3, 24, 48))
    gt = (rng.random((1, 24, 48)) * 3).round()
    valid = np.ones((1, 24, 48), bool)

    _d, loss = P.full_forward(net, left, right, gt, valid, cfg.max_disparity)
    T.backward(loss)

    named = dict(net.named_parameters())
    named.update(dict(net.arch.named()))
    picks = [("stem.conv1.w", (0, 0, 1, 1)), ("stem.conv2.scale", (1,)),
             ("cost_head.w", (0, 3, 0, 0, 0)), ("alpha.feature", (2, 1)),
             ("alpha.matching", (7, 0)), ("beta.feature.exit", (1,)),
             ("beta.matching.l2s1", (0,)),
             ("feature.grid.l1s0.cell.edges.0.0.w", (0, 1, 2, 2))]
    eps = 1e-4
    for name, idx in picks:
        t = named[name]
        analytic = t.grad[idx]
        orig = t.data[idx]
        t.data[idx] = orig + eps
        with T.no_grad():
            up = P.full_forward(net, left, right, gt, valid,
                                cfg.max_disparity)[1].item()
        t.data[idx] = orig - eps
        with T.no_grad():
            dn = P.full_forward(net, left, right, gt, valid,
                                cfg.max_disparity)[1].item()
        t.data[idx] = orig
        fd = (up - dn) / (2 * eps)
        err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
        assert err < 1e-3, (name, analytic, fd)


def test_zero_disparity_pair_fits_toward_zero():
    # duplicate left=right with gt=0: a few steps reduce the loss
    net, cfg = _toy_net(seed=2)
    rng = np.random.default_rng(10)
    img = rng.random((1, 3, 24, 48))
    gt = np.zeros((1, 24, 48))
    valid = np.ones((1, 24, 48), bool)
    opt = SGD(list(net.named_parameters()), momentum=0.9, weight_decay=0.0)
    losses = []
    for _step in range(6):
        opt.zero_grad()
        net.arch.zero_grad()
        _d, loss = P.full_forward(net, img, img, gt, valid, cfg.max_disparity)
        losses.append(loss.item())
        T.backward(loss)
        opt.step(lr=0.05)
    assert losses[-1] < losses[0]
