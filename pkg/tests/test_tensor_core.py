"""Tensor primitives: forward semantics, gradients, and invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarflow import ops
from lidarflow.autodiff import DiffGraph, Tensor4, backward
from lidarflow.errors import (EmptyMaskError, GeometryError, ReentrancyError,
                              ShapeError)
from lidarflow.optim import AdamState, adam_step, he_init


def t4(arr, requires_grad=False):
    return Tensor4(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def rand_t(rng, shape, requires_grad=False):
    return Tensor4(rng.standard_normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def conv2d_bruteforce(x, w, b, stride, pad):
    """Direct-summation convolution, no im2col: the reference semantics."""
    sy, sx = stride
    pt, pb, pl, pr = pad
    bs, ci, h, ww = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2
    he, we = h + pt + pb, ww + pl + pr
    xp = np.zeros((bs, ci, he, we))
    xp[:, :, max(0, pt):he - max(0, pb), max(0, pl):we - max(0, pr)] = \
        x[:, :, max(0, -pt):h - max(0, -pb), max(0, -pl):ww - max(0, -pr)]
    ho = (he - kh) // sy + 1
    wo = (we - kw) // sx + 1
    y = np.zeros((bs, co, ho, wo))
    for n in range(bs):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * sy + u, j * sx + v] * w[o, c, u, v]
                    y[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return y


def linear_op_matrix(fn, in_shape, out_size):
    """Materialize a linear map as a dense matrix by probing basis vectors."""
    n = int(np.prod(in_shape))
    mat = np.zeros((out_size, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        mat[:, k] = fn(e.reshape(in_shape)).ravel()
    return mat


def numeric_grad(fn, x, h=1e-5):
    """Central finite differences of a scalar-valued fn at x (64-bit)."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + h
        fp = fn(x)
        flat[k] = keep - h
        fm = fn(x)
        flat[k] = keep
        gf[k] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_all_ones_sums_kernel(self):
        x = t4(np.ones((1, 1, 3, 3)))
        w = t4(np.ones((1, 1, 3, 3)))
        y = ops.conv2d(x, w, stride=1, pad=0)
        assert y.dims == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand_t(rng, (1, 1, 5, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        y = ops.conv2d(x, t4(k), stride=1, pad=(1, 1, 1, 1))
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = ops.conv2d(t4(x), t4(w), t4(b.reshape(1, 3, 1, 1)),
                         stride=(2, 2), pad=(1, 1, 1, 1))
        want = conv2d_bruteforce(x, w, b, (2, 2), (1, 1, 1, 1))
        assert np.max(np.abs(got.data - want)) < 1e-12

    def test_negative_padding_crops(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 6, 8))
        w = rng.standard_normal((1, 1, 3, 3))
        got = ops.conv2d(t4(x), t4(w), stride=1, pad=(-1, 0, 0, -2))
        want = conv2d_bruteforce(x[:, :, 1:, :-2], w, None, (1, 1), (0, 0, 0, 0))
        assert np.max(np.abs(got.data - want)) < 1e-12

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.conv2d(t4(np.ones((1, 3, 4, 4))), t4(np.ones((1, 2, 3, 3))))

    def test_nonpositive_output_names_axis(self):
        with pytest.raises(GeometryError, match="width"):
            ops.conv2d(t4(np.ones((1, 1, 8, 2))), t4(np.ones((1, 1, 3, 3))))


class TestDeconv2d:
    def test_single_site_stamps_kernel(self):
        rng = np.random.default_rng(3)
        k = rng.standard_normal((1, 1, 3, 3))
        y = ops.deconv2d(t4(np.ones((1, 1, 1, 1))), t4(k), stride=1, pad=0)
        assert y.dims == (1, 1, 3, 3)
        np.testing.assert_allclose(y.data, k)

    def test_non_overlapping_stamps(self):
        y = ops.deconv2d(t4(np.ones((1, 1, 2, 2))), t4(np.ones((1, 1, 2, 2))),
                         stride=2, pad=0)
        assert y.dims == (1, 1, 4, 4)
        np.testing.assert_array_equal(y.data, np.ones((1, 1, 4, 4)))

    def test_matches_conv_adjoint_oracle(self):
        # deconv2d must equal the transpose of the conv2d linear map.
        rng = np.random.default_rng(4)
        w = rng.standard_normal((3, 2, 3, 3))
        in_shape = (1, 2, 5, 7)  # (n - k) divisible by stride: exact geometry
        conv_fn = lambda a: ops.conv2d(t4(a), t4(w), stride=(2, 2), pad=0).data
        out_shape = conv_fn(np.zeros(in_shape)).shape
        amat = linear_op_matrix(conv_fn, in_shape, int(np.prod(out_shape)))
        y = rng.standard_normal(out_shape)
        want = (amat.T @ y.ravel()).reshape(in_shape)
        got = ops.deconv2d(t4(y), t4(w), stride=(2, 2), pad=0)
        assert np.max(np.abs(got.data - want)) < 1e-12

    def test_adjointness_inner_products(self):
        # <conv(x), y> == <x, deconv(y)> with shared weight, pad 0, stride s.
        rng = np.random.default_rng(5)
        for stride in [(1, 1), (2, 2), (2, 1)]:
            x = rng.standard_normal((2, 3, 7, 9))
            w = rng.standard_normal((4, 3, 3, 3))
            cy = ops.conv2d(t4(x), t4(w), stride=stride, pad=0)
            y = rng.standard_normal(cy.dims)
            dx = ops.deconv2d(t4(y), t4(w), stride=stride, pad=0)
            lhs = float(np.sum(cy.data * y))
            rhs = float(np.sum(x * dx.data))
            assert abs(lhs - rhs) < 1e-10


class TestLeakyRelu:
    @pytest.mark.parametrize("x,slope,want", [
        (2.0, 0.1, 2.0),
        (-2.0, 0.1, -0.2),
        (0.0, 0.1, 0.0),
    ])
    def test_pointwise(self, x, slope, want):
        y = ops.leaky_relu(t4(np.full((1, 1, 1, 1), x)), slope)
        assert y.item() == pytest.approx(want)

    def test_slope_range_enforced(self):
        with pytest.raises(ValueError):
            ops.leaky_relu(t4(np.zeros((1, 1, 1, 1))), slope=1.5)


class TestConcat:
    def test_channel_counts(self):
        y = ops.concat_channels(t4(np.ones((1, 2, 4, 4))), t4(np.zeros((1, 3, 4, 4))))
        assert y.dims == (1, 5, 4, 4)
        np.testing.assert_array_equal(y.data[:, :2], 1.0)
        np.testing.assert_array_equal(y.data[:, 2:], 0.0)

    def test_empty_side_is_identity(self):
        rng = np.random.default_rng(6)
        x = rand_t(rng, (1, 3, 2, 2))
        y = ops.concat_channels(x, t4(np.zeros((1, 0, 2, 2))))
        np.testing.assert_array_equal(y.data, x.data)

    def test_gradient_routes_to_both(self):
        a = t4(np.zeros((1, 2, 3, 3)), requires_grad=True)
        b = t4(np.zeros((1, 1, 3, 3)), requires_grad=True)
        backward(ops.sum_tensor(ops.concat_channels(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.concat_channels(t4(np.ones((1, 1, 2, 2))), t4(np.ones((1, 1, 3, 2))))


class TestBilinearUpsample:
    def test_constant_stays_constant(self):
        y = ops.bilinear_upsample2x(t4(np.full((1, 2, 3, 4), 7.5)))
        assert y.dims == (1, 2, 6, 8)
        np.testing.assert_allclose(y.data, 7.5)

    def test_two_sample_closed_form(self):
        y = ops.bilinear_upsample2x(t4(np.array([0.0, 2.0]).reshape(1, 1, 1, 2)))
        assert y.dims == (1, 1, 2, 4)
        for row in y.data[0, 0]:
            np.testing.assert_allclose(row, [0.0, 0.5, 1.5, 2.0])

    def test_convexity_of_neighbors(self):
        # Each output value must lie within the range of the source cells it
        # samples, per the stated (i + 0.5) / 2 - 0.5 clamped convention.
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 1, 6, 9))
        y = ops.bilinear_upsample2x(t4(x)).data

        def neighbors(i, n):
            src = (i + 0.5) / 2 - 0.5
            lo = int(np.clip(np.floor(src), 0, n - 1))
            hi = int(np.clip(np.floor(src) + 1, 0, n - 1))
            return lo, hi

        for i in range(12):
            for j in range(18):
                r0, r1 = neighbors(i, 6)
                c0, c1 = neighbors(j, 9)
                patch = x[0, 0][[r0, r0, r1, r1], [c0, c1, c0, c1]]
                assert patch.min() - 1e-12 <= y[0, 0, i, j] <= patch.max() + 1e-12


class TestAvgPool:
    def test_dense_block_mean(self):
        x = t4(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        y, mask = ops.avg_pool2x(x)
        assert mask is None
        assert y.item() == 2.5

    def test_sparse_single_valid_cell(self):
        x = t4(np.array([[1.0, 9.0], [9.0, 9.0]]).reshape(1, 1, 2, 2))
        valid = np.array([[True, False], [False, False]])
        y, mask = ops.avg_pool2x(x, valid)
        assert y.item() == 1.0
        assert mask.tolist() == [[True]]

    def test_all_invalid_block_is_sentinel(self):
        x = t4(np.full((1, 1, 2, 2), 3.0))
        y, mask = ops.avg_pool2x(x, np.zeros((2, 2), dtype=bool))
        assert y.item() == 0.0
        assert mask.tolist() == [[False]]

    def test_odd_dims_rejected(self):
        with pytest.raises(GeometryError):
            ops.avg_pool2x(t4(np.ones((1, 1, 3, 4))))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_dense_equals_sparse_when_all_valid(self, seed):
        rng = np.random.default_rng(seed)
        x = t4(rng.standard_normal((1, 2, 4, 6)))
        dense, _ = ops.avg_pool2x(x)
        sparse, mask = ops.avg_pool2x(x, np.ones((4, 6), dtype=bool))
        np.testing.assert_array_equal(dense.data, sparse.data)
        assert mask.all()


class TestMaskedEpe:
    def test_three_four_five(self):
        pred = np.zeros((1, 2, 2, 2))
        pred[0, 0] = 3.0
        pred[0, 1] = 4.0
        loss = ops.masked_epe_loss(t4(pred), np.zeros((1, 2, 2, 2)))
        assert loss.item() == pytest.approx(5.0)

    def test_zero_when_equal(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 3, 3))
        assert ops.masked_epe_loss(t4(x), x).item() == 0.0

    def test_masked_mean(self):
        pred = np.zeros((1, 2, 2, 2))
        gt = np.zeros((1, 2, 2, 2))
        gt[0, 0, 0, 0] = 5.0          # valid, error 5
        gt[0, 0, 1, 1] = 123.0        # invalid, arbitrary
        gt[0, 1, 1, 0] = -55.0        # invalid, arbitrary
        valid = np.array([[True, True], [False, False]])
        loss = ops.masked_epe_loss(t4(pred), gt, valid)
        assert loss.item() == pytest.approx(2.5)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            ops.masked_epe_loss(t4(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2, 2)),
                                np.zeros((2, 2), dtype=bool))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_invariant_to_invalid_values(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.standard_normal((1, 2, 4, 4))
        gt = rng.standard_normal((1, 2, 4, 4))
        valid = rng.random((4, 4)) < 0.6
        if not valid.any():
            valid[0, 0] = True
        base = ops.masked_epe_loss(t4(pred), gt, valid).item()
        noisy = gt.copy()
        noisy[:, :, ~valid] = rng.standard_normal((2, int((~valid).sum()))) * 100
        again = ops.masked_epe_loss(t4(pred), noisy, valid).item()
        assert base == again


class TestAdam:
    def test_first_step_magnitude(self):
        p = t4(np.zeros((1, 1, 1, 1)), requires_grad=True)
        st_ = AdamState.zeros_like(p)
        adam_step(p, np.ones((1, 1, 1, 1)), st_, lr=1e-3, eps=1e-8)
        assert p.item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
        assert st_.t == 1

    def test_zero_grad_no_move(self):
        p = t4(np.full((1, 1, 1, 1), 0.7), requires_grad=True)
        st_ = AdamState.zeros_like(p)
        adam_step(p, np.zeros((1, 1, 1, 1)), st_, lr=1e-2)
        assert p.item() == 0.7

    def test_ten_steps_match_scalar_recurrence(self):
        lr, b1, b2, eps, g = 1e-3, 0.9, 0.999, 1e-8, 0.37
        p = t4(np.full((1, 1, 1, 1), 1.0), requires_grad=True)
        st_ = AdamState.zeros_like(p)
        # Hand recurrence on plain floats.
        theta, m, v = 1.0, 0.0, 0.0
        for t in range(1, 11):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            adam_step(p, np.full((1, 1, 1, 1), g), st_, lr=lr,
                      beta1=b1, beta2=b2, eps=eps)
        assert abs(p.item() - theta) < 1e-12


class TestHeInit:
    def test_target_variance_formula(self):
        rng = np.random.default_rng(9)
        w = he_init((4, 2, 2, 2), rng)  # fan_in 8 -> variance 0.25
        big = he_init((200, 2, 2, 2), np.random.default_rng(9), fan_in=8)
        assert abs(big.data.var() - 0.25) < 0.02
        assert w.requires_grad

    def test_same_seed_identical(self):
        a = he_init((3, 2, 3, 3), np.random.default_rng(11))
        b = he_init((3, 2, 3, 3), np.random.default_rng(11))
        np.testing.assert_array_equal(a.data, b.data)

    def test_statistical_variance_fan18(self):
        rng = np.random.default_rng(12)
        w = he_init((625, 2, 3, 3), rng, fan_in=18)  # 112500 samples
        var = w.data.var()
        assert abs(var - 1 / 9) < 0.05 * (1 / 9)

    def test_zero_fan_in_rejected(self):
        with pytest.raises(ShapeError):
            he_init((3, 0, 3, 3), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# backward / DiffGraph
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self):
        x = t4(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
        backward(ops.sum_tensor(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_two_paths_accumulate(self):
        x = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = ops.add(ops.scale(x, 2.0), ops.scale(x, 3.0))
        backward(ops.sum_tensor(y))
        np.testing.assert_array_equal(x.grad, np.full_like(x.data, 5.0))

    def test_reentrancy_error(self):
        x = t4(np.ones((1, 1, 1, 1)), requires_grad=True)
        loss = ops.scale(x, 2.0)
        backward(loss)
        with pytest.raises(ReentrancyError):
            backward(loss)
        g = DiffGraph(ops.scale(x, 2.0))
        g.backward()
        with pytest.raises(ReentrancyError):
            g.backward()

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backward(t4(np.ones((1, 1, 2, 2)), requires_grad=True))

    def test_chain_matches_finite_differences(self):
        # conv2d -> leaky_relu -> masked_epe_loss on a 1x2x6x6 input.
        rng = np.random.default_rng(13)
        x0 = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3)) * 0.5
        gt = rng.standard_normal((1, 2, 6, 6))
        valid = rng.random((6, 6)) < 0.7
        valid[0, 0] = True

        def loss_of(arr):
            x = t4(arr)
            y = ops.leaky_relu(ops.conv2d(x, t4(w), stride=1, pad=(1, 1, 1, 1)), 0.1)
            return ops.masked_epe_loss(y, gt, valid).item()

        xt = t4(x0, requires_grad=True)
        y = ops.leaky_relu(ops.conv2d(xt, t4(w), stride=1, pad=(1, 1, 1, 1)), 0.1)
        backward(ops.masked_epe_loss(y, gt, valid))
        num = numeric_grad(loss_of, x0.copy())
        assert max_rel_err(xt.grad, num) < 1e-4


# Per-primitive finite-difference suite: analytic vs central differences on
# small random tensors, 64-bit, max relative error < 1e-4.
def _fd_case_conv(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((1, 2, 1, 1))
    gt = rng.standard_normal((1, 2, 3, 3))
    def f(xt, wt, bt):
        return ops.conv2d(xt, wt, bt, stride=(2, 2), pad=(1, 1, 1, 1))
    return (x, w, b), f, gt


def _fd_case_deconv(rng):
    x = rng.standard_normal((1, 3, 3, 4))
    w = rng.standard_normal((3, 2, 4, 4))
    b = rng.standard_normal((1, 2, 1, 1))
    gt = rng.standard_normal((1, 2, 6, 8))
    def f(xt, wt, bt):
        return ops.deconv2d(xt, wt, bt, stride=(2, 2), pad=(1, 1, 1, 1))
    return (x, w, b), f, gt


def _fd_case_leaky(rng):
    x = rng.standard_normal((1, 2, 4, 4)) + 0.05  # keep clear of the kink
    gt = rng.standard_normal((1, 2, 4, 4))
    return (x,), lambda xt: ops.leaky_relu(xt, 0.1), gt


def _fd_case_upsample(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    gt = rng.standard_normal((1, 2, 6, 8))
    return (x,), lambda xt: ops.bilinear_upsample2x(xt), gt


def _fd_case_pool_dense(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    gt = rng.standard_normal((1, 2, 2, 3))
    return (x,), lambda xt: ops.avg_pool2x(xt)[0], gt


def _fd_case_pool_sparse(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    valid = rng.random((4, 6)) < 0.7
    valid[0, 0] = True
    gt = rng.standard_normal((1, 2, 2, 3))
    return (x,), lambda xt: ops.avg_pool2x(xt, valid)[0], gt


def _fd_case_concat(rng):
    a = rng.standard_normal((1, 1, 4, 4))
    b = rng.standard_normal((1, 1, 4, 4))
    gt = rng.standard_normal((1, 2, 4, 4))
    return (a, b), lambda at, bt: ops.concat_channels(at, bt), gt


FD_CASES = {
    "conv2d": _fd_case_conv,
    "deconv2d": _fd_case_deconv,
    "leaky_relu": _fd_case_leaky,
    "bilinear_upsample2x": _fd_case_upsample,
    "avg_pool2x_dense": _fd_case_pool_dense,
    "avg_pool2x_sparse": _fd_case_pool_sparse,
    "concat_channels": _fd_case_concat,
}


def run_fd_check(name, seed=20):
    """Gradient check used by both this module and the acceptance suite."""
    rng = np.random.default_rng(seed)
    arrays, f, gt = FD_CASES[name](rng)
    tensors = [t4(a, requires_grad=True) for a in arrays]
    out = f(*tensors)
    backward(ops.masked_epe_loss(out, gt))
    worst = 0.0
    for i, arr in enumerate(arrays):
        def scalar(a, i=i):
            args = [t4(x) for x in arrays]
            args[i] = t4(a)
            return ops.masked_epe_loss(f(*args), gt).item()
        num = numeric_grad(scalar, arr.copy())
        worst = max(worst, max_rel_err(tensors[i].grad, num))
    return worst


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_primitive_gradients_match_finite_differences(name):
    assert run_fd_check(name) < 1e-4


def test_epe_loss_gradient_matches_fd():
    rng = np.random.default_rng(21)
    pred = rng.standard_normal((1, 2, 4, 4))
    gt = rng.standard_normal((1, 2, 4, 4))
    valid = rng.random((4, 4)) < 0.7
    valid[0, 0] = True
    pt = t4(pred, requires_grad=True)
    backward(ops.masked_epe_loss(pt, gt, valid))
    num = numeric_grad(lambda a: ops.masked_epe_loss(t4(a), gt, valid).item(),
                       pred.copy())
    assert max_rel_err(pt.grad, num) < 1e-4


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = t4(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = he_init((4, 2, 3, 3), rng)
        y = ops.leaky_relu(ops.conv2d(x, w, stride=2, pad=1), 0.1)
        up = ops.bilinear_upsample2x(y)
        loss = ops.sum_tensor(up)
        backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)
