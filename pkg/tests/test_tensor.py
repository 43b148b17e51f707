"""Tensor engine tests: hand-computed cases, a brute-force convolution oracle,
and finite-difference gradient checks (float64 oracle vs float32 backward)."""

import numpy as np
import pytest

from streamdeblur.tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    absolute,
    backward,
    clamp_upper,
    concat_channels,
    conv2d,
    finite_diff_grad,
    mul,
    nearest_upsample,
    relu,
    same_spec,
    scalar_mul,
    slice_channels,
    sub,
    tanh,
    tsum,
)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def conv2d_bruteforce(x, w, b=None, stride=1, padding=0):
    """Direct nested-loop convolution in float64, independent of the engine."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if isinstance(padding, int):
        pt = pb = pl = pr = padding
    else:
        pt, pb, pl, pr = padding
    n, cin, h, wid = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    oh = (h + pt + pb - kh) // stride + 1
    ow = (wid + pl + pr - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for oc in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ic in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - pt
                                ix = ox * stride + kx - pl
                                if 0 <= iy < h and 0 <= ix < wid:
                                    acc += x[ni, ic, iy, ix] * w[oc, ic, ky, kx]
                    if b is not None:
                        acc += b[oc]
                    out[ni, oc, oy, ox] = acc
    return out


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grads_against_fd(build, leaves, rtol=1e-4, eps=1e-3):
    """Backward grads (float32 graph) vs float64 central differences.

    ``build`` maps a list of tensors to a scalar tensor; ``leaves`` are
    float64 arrays defining the evaluation point.
    """
    t32 = [Tensor(a.astype(np.float32), requires_grad=True) for a in leaves]
    loss = build(t32)
    backward(loss)
    for i, a in enumerate(leaves):

        def f(probe, i=i):
            args = [Tensor(x.astype(np.float64)) for x in leaves]
            args[i] = probe
            return build(args)

        fd = finite_diff_grad(f, Tensor(a.astype(np.float64)), eps=eps)
        err = max_rel_err(t32[i].grad, fd.data)
        assert err < rtol, f"leaf {i}: max relative error {err:.3e}"


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    b = Tensor(np.zeros(1, dtype=np.float32))
    out = conv2d(x, w, b, ConvSpec(1, 1, 1, 1))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_ones_kernel_counts_window_overlap():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    b = Tensor(np.zeros(1, dtype=np.float32))
    out = conv2d(x, w, b, ConvSpec(1, 1, 3, 3, stride=1, padding=1))
    assert out.data[0, 0, 1, 1] == 9.0
    for cy, cx in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out.data[0, 0, cy, cx] == 4.0


def test_conv_strided_matches_bruteforce():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (1, 2, 8, 8)).astype(np.float32)
    w = rng.uniform(-1, 1, (4, 2, 3, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, 4).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), ConvSpec(4, 2, 3, 3, stride=2, padding=1))
    assert out.shape == (1, 4, 4, 4)
    expect = conv2d_bruteforce(x, w, b, stride=2, padding=1)
    np.testing.assert_allclose(out.data, expect, atol=1e-5)


def test_conv_random_instances_match_bruteforce():
    rng = np.random.default_rng(11)
    cases = [
        (1, 1, 5, 5, 1, 3, 1, 0),
        (2, 3, 9, 7, 2, 3, 1, 1),
        (1, 2, 12, 12, 3, 5, 2, 2),
        (2, 4, 16, 16, 4, 3, 2, 1),
        (1, 4, 10, 16, 2, 5, 1, 2),
    ]
    for n, cin, h, wid, cout, k, stride, pad in cases:
        x = rng.uniform(-1, 1, (n, cin, h, wid)).astype(np.float32)
        w = rng.uniform(-1, 1, (cout, cin, k, k)).astype(np.float32)
        b = rng.uniform(-1, 1, cout).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), ConvSpec(cout, cin, k, k, stride, pad))
        expect = conv2d_bruteforce(x, w, b, stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, expect, atol=1e-5)


def test_conv_channel_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((2, 2, 3, 3), dtype=np.float32))
    b = Tensor(np.zeros(2, dtype=np.float32))
    with pytest.raises(ShapeError) as exc:
        conv2d(x, w, b, ConvSpec(2, 2, 3, 3, padding=1))
    msg = str(exc.value)
    assert "(1, 3, 4, 4)" in msg and "(2, 2, 3, 3)" in msg


def test_conv_spec_rejects_even_kernel_and_bad_stride():
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 2, 3)
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 3, 3, stride=0)


def test_same_spec_preserves_or_halves_extent():
    x = Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32))
    w = Tensor(np.zeros((4, 3, 5, 5), dtype=np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    assert conv2d(x, w, b, same_spec(3, 4, 5, stride=1)).shape == (1, 4, 16, 16)
    assert conv2d(x, w, b, same_spec(3, 4, 5, stride=2)).shape == (1, 4, 8, 8)


def test_conv_gradients_match_fd():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (1, 2, 6, 6))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)

    def build(leaves):
        xi, wi, bi = leaves
        return tsum(conv2d(xi, wi, bi, ConvSpec(3, 2, 3, 3, stride=2, padding=1)))

    check_grads_against_fd(build, [x, w, b])


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def test_elementwise_hand_values():
    assert tanh(Tensor([0.0])).data[0] == 0.0
    assert clamp_upper(Tensor([1.7]), 1.0).data[0] == 1.0
    np.testing.assert_array_equal(
        mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8.0, 15.0]
    )


def test_clamp_upper_gradient_is_piecewise():
    x = Tensor(np.array([0.5, 1.5], dtype=np.float32), requires_grad=True)
    backward(tsum(clamp_upper(x, 1.0)))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_abs_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-2.0, 0.0, 3.0], dtype=np.float32), requires_grad=True)
    backward(tsum(absolute(x)))
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_binary_op_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        sub(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_scalar_tensor_operand_broadcasts_and_accumulates_grad():
    beta = Tensor(np.asarray(0.25, dtype=np.float32), requires_grad=True)
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    backward(tsum(x + beta))
    assert beta.grad.shape == ()
    assert beta.grad == 6.0
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_elementwise_gradients_match_fd():
    rng = np.random.default_rng(5)

    def away_from_kinks(shape, kink=0.0):
        v = rng.uniform(-1, 1, shape)
        while np.any(np.abs(v - kink) < 1e-3):
            v = rng.uniform(-1, 1, shape)
        return v

    x = away_from_kinks((4, 5))
    y = rng.uniform(-1, 1, (4, 5))
    check_grads_against_fd(lambda ts: tsum(mul(ts[0], ts[1])), [x, y])
    check_grads_against_fd(lambda ts: tsum(ts[0] + ts[1]), [x, y])
    check_grads_against_fd(lambda ts: tsum(sub(ts[0], ts[1])), [x, y])
    check_grads_against_fd(lambda ts: tsum(tanh(ts[0])), [x])
    check_grads_against_fd(lambda ts: tsum(relu(ts[0])), [x])
    check_grads_against_fd(lambda ts: tsum(absolute(ts[0])), [x])
    check_grads_against_fd(lambda ts: tsum(scalar_mul(ts[0], -2.5)), [x])
    xc = away_from_kinks((4, 5), kink=0.4)
    check_grads_against_fd(lambda ts: tsum(clamp_upper(ts[0], 0.4)), [xc])


# ---------------------------------------------------------------------------
# concat / slice
# ---------------------------------------------------------------------------


def test_concat_channel_extents_add():
    a = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    b = Tensor(np.zeros((1, 32, 4, 4), dtype=np.float32))
    assert concat_channels([a, b]).shape == (1, 35, 4, 4)


def test_concat_single_part_is_identity():
    a = Tensor(np.random.default_rng(0).uniform(size=(1, 2, 3, 3)).astype(np.float32))
    np.testing.assert_array_equal(concat_channels([a]).data, a.data)


def test_concat_spatial_mismatch_rejected():
    a = Tensor(np.zeros((1, 2, 4, 4)))
    b = Tensor(np.zeros((1, 2, 5, 4)))
    with pytest.raises(ShapeError):
        concat_channels([a, b])


def test_concat_gradient_splits_back():
    rng = np.random.default_rng(9)
    a = rng.uniform(-1, 1, (1, 2, 3, 3))
    b = rng.uniform(-1, 1, (1, 4, 3, 3))
    weights = rng.uniform(-1, 1, (1, 6, 3, 3)).astype(np.float64)

    def build(ts):
        cat = concat_channels([ts[0], ts[1]])
        return tsum(mul(cat, Tensor(weights.astype(cat.dtype.type))))

    check_grads_against_fd(build, [a, b])


def test_concat_then_slice_back_is_identity():
    rng = np.random.default_rng(13)
    parts = [Tensor(rng.uniform(size=(2, c, 5, 4)).astype(np.float32)) for c in (1, 3, 2)]
    cat = concat_channels(parts)
    start = 0
    for p in parts:
        back = slice_channels(cat, start, start + p.shape[1])
        np.testing.assert_array_equal(back.data, p.data)
        start += p.shape[1]


# ---------------------------------------------------------------------------
# nearest_upsample
# ---------------------------------------------------------------------------


def test_upsample_factor_one_is_identity():
    a = Tensor(np.random.default_rng(1).uniform(size=(1, 2, 3, 3)).astype(np.float32))
    np.testing.assert_array_equal(nearest_upsample(a, 1).data, a.data)


def test_upsample_copies_blocks():
    a = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    out = nearest_upsample(a, 2)
    assert out.shape == (1, 1, 4, 4)
    expect = np.array(
        [
            [1, 1, 2, 2],
            [1, 1, 2, 2],
            [3, 3, 4, 4],
            [3, 3, 4, 4],
        ],
        dtype=np.float32,
    )
    np.testing.assert_array_equal(out.data[0, 0], expect)


def test_upsample_gradient_counts_copies():
    a = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    backward(tsum(nearest_upsample(a, 2)))
    np.testing.assert_array_equal(a.grad, np.full((1, 1, 2, 2), 4.0))


def test_upsample_then_subsample_is_identity():
    rng = np.random.default_rng(21)
    a = rng.uniform(size=(2, 3, 4, 5)).astype(np.float32)
    for f in (2, 3):
        up = nearest_upsample(Tensor(a), f)
        np.testing.assert_array_equal(up.data[:, :, ::f, ::f], a)


def test_upsample_gradient_matches_fd():
    rng = np.random.default_rng(17)
    a = rng.uniform(-1, 1, (1, 2, 3, 3))
    w = rng.uniform(-1, 1, (1, 2, 6, 6))
    check_grads_against_fd(
        lambda ts: tsum(mul(nearest_upsample(ts[0], 2), Tensor(w.astype(ts[0].dtype.type)))),
        [a],
    )


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(2).uniform(size=(3, 4)).astype(np.float32), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_sum_of_squares_is_2x():
    data = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    x = Tensor(data, requires_grad=True)
    backward(tsum(mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-6)


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    backward(tsum(x))
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))
    x.zero_grad()
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x + x)


def test_backward_handles_reused_subexpression():
    x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    y = mul(x, x)  # used twice below
    backward(tsum(y + y))
    np.testing.assert_allclose(x.grad, [8.0])


# ---------------------------------------------------------------------------
# finite_diff_grad
# ---------------------------------------------------------------------------


def test_fd_of_sum_is_ones():
    x = Tensor(np.random.default_rng(4).uniform(size=(2, 3)))
    fd = finite_diff_grad(tsum, x)
    np.testing.assert_allclose(fd.data, np.ones((2, 3)), atol=1e-8)


def test_fd_of_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0]))
    fd = finite_diff_grad(lambda t: tsum(mul(t, t)), x)
    np.testing.assert_allclose(fd.data, [2.0, 4.0], atol=1e-6)


def test_two_layer_conv_net_backward_matches_fd():
    rng = np.random.default_rng(23)
    x = rng.uniform(-1, 1, (1, 3, 6, 6))
    w1 = rng.uniform(-0.5, 0.5, (4, 3, 3, 3))
    b1 = rng.uniform(-0.1, 0.1, 4)
    w2 = rng.uniform(-0.5, 0.5, (2, 4, 3, 3))
    b2 = rng.uniform(-0.1, 0.1, 2)

    def build(ts):
        xi, w1i, b1i, w2i, b2i = ts
        h = relu(conv2d(xi, w1i, b1i, ConvSpec(4, 3, 3, 3, padding=1)))
        out = conv2d(h, w2i, b2i, ConvSpec(2, 4, 3, 3, stride=2, padding=1))
        return tsum(tanh(out))

    check_grads_against_fd(build, [x, w1, b1, w2, b2])
