"""Array ops against scalar-loop oracles, plus gradient checks."""

import numpy as np
import pytest

from pamstereo import Param, Tape, Tensor
from pamstereo.optim import adam_update, grad_check
from pamstereo.ops import (
    bilinear_resize,
    box3_mean,
    conv2d,
    interp_axis,
    leaky_relu,
    pixel_shuffle,
    pixel_unshuffle,
    sigmoid,
    slice4,
    softmax_lastdim,
    warp_with_disparity,
)
import oracles


# -- conv2d -----------------------------------------------------------------

def test_conv2d_1x1_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = conv2d(Tensor(x), Tensor(w))
    assert np.allclose(out.data, x)


def test_conv2d_box_kernel_on_constant():
    c = 0.7
    x = np.full((1, 1, 5, 5), c)
    w = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), pad=1)
    assert np.isclose(out.data[0, 0, 2, 2], 9 * c)


def test_conv2d_dilated_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    for stride, dil, pad in [(1, 2, 2), (1, 1, 1), (2, 1, 1), (1, 1, 0)]:
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, dilation=dil, pad=pad)
        want = oracles.conv2d_oracle(x, w, b, stride=stride, dilation=dil, pad=pad)
        assert np.allclose(got.data, want, atol=1e-12), (stride, dil, pad)


def test_conv2d_channel_mismatch_raises(rng):
    with pytest.raises(ValueError):
        conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3))))


def test_conv2d_gradcheck(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 5)))
    w = rng.normal(size=(3, 2, 3, 3))

    err = grad_check(lambda t: (conv2d(t, Tensor(w), pad=1) ** 2).sum(), x)
    assert err < 1e-6
    xd = rng.normal(size=(1, 2, 4, 5))
    err_w = grad_check(
        lambda t: (conv2d(Tensor(xd), t.reshape(3, 2, 3, 3), dilation=2, pad=2) ** 2).sum(),
        Tensor(rng.normal(size=(3 * 2 * 3 * 3,))))
    assert err_w < 1e-6


# -- activations --------------------------------------------------------------

def test_leaky_relu_values():
    x = Tensor(np.array([0.0, -2.0, 3.0]))
    y = leaky_relu(x, 0.1)
    assert np.allclose(y.data, [0.0, -0.2, 3.0])


def test_leaky_relu_gradient_both_sides():
    for v, want in [(3.0, 1.0), (-3.0, 0.1)]:
        x = Tensor(np.array([v]), requires_grad=True)
        with Tape() as tape:
            tape.backward(leaky_relu(x, 0.1).sum())
        g_analytic = x.grad[0]
        eps = 1e-6
        g_numeric = ((max(v + eps, 0.1 * (v + eps)) - max(v - eps, 0.1 * (v - eps))) / (2 * eps))
        assert np.isclose(g_analytic, want)
        assert np.isclose(g_analytic, g_numeric, atol=1e-6)


def test_leaky_relu_slope_domain():
    with pytest.raises(ValueError):
        leaky_relu(Tensor([1.0]), slope=1.0)


def test_sigmoid_gradcheck(rng):
    err = grad_check(lambda t: (sigmoid(t) ** 2).sum(), Tensor(rng.normal(size=(8,))))
    assert err < 1e-8


# -- softmax -------------------------------------------------------------------

def test_softmax_uniform_logits():
    x = Tensor(np.zeros((1, 1, 2, 7)))
    y = softmax_lastdim(x)
    assert np.allclose(y.data, 1.0 / 7.0)


def test_softmax_known_pair():
    y = softmax_lastdim(Tensor(np.array([0.0, np.log(3.0)])))
    assert np.allclose(y.data, [0.25, 0.75], atol=1e-12)


def test_softmax_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 1, 4, 7))
    got = softmax_lastdim(Tensor(x))
    assert np.allclose(got.data, oracles.softmax_oracle(x), atol=1e-12)
    sums = got.data.sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-12)


def test_softmax_rejects_nan():
    import pamstereo.tensor as T
    T.set_check_finite(False)
    try:
        with pytest.raises(ValueError):
            softmax_lastdim(Tensor.__new__(Tensor).__class__(np.array([np.nan, 1.0])))
    finally:
        T.set_check_finite(True)


def test_softmax_gradcheck(rng):
    err = grad_check(lambda t: (softmax_lastdim(t) ** 2).sum(),
                     Tensor(rng.normal(size=(1, 1, 3, 5))))
    assert err < 1e-6


def test_softmax_row_sums_at_both_precisions(rng):
    from pamstereo import precision
    logits = rng.normal(size=(2, 3, 4, 8)) * 5
    with precision("f32"):
        y32 = softmax_lastdim(Tensor(logits.astype(np.float32)))
        assert np.allclose(y32.data.sum(axis=-1), 1.0, atol=1e-5)
    y64 = softmax_lastdim(Tensor(logits))
    assert np.allclose(y64.data.sum(axis=-1), 1.0, atol=1e-12)


# -- resampling -----------------------------------------------------------------

def test_bilinear_same_size_identity(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    y = bilinear_resize(Tensor(x), 4, 6)
    assert np.array_equal(y.data, x)


def test_bilinear_constant_stays_constant():
    x = np.full((1, 1, 3, 3), 0.42)
    y = bilinear_resize(Tensor(x), 7, 5)
    assert np.allclose(y.data, 0.42)


def test_bilinear_2x2_to_4x4_hand_values():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    got = bilinear_resize(Tensor(x), 4, 4)
    want = oracles.bilinear_resize_oracle(x, 4, 4)
    assert np.allclose(got.data, want, atol=1e-12)
    # corners replicate, center is the average of the four inputs
    assert np.isclose(got.data[0, 0, 0, 0], 0.0)
    assert np.isclose(got.data[0, 0, 3, 3], 3.0)


def test_bilinear_matches_oracle_random(rng):
    x = rng.normal(size=(2, 2, 3, 5))
    got = bilinear_resize(Tensor(x), 6, 4)
    assert np.allclose(got.data, oracles.bilinear_resize_oracle(x, 6, 4), atol=1e-12)


def test_interp_axis_gradcheck(rng):
    err = grad_check(lambda t: (interp_axis(t, 2, 5) ** 2).sum(),
                     Tensor(rng.normal(size=(1, 1, 3, 4))))
    assert err < 1e-7


# -- pixel shuffle ----------------------------------------------------------------

def test_pixel_shuffle_identity_when_s1(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    assert np.array_equal(pixel_shuffle(Tensor(x), 1).data, x)


def test_pixel_shuffle_2x2_layout():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    y = pixel_shuffle(Tensor(x), 2)
    assert y.data.shape == (1, 1, 2, 2)
    assert np.array_equal(y.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_roundtrip(rng):
    x = rng.normal(size=(2, 8, 3, 5))
    y = pixel_unshuffle(pixel_shuffle(Tensor(x), 2), 2)
    assert np.array_equal(y.data, x)


def test_pixel_shuffle_rejects_indivisible(rng):
    with pytest.raises(ValueError):
        pixel_shuffle(Tensor(rng.normal(size=(1, 3, 2, 2))), 2)


def test_pixel_shuffle_gradcheck(rng):
    err = grad_check(lambda t: (pixel_shuffle(t, 2) ** 2).sum(),
                     Tensor(rng.normal(size=(1, 4, 2, 3))))
    assert err < 1e-8


# -- slicing / box filter -----------------------------------------------------------

def test_slice4_gradient_scatter(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    with Tape() as tape:
        y = slice4(x, None, (0, 1), (1, 3), (2, 4)).sum()
        tape.backward(y)
    g = np.zeros((1, 2, 4, 4))
    g[:, 0:1, 1:3, 2:4] = 1.0
    assert np.array_equal(x.grad, g)


def test_box3_mean_constant():
    x = np.full((1, 1, 5, 5), 2.0)
    y = box3_mean(Tensor(x))
    assert np.isclose(y.data[0, 0, 2, 2], 2.0)      # interior
    assert np.isclose(y.data[0, 0, 0, 0], 2.0 * 4 / 9)  # corner, zero pad


def test_box3_mean_gradcheck(rng):
    err = grad_check(lambda t: (box3_mean(t) ** 2).sum(),
                     Tensor(rng.normal(size=(1, 2, 4, 4))))
    assert err < 1e-8


# -- warping ------------------------------------------------------------------------

def test_warp_zero_disparity_is_identity(rng):
    img = rng.normal(size=(1, 2, 3, 6))
    d = np.zeros((1, 1, 3, 6))
    out = warp_with_disparity(Tensor(img), Tensor(d))
    assert np.allclose(out.data, img)


def test_warp_integer_shift_replicates_border(rng):
    img = rng.normal(size=(1, 1, 2, 8))
    d = np.full((1, 1, 2, 8), 3.0)
    out = warp_with_disparity(Tensor(img), Tensor(d))
    assert np.allclose(out.data[0, 0, :, 3:], img[0, 0, :, :5])
    assert np.allclose(out.data[0, 0, :, :3], img[0, 0, :, :1])  # clamped


def test_warp_half_pixel_on_ramp():
    ramp = np.arange(8, dtype=float).reshape(1, 1, 1, 8)
    d = np.full((1, 1, 1, 8), 1.5)
    out = warp_with_disparity(Tensor(ramp), Tensor(d))
    want = oracles.warp_oracle(ramp, d)
    assert np.allclose(out.data, want, atol=1e-12)
    assert np.isclose(out.data[0, 0, 0, 4], 2.5)


def test_warp_matches_oracle_random(rng):
    img = rng.normal(size=(2, 2, 3, 7))
    d = rng.uniform(-2, 4, size=(2, 1, 3, 7))
    out = warp_with_disparity(Tensor(img), Tensor(d))
    assert np.allclose(out.data, oracles.warp_oracle(img, d), atol=1e-12)


def test_warp_gradcheck_both_arguments(rng):
    img = rng.uniform(0, 1, size=(1, 1, 2, 6))
    d = rng.uniform(0.1, 0.4, size=(1, 1, 2, 6))  # off lattice points
    err_img = grad_check(
        lambda t: (warp_with_disparity(t, Tensor(d)) ** 2).sum(), Tensor(img))
    err_d = grad_check(
        lambda t: (warp_with_disparity(Tensor(img), t) ** 2).sum(), Tensor(d))
    assert err_img < 1e-6
    assert err_d < 1e-6


# -- adam ------------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_value(rng):
    p = Param(rng.normal(size=(2, 2, 1, 1)))
    before = p.value.data.copy()
    adam_update(p, grad=np.zeros_like(before), lr=0.1)
    assert np.allclose(p.value.data, before)
    assert p.step_count == 1


def test_adam_first_step_is_signed_lr(rng):
    p = Param(np.zeros((1, 1, 1, 4)))
    g = np.array([[[[1.0, -2.0, 0.5, -0.1]]]])
    adam_update(p, grad=g, lr=1e-2)
    assert np.allclose(p.value.data, -1e-2 * np.sign(g), rtol=1e-6)


def test_adam_trajectory_matches_scalar_oracle():
    p = Param(np.array([2.0]))
    lr = 0.05
    grads = []
    traj = []
    for _ in range(5):
        g = 2.0 * p.value.data[0]  # d/dx of x^2
        grads.append(g)
        adam_update(p, grad=np.array([g]), lr=lr)
        traj.append(p.value.data[0])
    want = oracles.adam_oracle(2.0, grads, lr)
    assert np.allclose(traj, want, atol=1e-12)


def test_adam_rejects_nonfinite_gradient():
    from pamstereo import NumericsError
    p = Param(np.zeros((2,)))
    with pytest.raises(NumericsError):
        adam_update(p, grad=np.array([np.nan, 0.0]), lr=0.1)


# -- grad_check harness ------------------------------------------------------------------

def test_grad_check_sum_is_exact(rng):
    err = grad_check(lambda t: t.sum(), Tensor(rng.normal(size=(2, 3))))
    assert err < 1e-10


def test_grad_check_softmax_square(rng):
    err = grad_check(lambda t: (softmax_lastdim(t) ** 2).sum(),
                     Tensor(rng.normal(size=(2, 5))))
    assert err < 1e-6


def test_grad_check_detects_wrong_gradient(rng):
    """A deliberately broken backward must be flagged."""
    from pamstereo.tensor import _finish, accumulate

    def bad_square(t):
        out = t.data ** 2

        def backward(g):
            accumulate(t, g * 3.0 * t.data)  # wrong factor

        return _finish(out, (t,), backward).sum()

    err = grad_check(bad_square, Tensor(rng.normal(size=(4,)) + 2.0))
    assert err > 1e-2
