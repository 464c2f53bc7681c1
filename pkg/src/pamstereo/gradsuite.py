"""Central-difference verification of every differentiable op and loss.

Each entry runs at 64-bit on several random small shapes and reports the
maximum relative error between analytic and numeric gradients.  The CLI's
gradcheck command and the acceptance suite both drive this registry.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from .attention import AttentionMap, ValidMask
from .disparity import DisparityField, refine_fuse, regress_disparity
from .losses import (
    pam_cycle,
    pam_photometric,
    pam_smoothness,
    photometric_loss,
    smoothness_loss,
    ssim,
    warp_with_disparity,
)
from .ops import (
    bilinear_resize,
    box3_mean,
    conv2d,
    instance_norm,
    interp_axis,
    leaky_relu,
    pixel_shuffle,
    row_apply,
    row_chain,
    row_inner,
    sigmoid,
    softmax_lastdim,
)
from .optim import grad_check
from .tensor import Tensor, precision

__all__ = ["GRAD_CHECKS", "run_grad_suite"]


def _shapes(rng, n, rank4=True):
    for _ in range(n):
        if rank4:
            yield tuple(int(rng.integers(1, 4)) for _ in range(2)) + \
                tuple(int(rng.integers(3, 9)) for _ in range(2))
        else:
            yield (int(rng.integers(3, 9)),)


def _stochastic(rng, b, h, w):
    m = rng.uniform(0.1, 1.0, size=(b, h, w, w))
    return m / m.sum(axis=-1, keepdims=True)


def _check_conv2d(rng, n) -> float:
    worst = 0.0
    for shape in _shapes(rng, n):
        b, c, h, w = shape
        cout = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        kern = rng.normal(size=(cout, c, k, k))
        x = Tensor(rng.normal(size=shape))
        worst = max(worst, grad_check(
            lambda t: (conv2d(t, Tensor(kern), pad=k // 2) ** 2).sum(), x))
        worst = max(worst, grad_check(
            lambda t: (conv2d(Tensor(x.data), t.reshape(kern.shape), pad=k // 2) ** 2).sum(),
            Tensor(rng.normal(size=(kern.size,)))))
    return worst


def _check_elementwise(fn) -> Callable:
    def run(rng, n) -> float:
        worst = 0.0
        for shape in _shapes(rng, n):
            x = Tensor(rng.normal(size=shape) + 0.05)  # keep clear of kinks
            worst = max(worst, grad_check(lambda t: (fn(t) ** 2).sum(), x))
        return worst

    return run


def _check_softmax(rng, n) -> float:
    worst = 0.0
    for shape in _shapes(rng, n):
        x = Tensor(rng.normal(size=shape))
        worst = max(worst, grad_check(lambda t: (softmax_lastdim(t) ** 2).sum(), x))
    return worst


def _check_resize(rng, n) -> float:
    worst = 0.0
    for shape in _shapes(rng, n):
        oh = int(rng.integers(2, 10))
        ow = int(rng.integers(2, 10))
        x = Tensor(rng.normal(size=shape))
        worst = max(worst, grad_check(
            lambda t: (bilinear_resize(t, oh, ow) ** 2).sum(), x))
    return worst


def _check_pixel_shuffle(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        x = Tensor(rng.normal(size=(b, 4 * c, h, w)))
        worst = max(worst, grad_check(lambda t: (pixel_shuffle(t, 2) ** 2).sum(), x))
    return worst


def _check_warp(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(3, 7)), int(rng.integers(4, 9))
        img = rng.uniform(0, 1, size=(b, c, h, w))
        # fractional offsets keep central differences off interpolation knots
        d = rng.uniform(0.15, 0.45, size=(b, 1, h, w)) + rng.integers(0, 2)
        worst = max(worst, grad_check(
            lambda t: (warp_with_disparity(t, Tensor(d)) ** 2).sum(), Tensor(img)))
        worst = max(worst, grad_check(
            lambda t: (warp_with_disparity(Tensor(img), t) ** 2).sum(), Tensor(d)))
    return worst


def _check_attention_ops(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 5)), int(rng.integers(3, 7))
        q = Tensor(rng.normal(size=(b, c, h, w)))
        k = rng.normal(size=(b, c, h, w))
        worst = max(worst, grad_check(
            lambda t: (row_inner(t, Tensor(k)) ** 2).sum(), q))
        m = _stochastic(rng, b, h, w)
        x = Tensor(rng.normal(size=(b, c, h, w)))
        worst = max(worst, grad_check(
            lambda t: (row_apply(Tensor(m), t) ** 2).sum(), x))
        worst = max(worst, grad_check(
            lambda t: (row_apply(softmax_lastdim(t), Tensor(x.data)) ** 2).sum(),
            Tensor(rng.normal(size=(b, h, w, w)))))
        b2 = _stochastic(rng, b, h, w)
        worst = max(worst, grad_check(
            lambda t: (row_chain(softmax_lastdim(t), Tensor(b2)) ** 2).sum(),
            Tensor(rng.normal(size=(b, h, w, w)))))
    return worst


def _check_regress(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(3, 7))

        def f(t):
            m = AttentionMap(softmax_lastdim(t), "r2l")
            return (regress_disparity(m).data ** 2).sum()

        worst = max(worst, grad_check(f, Tensor(rng.normal(size=(b, h, w, w)))))
    return worst


def _check_refine_fuse(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b = int(rng.integers(1, 3))
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        d_res = rng.uniform(0, 4, size=(b, 1, 2 * h, 2 * w))
        m_con = rng.uniform(0.2, 0.8, size=(b, 1, 2 * h, 2 * w))

        def f(t):
            return (refine_fuse(DisparityField(t), Tensor(d_res), Tensor(m_con)).data ** 2).sum()

        worst = max(worst, grad_check(f, Tensor(rng.uniform(0, 2, size=(b, 1, h, w)))))
    return worst


def _check_ssim(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(4, 8)), int(rng.integers(4, 8))
        x = rng.uniform(0.1, 0.9, size=(b, c, h, w))
        y = rng.uniform(0.1, 0.9, size=(b, c, h, w))
        worst = max(worst, grad_check(
            lambda t: (ssim(t, Tensor(y)) ** 2).sum(), Tensor(x)))
    return worst


def _check_photometric(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(4, 8)), int(rng.integers(4, 8))
        x = rng.uniform(0.1, 0.9, size=(b, c, h, w))
        y = rng.uniform(0.1, 0.9, size=(b, c, h, w))
        v = ValidMask(Tensor(np.ones((b, 1, h, w))), side="left")
        worst = max(worst, grad_check(
            lambda t: photometric_loss(Tensor(x), t, v, alpha=0.85), Tensor(y)))
    return worst


def _check_photometric_warp(rng, n) -> float:
    """Full warped-photometric path, differentiated through the disparity."""
    worst = 0.0
    for _ in range(n):
        b, h, w = 1, int(rng.integers(4, 7)), int(rng.integers(5, 9))
        left = rng.uniform(0.1, 0.9, size=(b, 1, h, w))
        right = rng.uniform(0.1, 0.9, size=(b, 1, h, w))
        d = rng.uniform(0.15, 0.45, size=(b, 1, h, w))
        v = ValidMask(Tensor(np.ones((b, 1, h, w))), side="left")

        def f(t):
            return photometric_loss(Tensor(left), warp_with_disparity(Tensor(right), t), v)

        worst = max(worst, grad_check(f, Tensor(d)))
    return worst


def _check_smoothness(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b = int(rng.integers(1, 3))
        h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        d = rng.uniform(0, 3, size=(b, 1, h, w))
        img = rng.uniform(0, 1, size=(b, 2, h, w))
        worst = max(worst, grad_check(
            lambda t: smoothness_loss(t, Tensor(img)), Tensor(d)))
    return worst


def _check_pam_losses(rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        b, h, w = 1, int(rng.integers(2, 4)), int(rng.integers(3, 6))
        il = rng.uniform(0, 1, size=(b, 1, h, w))
        ir = rng.uniform(0, 1, size=(b, 1, h, w))
        ml = AttentionMap(Tensor(_stochastic(rng, b, h, w)), "l2r")
        vl = ValidMask(Tensor(np.ones((b, 1, h, w))), side="left")
        vr = ValidMask(Tensor(np.ones((b, 1, h, w))), side="right")

        def photo(t):
            m = AttentionMap(softmax_lastdim(t), "r2l")
            return pam_photometric(Tensor(il), Tensor(ir), m, ml, vl, vr)

        def smooth(t):
            return pam_smoothness([AttentionMap(softmax_lastdim(t), "r2l")])

        def cycle(t):
            m = AttentionMap(softmax_lastdim(t), "r2l")
            return pam_cycle(m, ml, vl, vr)

        logits = Tensor(rng.normal(size=(b, h, w, w)))
        worst = max(worst, grad_check(photo, logits))
        worst = max(worst, grad_check(smooth, logits))
        worst = max(worst, grad_check(cycle, logits))
    return worst


GRAD_CHECKS: Dict[str, Callable] = {
    "conv2d": _check_conv2d,
    "leaky_relu": _check_elementwise(lambda t: leaky_relu(t, 0.1)),
    "sigmoid": _check_elementwise(sigmoid),
    "instance_norm": _check_elementwise(instance_norm),
    "softmax_lastdim": _check_softmax,
    "bilinear_resize": _check_resize,
    "pixel_shuffle": _check_pixel_shuffle,
    "box3_mean": _check_elementwise(box3_mean),
    "warp_with_disparity": _check_warp,
    "attention_products": _check_attention_ops,
    "regress_disparity": _check_regress,
    "refine_fuse": _check_refine_fuse,
    "ssim": _check_ssim,
    "photometric_loss": _check_photometric,
    "photometric_loss(warp)": _check_photometric_warp,
    "smoothness_loss": _check_smoothness,
    "attention_losses": _check_pam_losses,
}


def run_grad_suite(instances: int = 5, seed: int = 20_240) -> List[Tuple[str, float]]:
    """Run every registered check on `instances` random shapes at 64-bit."""
    report = []
    with precision("f64"):
        for name, fn in GRAD_CHECKS.items():
            rng = np.random.default_rng([seed, hash(name) % (2 ** 32)])
            report.append((name, float(fn(rng, instances))))
    return report
