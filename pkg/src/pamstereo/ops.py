"""Differentiable array operations: convolution, resampling, attention kernels.

All functions consume/produce :class:`~pamstereo.tensor.Tensor` values laid
out as (batch, channel, height, width) unless noted, and record their
backward closures on the active tape.  Convolution follows cross-correlation
semantics with zero padding; resampling is align-corners-false.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import Param, Tensor, astensor, _finish, accumulate

__all__ = [
    "conv2d",
    "leaky_relu",
    "sigmoid",
    "softmax_lastdim",
    "interp_axis",
    "bilinear_resize",
    "resize_volume",
    "pixel_shuffle",
    "pixel_unshuffle",
    "pad2d",
    "pad_edges",
    "slice4",
    "box3_mean",
    "box3_sum",
    "instance_norm",
    "warp_with_disparity",
    "row_inner",
    "row_apply",
    "row_chain",
    "conv_out_extent",
    "kaiming_conv",
]


def _as4(t, name: str) -> Tensor:
    t = astensor(t)
    if t.data.ndim != 4:
        raise ValueError(f"{name} must be 4-D, got shape {t.data.shape}")
    return t


def conv_out_extent(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, dilation: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (B,Cin,H,W) with kernels (Cout,Cin,KH,KW).

    Internally runs channels-last so the patch gather and the GEMM stream
    contiguous channel vectors; 1x1 kernels skip the gather entirely.
    """
    x = _as4(x, "x")
    w = astensor(w)
    bias = astensor(b) if b is not None else None
    B, Cin, H, W = x.data.shape
    Cout, CinW, KH, KW = w.data.shape
    if Cin != CinW:
        raise ValueError(f"input channels {Cin} != kernel input channels {CinW}")
    if KH % 2 == 0 or KW % 2 == 0:
        raise ValueError("kernel spatial size must be odd")
    OH = conv_out_extent(H, KH, stride, dilation, pad)
    OW = conv_out_extent(W, KW, stride, dilation, pad)
    if OH < 1 or OW < 1:
        raise ValueError("output extents collapse; increase pad")

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))  # (B,H,W,C)
    if pad:
        xt = np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # kernel as (KH*KW*Cin, Cout) matching the gather layout below
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(KH * KW * Cin, Cout))

    if KH == 1 and KW == 1:
        mat = xt[:, ::stride, ::stride, :].reshape(B * OH * OW, Cin)
        mat = np.ascontiguousarray(mat)
    else:
        sb, sh, sw, sc = xt.strides
        view = np.lib.stride_tricks.as_strided(
            xt, shape=(B, OH, OW, KH, KW, Cin),
            strides=(sb, sh * stride, sw * stride, sh * dilation, sw * dilation, sc))
        mat = np.ascontiguousarray(view).reshape(B * OH * OW, KH * KW * Cin)
    out = mat @ wmat
    if bias is not None:
        out += bias.data.reshape(1, Cout)
    out = np.ascontiguousarray(out.reshape(B, OH, OW, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (B,OH,OW,Cout)
        gmat = gt.reshape(B * OH * OW, Cout)
        if w.requires_grad:
            gw = mat.T @ gmat  # (KH*KW*Cin, Cout)
            accumulate(w, np.ascontiguousarray(
                gw.reshape(KH, KW, Cin, Cout).transpose(3, 2, 0, 1)))
        if bias is not None and bias.requires_grad:
            accumulate(bias, gmat.sum(axis=0).reshape(bias.data.shape))
        if x.requires_grad:
            gx = _conv_input_grad(gt, w.data, (H, W), stride, dilation, pad)
            accumulate(x, gx)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _finish(out, inputs, backward)


def _conv_input_grad(gt: np.ndarray, w: np.ndarray, hw, stride: int,
                     dilation: int, pad: int) -> np.ndarray:
    """Adjoint of the conv data path as a correlation with the flipped kernel.

    The output gradient is zero-stuffed onto the stride grid and placed in a
    buffer aligned so that input position h reads rows h .. h + d*(K-1);
    one strided gather plus a GEMM then yields the input gradient.
    """
    B, OH, OW, Cout = gt.shape
    _, Cin, KH, KW = w.shape
    H, W = hw
    # input position h reads buf rows h .. h + d*(K-1); output sample oh
    # lands at buf row q + oh*stride with q = d*(K-1) - pad (may be negative)
    buf = np.zeros((B, H + dilation * (KH - 1), W + dilation * (KW - 1), Cout),
                   dtype=gt.dtype)

    def _bounds(q, n_out, n_buf):
        lo = max(0, -(q // stride)) if q < 0 else 0  # ceil(-q / stride)
        hi = min(n_out - 1, (n_buf - 1 - q) // stride)
        return lo, hi

    oh_lo, oh_hi = _bounds(dilation * (KH - 1) - pad, OH, buf.shape[1])
    ow_lo, ow_hi = _bounds(dilation * (KW - 1) - pad, OW, buf.shape[2])
    if oh_hi >= oh_lo and ow_hi >= ow_lo:
        qh = dilation * (KH - 1) - pad
        qw = dilation * (KW - 1) - pad
        buf[:, qh + oh_lo * stride : qh + oh_hi * stride + 1 : stride,
            qw + ow_lo * stride : qw + ow_hi * stride + 1 : stride, :] = \
            gt[:, oh_lo : oh_hi + 1, ow_lo : ow_hi + 1, :]
    # correlate with the flipped kernel, swapped in/out channels
    wf = np.ascontiguousarray(
        w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(KH * KW * Cout, Cin))
    sb, sh, sw, sc = buf.strides
    view = np.lib.stride_tricks.as_strided(
        buf, shape=(B, H, W, KH, KW, Cout),
        strides=(sb, sh, sw, sh * dilation, sw * dilation, sc))
    gmat = np.ascontiguousarray(view).reshape(B * H * W, KH * KW * Cout)
    gx = (gmat @ wf).reshape(B, H, W, Cin)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    """y = x for x >= 0 else slope * x."""
    if not 0.0 <= slope < 1.0:
        raise ValueError("slope must lie in [0, 1)")
    x = astensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        if x.requires_grad:
            accumulate(x, np.where(pos, g, slope * g))

    return _finish(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = astensor(x)
    d = x.data
    out = np.empty_like(d)
    p = d >= 0
    out[p] = 1.0 / (1.0 + np.exp(-d[p]))
    e = np.exp(d[~p])
    out[~p] = e / (1.0 + e)

    def backward(g):
        if x.requires_grad:
            accumulate(x, g * out * (1.0 - out))

    return _finish(out, (x,), backward)


def softmax_lastdim(x) -> Tensor:
    """Stable softmax along the last axis; each slice sums to 1."""
    x = astensor(x)
    if x.data.shape[-1] < 1:
        raise ValueError("last dimension must be non-empty")
    if np.isnan(x.data).any():
        raise ValueError("NaN input to softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            accumulate(x, out * (g - dot))

    return _finish(out, (x,), backward)


# -- linear resampling ----------------------------------------------------

_LIN_CACHE: dict = {}


def _linear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Dense (n_out, n_in) matrix of align-corners-false linear weights."""
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _LIN_CACHE.get(key)
    if m is not None:
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i0 = np.minimum(i0, n_in - 2) if n_in > 1 else i0
    t = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - t
    m[rows, np.minimum(i0 + 1, n_in - 1)] += t
    _LIN_CACHE[key] = m
    return m


def interp_axis(x, axis: int, n_out: int) -> Tensor:
    """Linear interpolation along one axis to a new extent."""
    x = astensor(x)
    if n_out < 1:
        raise ValueError("output extent must be >= 1")
    n_in = x.data.shape[axis]
    if n_in == n_out:
        return x
    A = _linear_matrix(n_in, n_out, x.data.dtype)
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ A.T, -1, axis)
    out = np.ascontiguousarray(out)

    def backward(g):
        if x.requires_grad:
            gm = np.moveaxis(g, axis, -1)
            accumulate(x, np.ascontiguousarray(np.moveaxis(gm @ A, -1, axis)))

    return _finish(out, (x,), backward)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners-false bilinear resize of (B,C,H,W); identity at same size."""
    x = _as4(x, "x")
    return interp_axis(interp_axis(x, 2, out_h), 3, out_w)


def resize_volume(x, sizes: Sequence[int], axes: Sequence[int] = (1, 2, 3)) -> Tensor:
    """Separable linear resize along several axes (used for cost volumes)."""
    out = astensor(x)
    for ax, n in zip(axes, sizes):
        out = interp_axis(out, ax, n)
    return out


# -- sub-pixel rearrangement ----------------------------------------------

def pixel_shuffle(x, s: int) -> Tensor:
    """(B, C*s^2, H, W) -> (B, C, s*H, s*W); bijective on elements."""
    x = _as4(x, "x")
    B, C2, H, W = x.data.shape
    if s < 1 or C2 % (s * s) != 0:
        raise ValueError(f"channels {C2} not divisible by {s}^2")
    C = C2 // (s * s)
    out = (x.data.reshape(B, C, s, s, H, W)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(B, C, H * s, W * s))
    out = np.ascontiguousarray(out)

    def backward(g):
        if x.requires_grad:
            gin = (g.reshape(B, C, H, s, W, s)
                   .transpose(0, 1, 3, 5, 2, 4)
                   .reshape(B, C2, H, W))
            accumulate(x, np.ascontiguousarray(gin))

    return _finish(out, (x,), backward)


def pixel_unshuffle(x, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = _as4(x, "x")
    B, C, HS, WS = x.data.shape
    if HS % s or WS % s:
        raise ValueError("spatial extents not divisible by the shuffle factor")
    H, W = HS // s, WS // s
    out = (x.data.reshape(B, C, H, s, W, s)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(B, C * s * s, H, W))
    out = np.ascontiguousarray(out)

    def backward(g):
        if x.requires_grad:
            gin = (g.reshape(B, C, s, s, H, W)
                   .transpose(0, 1, 4, 2, 5, 3)
                   .reshape(B, C, HS, WS))
            accumulate(x, np.ascontiguousarray(gin))

    return _finish(out, (x,), backward)


# -- padding / slicing ------------------------------------------------------

def pad2d(x, ph: int, pw: int) -> Tensor:
    """Zero-pad height/width symmetrically."""
    return pad_edges(x, ph, ph, pw, pw)


def pad_edges(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad height/width by per-side amounts."""
    x = _as4(x, "x")
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    H, W = x.data.shape[2:]

    def backward(g):
        if x.requires_grad:
            accumulate(x, g[:, :, top : top + H, left : left + W])

    return _finish(out, (x,), backward)


def slice4(x, *bounds: Optional[Tuple[int, int]]) -> Tensor:
    """Crop a 4-D tensor; `bounds` is one (start, stop) or None per axis."""
    x = _as4(x, "x")
    idx = tuple(slice(None) if b is None else slice(b[0], b[1]) for b in bounds)
    out = np.ascontiguousarray(x.data[idx])
    in_shape = x.data.shape

    def backward(g):
        if x.requires_grad:
            gx = np.zeros(in_shape, dtype=g.dtype)
            gx[idx] = g
            accumulate(x, gx)

    return _finish(out, (x,), backward)


# -- local filtering ---------------------------------------------------------

def box3_sum(x) -> Tensor:
    """3x3 neighborhood sum with zero padding (self-adjoint)."""
    x = _as4(x, "x")
    out = _box3_sum_raw(x.data)

    def backward(g):
        if x.requires_grad:
            accumulate(x, _box3_sum_raw(g))

    return _finish(out, (x,), backward)


def _box3_sum_raw(a: np.ndarray) -> np.ndarray:
    B, C, H, W = a.shape
    p = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(a)
    for i in range(3):
        for j in range(3):
            out += p[:, :, i : i + H, j : j + W]
    return out


def box3_mean(x) -> Tensor:
    return box3_sum(x) * (1.0 / 9.0)


# -- horizontal warping -------------------------------------------------------

def warp_with_disparity(img, disp) -> Tensor:
    """Sample img(b,c,i,j - d(b,0,i,j)) with sub-pixel linear interpolation.

    Out-of-bounds source positions clamp to the border column; the
    disparity gradient is zero where the clamp saturates.
    """
    img = _as4(img, "img")
    disp = _as4(disp, "disp")
    B, C, H, W = img.data.shape
    if disp.data.shape != (B, 1, H, W):
        raise ValueError(f"disparity must be (B,1,H,W), got {disp.data.shape}")
    cols = np.arange(W, dtype=img.data.dtype).reshape(1, 1, 1, W)
    src = cols - disp.data  # (B,1,H,W)
    inside = (src >= 0.0) & (src <= W - 1.0)
    srcc = np.clip(src, 0.0, W - 1.0)
    j0 = np.floor(srcc).astype(int)
    if W > 1:
        j0 = np.minimum(j0, W - 2)
    t = (srcc - j0).astype(img.data.dtype)
    j1 = np.minimum(j0 + 1, W - 1)
    j0b = np.broadcast_to(j0, (B, C, H, W))
    j1b = np.broadcast_to(j1, (B, C, H, W))
    left = np.take_along_axis(img.data, j0b, axis=3)
    right = np.take_along_axis(img.data, j1b, axis=3)
    out = left * (1.0 - t) + right * t

    def backward(g):
        if img.requires_grad:
            gimg = np.zeros_like(img.data)
            np.add.at(gimg.reshape(B * C * H, W),
                      (np.repeat(np.arange(B * C * H), W), j0b.reshape(-1)),
                      (g * (1.0 - t)).reshape(-1))
            np.add.at(gimg.reshape(B * C * H, W),
                      (np.repeat(np.arange(B * C * H), W), j1b.reshape(-1)),
                      (g * t).reshape(-1))
            accumulate(img, gimg)
        if disp.requires_grad:
            slope = right - left  # d(out)/d(src)
            gd = -(g * slope).sum(axis=1, keepdims=True)
            gd = np.where(inside, gd, 0.0)
            accumulate(disp, gd)

    return _finish(out, (img, disp), backward)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over the spatial extents.

    Stateless (no running statistics, no affine parameters), so forward is
    deterministic and checkpoint-free at any batch size.
    """
    x = _as4(x, "x")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        if x.requires_grad:
            n = x.data.shape[2] * x.data.shape[3]
            gy = g * inv
            gx = gy - gy.mean(axis=(2, 3), keepdims=True) \
                - out * ((g * out).mean(axis=(2, 3), keepdims=True) * inv)
            accumulate(x, gx)

    return _finish(out, (x,), backward)


# -- epipolar attention kernels ----------------------------------------------

def row_inner(q, k) -> Tensor:
    """Per-row feature similarity: out(b,i,j,m) = sum_c q(b,c,i,j) * k(b,c,i,m)."""
    q = _as4(q, "q")
    k = _as4(k, "k")
    if q.data.shape != k.data.shape:
        raise ValueError(f"shape mismatch {q.data.shape} vs {k.data.shape}")
    qt = q.data.transpose(0, 2, 3, 1)  # (B,H,W,C)
    kt = k.data.transpose(0, 2, 1, 3)  # (B,H,C,W)
    out = np.ascontiguousarray(qt @ kt)  # (B,H,W,W)

    def backward(g):
        if q.requires_grad:
            gq = g @ kt.transpose(0, 1, 3, 2)  # (B,H,W,C)
            accumulate(q, np.ascontiguousarray(gq.transpose(0, 3, 1, 2)))
        if k.requires_grad:
            gk = qt.transpose(0, 1, 3, 2) @ g  # (B,H,C,W)
            accumulate(k, np.ascontiguousarray(gk.transpose(0, 2, 1, 3)))

    return _finish(out, (q, k), backward)


def row_apply(m, x) -> Tensor:
    """Per-row map application: out(b,c,i,j) = sum_w m(b,i,j,w) * x(b,c,i,w)."""
    m = _as4(m, "m")
    x = _as4(x, "x")
    B, H, W, W2 = m.data.shape
    if W != W2 or x.data.shape[0] != B or x.data.shape[2] != H or x.data.shape[3] != W:
        raise ValueError(f"shape mismatch: map {m.data.shape}, features {x.data.shape}")
    xt = x.data.transpose(0, 2, 3, 1)  # (B,H,W,C)
    out = m.data @ xt  # (B,H,W,C)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)  # (B,H,W,C)
        if m.requires_grad:
            accumulate(m, np.ascontiguousarray(gt @ xt.transpose(0, 1, 3, 2)))
        if x.requires_grad:
            gx = m.data.transpose(0, 1, 3, 2) @ gt
            accumulate(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))

    return _finish(out, (m, x), backward)


def row_chain(a, b) -> Tensor:
    """Per-row matrix product of two (B,H,W,W) stacks: out = a @ b row-wise."""
    a = _as4(a, "a")
    b = _as4(b, "b")
    if a.data.shape != b.data.shape or a.data.shape[2] != a.data.shape[3]:
        raise ValueError(f"extent mismatch {a.data.shape} vs {b.data.shape}")
    out = np.ascontiguousarray(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, np.ascontiguousarray(g @ b.data.transpose(0, 1, 3, 2)))
        if b.requires_grad:
            accumulate(b, np.ascontiguousarray(a.data.transpose(0, 1, 3, 2) @ g))

    return _finish(out, (a, b), backward)


# -- initialization ------------------------------------------------------------

def kaiming_conv(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int,
                 slope: float = 0.1) -> Param:
    """Fan-in scaled normal init for conv kernels (leaky-ReLU gain)."""
    from .tensor import default_dtype
    fan_in = cin * kh * kw
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    std = gain / np.sqrt(fan_in)
    w = rng.normal(0.0, std, size=(cout, cin, kh, kw)).astype(default_dtype())
    return Param(Tensor(w))
