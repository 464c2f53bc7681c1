"""Training objectives for unsupervised correspondence and stereo SR.

Two loss families share this module: image-space terms (SSIM-mixed
photometric error under a disparity warp, edge-aware disparity smoothness)
and attention-space regularizers (reconstruction, smoothness and cycle
terms evaluated directly on the attention maps at each pyramid scale).
Masked means always normalize by the count of valid pixels, and channel
L1 distances are per-channel means so weights stay comparable across
channel counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from .attention import AttentionMap, ValidMask, compose_attention, geo_matmul
from .ops import box3_mean, slice4, warp_with_disparity as _warp
from .tensor import Tensor, astensor, tabs, texp, tsum

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "ssim",
    "warp_with_disparity",
    "photometric_loss",
    "smoothness_loss",
    "pam_photometric",
    "pam_smoothness",
    "pam_cycle",
    "pam_loss_scale",
    "total_unsup_loss",
    "sr_loss",
]

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Mixing weights; defaults follow the published synthetic-data recipe."""

    alpha: float = 0.85
    lambda_s: float = 0.1
    lambda_pam: float = 1.0
    lambda_pam_s: float = 1.0
    lambda_pam_c: float = 1.0
    scale_weights: Tuple[float, float, float] = (0.2, 0.3, 0.5)
    lambda_sr_pam: float = 0.005

    def __post_init__(self):
        vals = [self.alpha, self.lambda_s, self.lambda_pam, self.lambda_pam_s,
                self.lambda_pam_c, self.lambda_sr_pam, *self.scale_weights]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    """Named scalar terms plus their weighted total."""

    terms: Dict[str, float]
    total: float
    total_tensor: object = field(default=None, repr=False)

    def verify(self, weights: Dict[str, float], tol: float = 1e-6) -> None:
        acc = sum(weights[name] * value for name, value in self.terms.items())
        if abs(acc - self.total) > tol * max(1.0, abs(self.total)):
            raise AssertionError(f"breakdown total {self.total} != weighted sum {acc}")


def _mask_tensor(v) -> Tensor:
    if isinstance(v, ValidMask):
        return v.data
    return astensor(v)


def _unwrap_field(d) -> Tensor:
    """Accept a DisparityField or Tensor without breaking tape identity."""
    inner = getattr(d, "data", None)
    if isinstance(inner, Tensor):
        return inner
    return astensor(d)


def _masked_mean(per_pixel: Tensor, mask: Tensor) -> Tensor:
    """Mean of a (B,1,H,W) per-pixel map over the valid-pixel set."""
    n = float(mask.data.sum())
    if n <= 0:
        raise ValueError("empty valid mask")
    return tsum(per_pixel * mask) * (1.0 / n)


def _channel_mean_l1(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel mean over channels of |a - b|, keepdims -> (B,1,H,W)."""
    return tabs(a - b).mean(axis=1, keepdims=True)


def ssim(x, y) -> Tensor:
    """Per-pixel structural similarity with a 3x3 uniform window.

    Inputs in [0, 1]; output values lie in [-1, 1] and the map is
    symmetric in its arguments.  Standard stabilizers C1=0.01^2,
    C2=0.03^2.
    """
    x, y = astensor(x), astensor(y)
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch {x.data.shape} vs {y.data.shape}")
    mu_x = box3_mean(x)
    mu_y = box3_mean(y)
    sxx = box3_mean(x * x) - mu_x * mu_x
    syy = box3_mean(y * y) - mu_y * mu_y
    sxy = box3_mean(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * sxy + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (sxx + syy + _SSIM_C2)
    return num / den


def warp_with_disparity(img_right, d) -> Tensor:
    """Resample the right view at column j - d(i,j) (sub-pixel, border clamp)."""
    return _warp(astensor(img_right), _unwrap_field(d))


def photometric_loss(i_left, i_warped, v, alpha: float = 0.85) -> Tensor:
    """SSIM/L1 mix over valid pixels: alpha*(1-SSIM)/2 + (1-alpha)*L1."""
    i_left, i_warped = astensor(i_left), astensor(i_warped)
    mask = _mask_tensor(v)
    s = ssim(i_left, i_warped).mean(axis=1, keepdims=True)
    l1 = _channel_mean_l1(i_left, i_warped)
    per_pixel = alpha * (1.0 - s) * 0.5 + (1.0 - alpha) * l1
    return _masked_mean(per_pixel, mask)


def _dx(t: Tensor) -> Tensor:
    W = t.data.shape[3]
    return slice4(t, None, None, None, (1, W)) - slice4(t, None, None, None, (0, W - 1))


def _dy(t: Tensor) -> Tensor:
    H = t.data.shape[2]
    return slice4(t, None, None, (1, H), None) - slice4(t, None, None, (0, H - 1), None)


def smoothness_loss(d, i_left) -> Tensor:
    """Edge-aware disparity smoothness: |grad d| damped by exp(-|grad I|)."""
    d = _unwrap_field(d)
    i_left = astensor(i_left)
    if d.data.shape[2] < 2 or d.data.shape[3] < 2:
        raise ValueError("extents must be >= 2")
    wx = texp(-tsum(tabs(_dx(i_left)), axis=1, keepdims=True))
    wy = texp(-tsum(tabs(_dy(i_left)), axis=1, keepdims=True))
    term_x = (tabs(_dx(d)) * wx).mean()
    term_y = (tabs(_dy(d)) * wy).mean()
    return term_x + term_y


def pam_photometric(i_left, i_right, m_r2l: AttentionMap, m_l2r: AttentionMap,
                    v_left, v_right) -> Tensor:
    """Cross-view reconstruction error measured through the attention maps.

    Both directions contribute: the left image against the attention
    reconstruction from the right view, and vice versa, each averaged over
    its own valid set.
    """
    i_left, i_right = astensor(i_left), astensor(i_right)
    rec_left = geo_matmul(m_r2l, i_right)
    rec_right = geo_matmul(m_l2r, i_left)
    term_l = _masked_mean(_channel_mean_l1(i_left, rec_left), _mask_tensor(v_left))
    term_r = _masked_mean(_channel_mean_l1(i_right, rec_right), _mask_tensor(v_right))
    return term_l + term_r


def pam_smoothness(m_set: Sequence[AttentionMap]) -> Tensor:
    """Attention-space smoothness over both maps of a scale.

    Penalizes the vertical difference M(i,j,k)-M(i+1,j,k) and the
    equal-disparity diagonal difference M(i,j,k)-M(i,j+1,k+1); terms whose
    shifted index leaves the tensor are dropped.  Normalized by the element
    count of one map.
    """
    total = None
    n = None
    for m in m_set:
        t = m.data
        B, H, W, _ = t.data.shape
        if H < 2 or W < 2:
            raise ValueError("attention extents must be >= 2")
        n = float(B * H * W * W)
        vert = tabs(slice4(t, None, (0, H - 1), None, None)
                    - slice4(t, None, (1, H), None, None))
        diag = tabs(slice4(t, None, None, (0, W - 1), (0, W - 1))
                    - slice4(t, None, None, (1, W), (1, W)))
        contrib = tsum(vert) + tsum(diag)
        total = contrib if total is None else total + contrib
    return total * (1.0 / n)


def _identity_rows(b: int, h: int, w: int, dtype) -> Tensor:
    eye = np.eye(w, dtype=dtype)
    return Tensor(np.broadcast_to(eye, (b, h, w, w)).copy())


def pam_cycle(m_r2l: AttentionMap, m_l2r: AttentionMap, v_left, v_right) -> Tensor:
    """Row-space distance of the two cycle compositions from the identity.

    compose(r2l, l2r) should reproduce each valid left pixel's own row;
    compose(l2r, r2l) each valid right pixel's.  Per-pixel penalty is the
    L1 norm of the row difference, averaged over the valid set.
    """
    cyc_l = compose_attention(m_r2l, m_l2r)  # left -> right -> left
    cyc_r = compose_attention(m_l2r, m_r2l)  # right -> left -> right
    B, H, W, _ = cyc_l.data.data.shape
    eye = _identity_rows(B, H, W, cyc_l.data.data.dtype)
    row_l1_l = tsum(tabs(cyc_l.data - eye), axis=3).reshape(B, 1, H, W)
    row_l1_r = tsum(tabs(cyc_r.data - eye), axis=3).reshape(B, 1, H, W)
    return (_masked_mean(row_l1_l, _mask_tensor(v_left))
            + _masked_mean(row_l1_r, _mask_tensor(v_right)))


def pam_loss_scale(photo, smooth, cycle, lambda_pam_s: float = 1.0,
                   lambda_pam_c: float = 1.0):
    """Weighted per-scale attention loss: p + ls*s + lc*c."""
    return photo + lambda_pam_s * smooth + lambda_pam_c * cycle


def _scalar(x) -> float:
    if isinstance(x, Tensor):
        return float(x.data)
    return float(x)


def total_unsup_loss(lp, ls, lpam_scales: Sequence, w: LossWeights) -> LossBreakdown:
    """Combine photometric, smoothness and the three per-scale attention terms."""
    if len(lpam_scales) != len(w.scale_weights):
        raise ValueError(f"expected {len(w.scale_weights)} scale losses")
    total = lp + w.lambda_s * ls
    for sw, l in zip(w.scale_weights, lpam_scales):
        total = total + (w.lambda_pam * sw) * l
    terms = {"lp": _scalar(lp), "ls": _scalar(ls)}
    weights = {"lp": 1.0, "ls": w.lambda_s}
    for i, l in enumerate(lpam_scales, start=1):
        terms[f"lpam{i}"] = _scalar(l)
        weights[f"lpam{i}"] = w.lambda_pam * w.scale_weights[i - 1]
    out = LossBreakdown(terms=terms, total=_scalar(total), total_tensor=total)
    out.verify(weights)
    return out


def sr_loss(sr, hr, pam_term, lam: float = 0.005) -> LossBreakdown:
    """Mean-squared reconstruction error plus the weighted attention loss."""
    sr, hr = astensor(sr), astensor(hr)
    if sr.data.shape != hr.data.shape:
        raise ValueError(f"shape mismatch {sr.data.shape} vs {hr.data.shape}")
    mse = ((sr - hr) ** 2).mean()
    total = mse + lam * pam_term
    out = LossBreakdown(
        terms={"lsr": _scalar(mse), "lpam": _scalar(pam_term)},
        total=_scalar(total), total_tensor=total)
    out.verify({"lsr": 1.0, "lpam": lam})
    return out
