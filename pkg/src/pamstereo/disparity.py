"""Disparity regression, occlusion filling, refinement fusion, and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import AttentionMap, ValidMask
from .ops import bilinear_resize, box3_sum
from .tensor import Tensor, astensor, tsum, where_const

__all__ = [
    "DisparityField",
    "MetricReport",
    "regress_disparity",
    "fill_occlusions",
    "refine_fuse",
    "evaluate",
]

FILL_MAX_SWEEPS = 1024


@dataclass
class DisparityField:
    """(B,1,H,W) horizontal correspondences in pixels at its own scale.

    ``scale_factor`` converts values to full-resolution pixels (multiply);
    ``valid`` marks pixels whose correspondence exists in the other view.
    """

    data: Tensor
    valid: Optional[ValidMask] = None
    scale_factor: float = 1.0

    def __post_init__(self):
        d = astensor(self.data)
        if d.data.ndim != 4 or d.data.shape[1] != 1:
            raise ValueError(f"disparity must be (B,1,H,W), got {d.data.shape}")
        if not np.all(np.isfinite(d.data)):
            raise ValueError("disparity must be finite")
        if self.valid is not None and self.valid.shape[2:] != d.data.shape[2:]:
            raise ValueError("valid mask extents must match disparity extents")
        self.data = d

    @property
    def shape(self):
        return self.data.shape


@dataclass
class MetricReport:
    """End-point error and >t px error rates over one evaluation region."""

    epe: float
    err_gt_1px: float
    err_gt_3px: float
    region: str

    def __post_init__(self):
        if self.err_gt_3px > self.err_gt_1px + 1e-12:
            raise ValueError(">3px rate cannot exceed >1px rate")

    def row(self) -> str:
        return (f"{self.region:>4}  epe={self.epe:8.4f}  "
                f">1px={self.err_gt_1px * 100:6.2f}%  >3px={self.err_gt_3px * 100:6.2f}%")

    def csv_row(self) -> str:
        return f"{self.region},{self.epe:.6f},{self.err_gt_1px:.6f},{self.err_gt_3px:.6f}"


def regress_disparity(m: AttentionMap, valid: Optional[ValidMask] = None) -> DisparityField:
    """Expected offset under each attention row: D(i,j) = sum_k (j-k) M(i,j,k).

    Fractional values arise when mass splits over adjacent columns; values
    can go negative if mass sits at k > j.
    """
    if m.direction != "r2l":
        raise ValueError("disparity regression expects a right-to-left map")
    B, H, W, _ = m.data.data.shape
    j = np.arange(W, dtype=m.data.data.dtype)[:, None]
    k = np.arange(W, dtype=m.data.data.dtype)[None, :]
    coef = Tensor(np.broadcast_to(j - k, (1, 1, W, W)).copy())
    d = tsum(m.data * coef, axis=3).reshape(B, 1, H, W)
    return DisparityField(d, valid=valid, scale_factor=1.0)


def fill_occlusions(d: DisparityField) -> DisparityField:
    """Replace invalid pixels by mask-normalized 3x3 averages, iterated.

    Each sweep fills every invalid pixel with at least one valid neighbor;
    newly filled pixels count as valid for the next sweep.  Valid pixels
    are never altered; the result is fully valid.  The sweeps are linear in
    the valid values, so gradients flow through the filled pixels.
    """
    if d.valid is None:
        raise ValueError("fill_occlusions needs a valid mask")
    mask = d.valid.data.data.copy()
    if mask.max() <= 0:
        raise ValueError("cannot fill an all-invalid field")
    x = d.data
    for _ in range(FILL_MAX_SWEEPS):
        if mask.min() > 0:
            ones = ValidMask(Tensor(np.ones_like(mask)), side=d.valid.side)
            return DisparityField(x, valid=ones, scale_factor=d.scale_factor)
        counts = _neighbor_counts(mask)
        newly = (mask == 0) & (counts > 0)
        avg = box3_sum(x * Tensor(mask)) / Tensor(np.maximum(counts, 1.0))
        x = where_const(newly, avg, x)
        mask = np.where(newly, 1.0, mask)
    raise RuntimeError(f"occlusion fill did not converge in {FILL_MAX_SWEEPS} sweeps")


def _neighbor_counts(mask: np.ndarray) -> np.ndarray:
    B, C, H, W = mask.shape
    p = np.pad(mask, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(mask)
    for i in range(3):
        for j in range(3):
            out += p[:, :, i:i + H, j:j + W]
    return out


def refine_fuse(d_ini: DisparityField, d_res: Tensor, m_con: Tensor) -> DisparityField:
    """Confidence blend of upsampled coarse disparity with the residual branch.

    The coarse field is bilinearly upsampled to the residual branch's
    extents and its values rescaled by the width ratio (disparity units
    scale with image width); the output is the per-pixel convex blend
    (1 - m_con) * up(d_ini) + m_con * d_res.
    """
    d_res = astensor(d_res)
    m_con = astensor(m_con)
    if np.any(m_con.data < 0.0) or np.any(m_con.data > 1.0):
        raise ValueError("confidence must lie in [0, 1]")
    B, _, H, W = d_res.data.shape
    w_in = d_ini.data.data.shape[3]
    ratio = W / w_in
    up = bilinear_resize(d_ini.data, H, W) * ratio
    fused = (1.0 - m_con) * up + m_con * d_res
    ones = ValidMask(Tensor(np.ones((B, 1, H, W), dtype=fused.data.dtype)), side="left")
    return DisparityField(fused, valid=ones, scale_factor=1.0)


def evaluate(d_pred, d_gt, occ_gt: ValidMask, region: str = "noc") -> MetricReport:
    """EPE and >1px/>3px error rates over non-occluded ('noc') or all pixels."""
    pred = getattr(d_pred, "data", d_pred)
    gt = getattr(d_gt, "data", d_gt)
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch {pred.shape} vs {gt.shape}")
    if region == "noc":
        sel = occ_gt.data.data > 0
    elif region == "all":
        sel = np.ones_like(gt, dtype=bool)
    else:
        raise ValueError(f"region must be 'noc' or 'all', got {region!r}")
    if not sel.any():
        raise ValueError("empty evaluation region")
    err = np.abs(pred - gt)[sel]
    return MetricReport(epe=float(err.mean()),
                        err_gt_1px=float((err > 1.0).mean()),
                        err_gt_3px=float((err > 3.0).mean()),
                        region=region)
