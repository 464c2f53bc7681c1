"""Toy-scale stereo matching network built on epipolar attention.

Pipeline: a shared hourglass extractor produces a four-level feature
pyramid per view; a cascaded attention module accumulates matching costs
coarse-to-fine over three stages of residual attention blocks; each stage's
costs pass through an output module (softmax, validity masks, disparity
regression); the quarter-resolution disparity is occlusion-filled and fused
with a full-resolution residual branch under a learned confidence map.

All convolutions share parameters between the two views, activations are
leaky ReLU (slope 0.1), and there is no normalization anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import (
    AttentionMap,
    CostVolumeSlice,
    ValidMask,
    attention_from_cost,
    clean_mask,
    valid_mask,
)
from .disparity import DisparityField, fill_occlusions, refine_fuse, regress_disparity
from .losses import (
    LossBreakdown,
    LossWeights,
    pam_cycle,
    pam_photometric,
    pam_smoothness,
    photometric_loss,
    smoothness_loss,
    total_unsup_loss,
    warp_with_disparity,
)
from .ops import (
    bilinear_resize,
    conv2d,
    instance_norm,
    kaiming_conv,
    leaky_relu,
    pad_edges,
    resize_volume,
    row_inner,
    sigmoid,
    slice4,
)
from .optim import adam_update
from .tensor import NumericsError, Param, Tape, Tensor, concat, default_dtype

__all__ = ["PasmConfig", "FeaturePyramid", "StageOutput", "PasmForward", "PasmNet",
           "train_step_pasm", "stack_pairs"]

SLOPE = 0.1


@dataclass
class PasmConfig:
    channels: int = 32
    blocks_per_stage: int = 4
    stages: int = 3
    d_max: Optional[int] = None     # full-resolution pixels
    in_channels: int = 1
    refine_channels: int = 16
    tau: float = 0.1
    # the query/key branch reads standardized features, so those two convs
    # alone set the logit scale; the cycle regularizer rewards unbounded
    # sharpening, and Adam would saturate the softmax (where gradients die,
    # freezing whatever correspondence came first) within ~100 steps.  A
    # slow query/key rate keeps sharpening gradual so the reconstruction
    # terms pick the match before the softmax hardens; decoupled weight
    # decay pins the long-run logit equilibrium.
    cascade_decay: float = 0.02
    qk_decay: float = 0.3
    qk_lr_scale: float = 0.1

    def __post_init__(self):
        if self.stages < 1 or self.stages > 3:
            raise ValueError("stages must lie in 1..3")
        if min(self.channels, self.blocks_per_stage, self.in_channels,
               self.refine_channels) < 1:
            raise ValueError("counts must be positive")


@dataclass
class FeaturePyramid:
    """Decoder-path features at 1/16, 1/8, 1/4 and 1/2 resolution."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def level(self, s: int) -> Tensor:
        return (self.f1, self.f2, self.f3, self.f4)[s - 1]


@dataclass
class StageOutput:
    cost_r2l: CostVolumeSlice
    cost_l2r: CostVolumeSlice
    attn_r2l: AttentionMap
    attn_l2r: AttentionMap
    v_left: ValidMask               # post-morphology, stage scale
    v_right: ValidMask
    v_left_raw: ValidMask           # pre-morphology column-mass masks
    v_right_raw: ValidMask
    d_hat: DisparityField
    scale: int                      # 1, 2, 3
    to_full: int                    # disparity multiplier to full resolution


@dataclass
class PasmForward:
    stages: List[StageOutput]
    d_initial: DisparityField       # stage-3 disparity, occlusion filled (1/4 res)
    refined: DisparityField         # full resolution
    confidence: Tensor
    v_left_full: ValidMask          # stage-3 left mask at full res, re-cleaned
    block_costs: Optional[Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]]] = None


def _stage_downscale(stage: int) -> int:
    return 16 >> (stage - 1)        # 16, 8, 4


class PasmNet:
    """Parameter container plus the forward pipeline."""

    def __init__(self, cfg: PasmConfig, seed: int = 0):
        self.cfg = cfg
        self.params: Dict[str, Param] = {}
        rng = np.random.default_rng(seed)
        C, ci, R = cfg.channels, cfg.in_channels, cfg.refine_channels

        def conv_param(name, cout, cin, k, bias=True, gain=1.0):
            p = kaiming_conv(rng, cout, cin, k, k, SLOPE)
            if gain != 1.0:
                p.value.data *= gain
            self.params[f"{name}.w"] = p
            if bias:
                self.params[f"{name}.b"] = Param(np.zeros(cout, dtype=default_dtype()))

        conv_param("extract.stem", C, ci, 3)
        for i in range(1, 5):
            conv_param(f"extract.enc{i}", C, C, 3)
        conv_param("extract.mid", C, C, 3)
        for i in range(1, 4):
            conv_param(f"extract.dec{i}", C, 2 * C, 3)
        for s in range(2, cfg.stages + 1):
            conv_param(f"cascade.entry{s}", C, 2 * C, 1)
        # gentle feature gains keep residual growth tame across 12 cascaded
        # blocks (no normalization layers and no softmax temperature anywhere,
        # so initialization and the cascade weight decay carry the load)
        # query/key read unit-variance features, so their gain sets the
        # initial logit spread directly; 0.25 keeps softmax near-uniform
        for s in range(1, cfg.stages + 1):
            for b in range(1, cfg.blocks_per_stage + 1):
                conv_param(f"cascade.s{s}b{b}.feat_a", C, C, 3, gain=0.5)
                conv_param(f"cascade.s{s}b{b}.feat_b", C, C, 3, gain=0.5)
                conv_param(f"cascade.s{s}b{b}.query", C, C, 1, bias=False, gain=0.25)
                conv_param(f"cascade.s{s}b{b}.key", C, C, 1, bias=False, gain=0.25)
        conv_param("refine.in", R, C + 1, 3)
        conv_param("refine.down", R, R, 3)
        conv_param("refine.mid", R, R, 3)
        conv_param("refine.up", R, 2 * R, 3)
        conv_param("refine.full", R, R, 3)
        conv_param("refine.head", 2, R, 3)

    # -- plumbing ---------------------------------------------------------

    def _conv(self, name, x, stride=1, pad=1, act=True, dilation=1):
        w = self.params[f"{name}.w"]
        b = self.params.get(f"{name}.b")
        out = conv2d(x, w, b, stride=stride, dilation=dilation, pad=pad)
        return leaky_relu(out, SLOPE) if act else out

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def cast(self, dtype) -> None:
        """Switch parameter precision (moments follow)."""
        for p in self.params.values():
            p.value.data = p.value.data.astype(dtype)
            p.adam_m = p.adam_m.astype(dtype)
            p.adam_v = p.adam_v.astype(dtype)

    # -- feature extraction --------------------------------------------------

    def extract(self, img: Tensor) -> FeaturePyramid:
        """Hourglass encoder/decoder; levels come from the decoder path."""
        H, W = img.data.shape[2:]
        if H < 16 or W < 16:
            raise ValueError(f"extents {H}x{W} too small (need >= 16)")
        if H % 16 or W % 16:
            raise ValueError("extents must be padded to a multiple of 16 before extraction")
        x0 = self._conv("extract.stem", img)                  # full
        e1 = self._conv("extract.enc1", x0, stride=2)         # 1/2
        e2 = self._conv("extract.enc2", e1, stride=2)         # 1/4
        e3 = self._conv("extract.enc3", e2, stride=2)         # 1/8
        e4 = self._conv("extract.enc4", e3, stride=2)         # 1/16
        f1 = self._conv("extract.mid", e4)                    # 1/16
        up2 = bilinear_resize(f1, *e3.data.shape[2:])
        f2 = self._conv("extract.dec1", concat([up2, e3]))    # 1/8
        up3 = bilinear_resize(f2, *e2.data.shape[2:])
        f3 = self._conv("extract.dec2", concat([up3, e2]))    # 1/4
        up4 = bilinear_resize(f3, *e1.data.shape[2:])
        f4 = self._conv("extract.dec3", concat([up4, e1]))    # 1/2
        return FeaturePyramid(f1, f2, f3, f4)

    # -- cascaded attention ---------------------------------------------------

    def _block(self, s: int, b: int, f_l, f_r, c_r2l, c_l2r):
        """One residual attention block; feature convs shared across views.

        The query/key branch reads standardized features: with no
        normalization the cost logits inflate without bound over the
        cascade and the softmax degenerates (see PasmConfig.cascade_decay).
        """
        name = f"cascade.s{s}b{b}"
        g_l = self._conv(f"{name}.feat_b", self._conv(f"{name}.feat_a", f_l))
        g_r = self._conv(f"{name}.feat_b", self._conv(f"{name}.feat_a", f_r))
        n_l = instance_norm(g_l)
        n_r = instance_norm(g_r)
        q_l = self._conv(f"{name}.query", n_l, pad=0, act=False)
        k_r = self._conv(f"{name}.key", n_r, pad=0, act=False)
        c_r2l = c_r2l + row_inner(q_l, k_r)
        q_r = self._conv(f"{name}.query", n_r, pad=0, act=False)
        k_l = self._conv(f"{name}.key", n_l, pad=0, act=False)
        c_l2r = c_l2r + row_inner(q_r, k_l)
        return f_l + g_l, f_r + g_r, c_r2l, c_l2r

    def _stage_d_max(self, stage: int, w_stage: int) -> Optional[int]:
        if self.cfg.d_max is None or self.cfg.d_max < 0:
            return None
        d = math.ceil(self.cfg.d_max / _stage_downscale(stage))
        return min(d, w_stage - 1)

    def output_module(self, c_r2l: CostVolumeSlice, c_l2r: CostVolumeSlice,
                      stage: int) -> StageOutput:
        w_stage = c_r2l.shape[3]
        d_max = self._stage_d_max(stage, w_stage)
        attn_r2l = attention_from_cost(c_r2l, "r2l", scale=stage, d_max=d_max)
        attn_l2r = attention_from_cost(c_l2r, "l2r", scale=stage, d_max=d_max)
        raw_left = valid_mask(attn_l2r, self.cfg.tau)
        raw_right = valid_mask(attn_r2l, self.cfg.tau)
        v_left = _nonempty(clean_mask(raw_left))
        v_right = _nonempty(clean_mask(raw_right))
        d_hat = regress_disparity(attn_r2l, valid=v_left)
        return StageOutput(cost_r2l=c_r2l, cost_l2r=c_l2r,
                           attn_r2l=attn_r2l, attn_l2r=attn_l2r,
                           v_left=v_left, v_right=v_right,
                           v_left_raw=raw_left, v_right_raw=raw_right,
                           d_hat=d_hat, scale=stage, to_full=_stage_downscale(stage))

    def cascade(self, fp_l: FeaturePyramid, fp_r: FeaturePyramid,
                collect_blocks: bool = False):
        B = fp_l.f1.data.shape[0]
        h, w = fp_l.f1.data.shape[2:]
        dtype = fp_l.f1.data.dtype
        zeros = np.zeros((B, h, w, w), dtype=dtype)
        c_r2l, c_l2r = Tensor(zeros.copy()), Tensor(zeros.copy())
        f_l, f_r = fp_l.f1, fp_r.f1
        outputs: List[StageOutput] = []
        records: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}
        for s in range(1, self.cfg.stages + 1):
            if s > 1:
                lvl_l, lvl_r = fp_l.level(s), fp_r.level(s)
                hs, ws = lvl_l.data.shape[2:]
                f_l = self._conv(f"cascade.entry{s}",
                                 concat([bilinear_resize(f_l, hs, ws), lvl_l]), pad=0)
                f_r = self._conv(f"cascade.entry{s}",
                                 concat([bilinear_resize(f_r, hs, ws), lvl_r]), pad=0)
                c_r2l = resize_volume(c_r2l, (hs, ws, ws))
                c_l2r = resize_volume(c_l2r, (hs, ws, ws))
            for b in range(1, self.cfg.blocks_per_stage + 1):
                prev_r2l, prev_l2r = c_r2l, c_l2r
                f_l, f_r, c_r2l, c_l2r = self._block(s, b, f_l, f_r, c_r2l, c_l2r)
                if collect_blocks:
                    records[(s, b)] = (c_r2l.data - prev_r2l.data,
                                       c_l2r.data - prev_l2r.data)
            outputs.append(self.output_module(CostVolumeSlice(c_r2l),
                                              CostVolumeSlice(c_l2r), s))
        return (outputs, records) if collect_blocks else (outputs, None)

    # -- refinement ------------------------------------------------------------

    def refine(self, d_filled: DisparityField, f4_left: Tensor,
               out_hw: Tuple[int, int]) -> Tuple[DisparityField, Tensor]:
        """Residual disparity + confidence from half-res features, fused at full res."""
        h2, w2 = f4_left.data.shape[2:]
        d_half = bilinear_resize(d_filled.data, h2, w2) * (w2 / d_filled.data.data.shape[3])
        x = concat([d_half, f4_left])
        r1 = self._conv("refine.in", x)                      # 1/2
        r2 = self._conv("refine.down", r1, stride=2)         # 1/4
        r3 = self._conv("refine.mid", r2)                    # 1/4
        up = bilinear_resize(r3, h2, w2)
        r4 = self._conv("refine.up", concat([up, r1]))       # 1/2
        full = bilinear_resize(r4, *out_hw)
        r5 = self._conv("refine.full", full)
        head = self._conv("refine.head", r5, act=False)
        d_res_map = slice4(head, None, (0, 1), None, None)
        con_map = sigmoid(slice4(head, None, (1, 2), None, None))
        refined = refine_fuse(d_filled, d_res_map, con_map)
        return refined, con_map

    # -- full pipeline ------------------------------------------------------------

    def forward(self, left: Tensor, right: Tensor,
                collect_blocks: bool = False) -> PasmForward:
        if left.data.shape != right.data.shape:
            raise ValueError("left/right extents must match")
        H, W = left.data.shape[2:]
        left_p, right_p = _pad16(left), _pad16(right)
        hw_p = left_p.data.shape[2:]
        fp_l = self.extract(left_p)
        fp_r = self.extract(right_p)
        stages, records = self.cascade(fp_l, fp_r, collect_blocks=collect_blocks)
        last = stages[-1]
        # occlusion structures are a few pixels wide at 1/4 scale, so the
        # morphological cleanup runs on the full-resolution upsampled mask
        # (where a 3x3 element no longer erases them) and the fill mask is
        # that cleaned mask brought back to the stage grid
        v_full = _nonempty(clean_mask(_nearest_upsample_mask(last.v_left_raw, hw_p)))
        f = last.to_full
        fill_valid = ValidMask(Tensor(v_full.data.data[:, :, ::f, ::f].copy()), side="left")
        filled = fill_occlusions(DisparityField(last.d_hat.data,
                                                valid=_nonempty(fill_valid)))
        refined, confidence = self.refine(filled, fp_l.f4, hw_p)
        if hw_p != (H, W):
            refined = DisparityField(
                slice4(refined.data, None, None, (0, H), (0, W)),
                valid=ValidMask(Tensor(np.ones((left.data.shape[0], 1, H, W),
                                               dtype=left.data.dtype)), side="left"),
                scale_factor=1.0)
            confidence = slice4(confidence, None, None, (0, H), (0, W))
            v_full = ValidMask(Tensor(v_full.data.data[:, :, :H, :W].copy()), side="left")
        return PasmForward(stages=stages, d_initial=filled, refined=refined,
                           confidence=confidence, v_left_full=v_full,
                           block_costs=records)


def _nonempty(v: ValidMask) -> ValidMask:
    """Degenerate-mask guard: a sample whose cleaned mask carries no valid
    pixel falls back to all-valid (no evidence means no masking)."""
    m = v.data.data
    per_sample = m.reshape(m.shape[0], -1).max(axis=1)
    if per_sample.min() > 0:
        return v
    fixed = m.copy()
    fixed[per_sample == 0] = 1.0
    return ValidMask(Tensor(fixed), side=v.side)


def _pad16(img: Tensor) -> Tensor:
    """Zero-pad bottom/right so both extents divide by 16."""
    H, W = img.data.shape[2:]
    ph, pw = (-H) % 16, (-W) % 16
    if ph == 0 and pw == 0:
        return img
    return pad_edges(img, 0, ph, 0, pw)


def stack_pairs(samples) -> Tuple[Tensor, Tensor]:
    """Stack StereoSamples into one (B,C,H,W) left and right tensor pair."""
    left = np.concatenate([s.left.data for s in samples], axis=0)
    right = np.concatenate([s.right.data for s in samples], axis=0)
    dt = default_dtype()
    return Tensor(left.astype(dt)), Tensor(right.astype(dt))


def _nearest_upsample_mask(mask: ValidMask, out_hw: Tuple[int, int]) -> ValidMask:
    m = mask.data.data
    fh = -(-out_hw[0] // m.shape[2])
    fw = -(-out_hw[1] // m.shape[3])
    up = np.repeat(np.repeat(m, fh, axis=2), fw, axis=3)
    return ValidMask(Tensor(up[:, :, :out_hw[0], :out_hw[1]].copy()), side=mask.side)


def train_step_pasm(net: PasmNet, left: Tensor, right: Tensor, w: LossWeights,
                    lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                    qk_decay_scale: float = 1.0) -> LossBreakdown:
    """One unsupervised update: forward, multi-scale losses, backward, Adam.

    Ground-truth disparity is never consulted; supervision comes entirely
    from the stereo pair itself.  `qk_decay_scale` rescales the query/key
    weight decay so a schedule can hold the attention soft while the
    correspondence is being learned and release it to sharpen afterwards.
    """
    H, W = left.data.shape[2:]
    net.zero_grads()
    with Tape() as tape:
        fwd = net.forward(left, right)
        warped = warp_with_disparity(right, fwd.refined)
        lp = photometric_loss(left, warped, fwd.v_left_full, alpha=w.alpha)
        ls = smoothness_loss(fwd.refined, left)
        lpam = []
        for st in fwd.stages:
            hs, ws = st.attn_r2l.shape[1], st.attn_r2l.shape[2]
            il = bilinear_resize(left, hs, ws)
            ir = bilinear_resize(right, hs, ws)
            photo = pam_photometric(il, ir, st.attn_r2l, st.attn_l2r,
                                    st.v_left, st.v_right)
            smooth = pam_smoothness([st.attn_r2l, st.attn_l2r])
            cycle = pam_cycle(st.attn_r2l, st.attn_l2r, st.v_left, st.v_right)
            lpam.append(photo + w.lambda_pam_s * smooth + w.lambda_pam_c * cycle)
        while len(lpam) < 3:
            lpam.append(Tensor(np.zeros((), dtype=left.data.dtype)))
        breakdown = total_unsup_loss(lp, ls, lpam, w)
        if not np.isfinite(breakdown.total):
            raise NumericsError("non-finite training loss; step aborted")
        tape.backward(breakdown.total_tensor)
    for name, p in net.params.items():
        if p.value.grad is not None:
            if ".query" in name or ".key" in name:
                decay, scale = net.cfg.qk_decay * qk_decay_scale, net.cfg.qk_lr_scale
            elif name.startswith("cascade."):
                decay, scale = net.cfg.cascade_decay, 1.0
            else:
                decay, scale = 0.0, 1.0
            adam_update(p, lr=lr * scale, beta1=betas[0], beta2=betas[1],
                        weight_decay=decay)
    net.zero_grads()
    return breakdown
