"""Toy-scale stereo super-resolution network with attention fusion.

Low-resolution left/right views pass through a shared extractor (conv +
residual block, then a residual module of dilated-convolution groups), the
attention fusion block aggregates right-view features into the left path
under the epipolar attention map, and a residual tail with a sub-pixel
convolution upscales the fused features to the output image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .attention import (
    AttentionMap,
    CostVolumeSlice,
    ValidMask,
    attention_from_cost,
    clean_mask,
    valid_mask,
)
from .losses import (
    LossBreakdown,
    pam_cycle,
    pam_photometric,
    pam_smoothness,
    sr_loss,
)
from .ops import (
    bilinear_resize,
    conv2d,
    kaiming_conv,
    leaky_relu,
    pixel_shuffle,
    row_apply,
    row_inner,
)
from .optim import adam_update
from .tensor import NumericsError, Param, Tape, Tensor, concat, default_dtype

__all__ = ["SrConfig", "SrOutput", "PassrNet", "train_step_passr"]

SLOPE = 0.1
_DILATIONS = (1, 4, 8)


@dataclass
class SrConfig:
    scale: int = 2
    channels: int = 32
    aspp_groups: int = 3
    aspp_repeats: int = 2           # (group block + residual block) repetitions
    residual_blocks_tail: int = 4
    in_channels: int = 1
    tau: float = 0.1

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError("scale must be 2 or 4")
        if min(self.channels, self.aspp_groups, self.aspp_repeats,
               self.residual_blocks_tail, self.in_channels) < 1:
            raise ValueError("counts must be positive")


@dataclass
class SrOutput:
    sr_left: Tensor
    attn_r2l: AttentionMap
    attn_l2r: AttentionMap
    v_left: ValidMask
    v_right: ValidMask
    fused: Tensor


class PassrNet:
    def __init__(self, cfg: SrConfig, seed: int = 0):
        self.cfg = cfg
        self.params: Dict[str, Param] = {}
        rng = np.random.default_rng(seed)
        C, ci, s = cfg.channels, cfg.in_channels, cfg.scale

        def conv_param(name, cout, cin, k, bias=True, gain=1.0):
            p = kaiming_conv(rng, cout, cin, k, k, SLOPE)
            if gain != 1.0:
                p.value.data *= gain
            self.params[f"{name}.w"] = p
            if bias:
                self.params[f"{name}.b"] = Param(np.zeros(cout, dtype=default_dtype()))

        conv_param("head.conv", C, ci, 3)
        self._resblock_params(conv_param, "head.res", C)
        # every residual branch closes with a small-gain conv so ~13 stacked
        # additions keep feature magnitude near the stem output
        for r in range(1, cfg.aspp_repeats + 1):
            for g in range(1, cfg.aspp_groups + 1):
                for d in _DILATIONS:
                    conv_param(f"aspp{r}.g{g}.d{d}", C, C, 3)
                conv_param(f"aspp{r}.g{g}.fuse", C, C, 1, gain=0.1)
            self._resblock_params(conv_param, f"aspp{r}.res", C)
        self._resblock_params(conv_param, "fusion.transition", C)
        # keep initial logits shallow so the softmax starts near uniform
        conv_param("fusion.query", C, C, 1, bias=False, gain=0.25)
        conv_param("fusion.key", C, C, 1, bias=False, gain=0.25)
        conv_param("fusion.response", C, C, 1, bias=False)
        conv_param("fusion.mix", C, 2 * C + 1, 1)
        for t in range(1, cfg.residual_blocks_tail + 1):
            self._resblock_params(conv_param, f"tail.res{t}", C)
        conv_param("tail.expand", C * s * s, C, 1)
        conv_param("tail.out", ci, C, 3, gain=0.1)

    @staticmethod
    def _resblock_params(conv_param, name, C):
        conv_param(f"{name}.a", C, C, 3)
        conv_param(f"{name}.b", C, C, 3, gain=0.1)

    # -- helpers --------------------------------------------------------------

    def _conv(self, name, x, pad=1, act=True, dilation=1):
        w = self.params[f"{name}.w"]
        b = self.params.get(f"{name}.b")
        out = conv2d(x, w, b, dilation=dilation, pad=pad)
        return leaky_relu(out, SLOPE) if act else out

    def _resblock(self, name, x):
        y = self._conv(f"{name}.b", self._conv(f"{name}.a", x), act=False)
        return x + y

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def cast(self, dtype) -> None:
        for p in self.params.values():
            p.value.data = p.value.data.astype(dtype)
            p.adam_m = p.adam_m.astype(dtype)
            p.adam_v = p.adam_v.astype(dtype)

    # -- feature extraction ------------------------------------------------------

    def _aspp_group(self, name, x):
        """Three parallel dilated convs summed, fused by 1x1, residual add."""
        acc = None
        for d in _DILATIONS:
            y = self._conv(f"{name}.d{d}", x, pad=d, dilation=d)
            acc = y if acc is None else acc + y
        return x + self._conv(f"{name}.fuse", acc, pad=0, act=False)

    def residual_aspp(self, x):
        for r in range(1, self.cfg.aspp_repeats + 1):
            for g in range(1, self.cfg.aspp_groups + 1):
                x = self._aspp_group(f"aspp{r}.g{g}", x)
            x = self._resblock(f"aspp{r}.res", x)
        return x

    def extract(self, img):
        x = self._conv("head.conv", img)
        x = self._resblock("head.res", x)
        return self.residual_aspp(x)

    # -- attention fusion -----------------------------------------------------------

    def sr_pam_module(self, f_left, f_right):
        """Attention both ways, right-view response aggregation, 1x1 fusion."""
        t_l = self._resblock("fusion.transition", f_left)
        t_r = self._resblock("fusion.transition", f_right)
        q_l = self._conv("fusion.query", t_l, pad=0, act=False)
        k_r = self._conv("fusion.key", t_r, pad=0, act=False)
        attn_r2l = attention_from_cost(
            CostVolumeSlice(row_inner(q_l, k_r)), "r2l", scale=1)
        q_r = self._conv("fusion.query", t_r, pad=0, act=False)
        k_l = self._conv("fusion.key", t_l, pad=0, act=False)
        attn_l2r = attention_from_cost(
            CostVolumeSlice(row_inner(q_r, k_l)), "l2r", scale=1)
        from .matchnet import _nonempty
        v_left = _nonempty(clean_mask(valid_mask(attn_l2r, self.cfg.tau)))
        v_right = _nonempty(clean_mask(valid_mask(attn_r2l, self.cfg.tau)))
        response = self._conv("fusion.response", t_r, pad=0, act=False)
        out = row_apply(attn_r2l.data, response)
        fused = self._conv("fusion.mix",
                           concat([out, f_left, v_left.data]), pad=0)
        return fused, attn_r2l, attn_l2r, v_left, v_right

    # -- full pipeline -----------------------------------------------------------------

    def forward(self, lr_left, lr_right) -> SrOutput:
        if lr_left.data.shape != lr_right.data.shape:
            raise ValueError("left/right extents must match")
        f_l = self.extract(lr_left)
        f_r = self.extract(lr_right)
        fused, attn_r2l, attn_l2r, v_left, v_right = self.sr_pam_module(f_l, f_r)
        x = fused
        for t in range(1, self.cfg.residual_blocks_tail + 1):
            x = self._resblock(f"tail.res{t}", x)
        x = self._conv("tail.expand", x, pad=0)
        x = pixel_shuffle(x, self.cfg.scale)
        sr = self._conv("tail.out", x, act=False)
        # global skip: regress the residual over a plain upsample
        sr = sr + bilinear_resize(lr_left, *sr.data.shape[2:])
        return SrOutput(sr_left=sr, attn_r2l=attn_r2l, attn_l2r=attn_l2r,
                        v_left=v_left, v_right=v_right, fused=fused)


def train_step_passr(net: PassrNet, lr_left, lr_right, hr_left, lam: float = 0.005,
                     lr: float = 2e-4, lambda_pam_s: float = 1.0,
                     lambda_pam_c: float = 1.0,
                     betas: Tuple[float, float] = (0.9, 0.999)) -> LossBreakdown:
    """One SR update: MSE against the high-resolution target plus the
    single-scale attention regularizers on the low-resolution pair."""
    if hr_left.data.shape[2] != lr_left.data.shape[2] * net.cfg.scale:
        raise ValueError("HR extents must be scale x LR extents")
    net.zero_grads()
    with Tape() as tape:
        out = net.forward(lr_left, lr_right)
        photo = pam_photometric(lr_left, lr_right, out.attn_r2l, out.attn_l2r,
                                out.v_left, out.v_right)
        smooth = pam_smoothness([out.attn_r2l, out.attn_l2r])
        cycle = pam_cycle(out.attn_r2l, out.attn_l2r, out.v_left, out.v_right)
        pam_term = photo + lambda_pam_s * smooth + lambda_pam_c * cycle
        breakdown = sr_loss(out.sr_left, hr_left, pam_term, lam=lam)
        if not np.isfinite(breakdown.total):
            raise NumericsError("non-finite training loss; step aborted")
        tape.backward(breakdown.total_tensor)
    for p in net.params.values():
        if p.value.grad is not None:
            adam_update(p, lr=lr, beta1=betas[0], beta2=betas[1])
    net.zero_grads()
    return breakdown
