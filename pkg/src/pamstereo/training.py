"""Training loops, deterministic data streams, and evaluation drivers.

A run is a pure function of (config, seed): batches are derived from
(seed, step) so an interrupted run resumed from a checkpoint replays the
exact same stream and continues bit-exactly in single-thread mode.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .attention import ValidMask
from .disparity import MetricReport, evaluate
from .fileio import MATCH_MAGIC, SR_MAGIC, RunConfig, save_checkpoint
from .losses import LossBreakdown, LossWeights
from .matchnet import PasmConfig, PasmNet, _nearest_upsample_mask, stack_pairs, train_step_pasm
from .synth import StereoSample, bicubic_resize, downsample_bicubic, gen_stereo_pair, psnr, random_scene
from .tensor import Tensor, default_dtype

__all__ = [
    "derive_seed",
    "lr_at",
    "LOSS_CSV_HEADER",
    "SR_CSV_HEADER",
    "weights_from_config",
    "synth_match_batch",
    "synth_sr_batch",
    "train_matchnet",
    "train_srnet",
    "eval_matchnet",
    "mask_iou",
    "make_eval_scenes",
]

LOSS_CSV_HEADER = "step,lp,ls,lpam1,lpam2,lpam3,total,lr"
SR_CSV_HEADER = "step,lsr,lpam,total,lr"


def derive_seed(*parts: int) -> int:
    """Stable scalar seed from a tuple (platform-independent)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def lr_at(step: int, cfg: RunConfig) -> float:
    """Two-phase step decay: initial rate, then decayed for the rest."""
    boundary = cfg.lr_decay_step if cfg.lr_decay_step > 0 else cfg.steps // 2
    return cfg.lr if step < boundary else cfg.lr * cfg.lr_decay


def weights_from_config(cfg: RunConfig) -> LossWeights:
    return LossWeights(alpha=cfg.alpha, lambda_s=cfg.lambda_s,
                       lambda_pam=cfg.lambda_pam, lambda_pam_s=cfg.lambda_pam_s,
                       lambda_pam_c=cfg.lambda_pam_c, lambda_sr_pam=cfg.lambda_sr_pam)


# -- deterministic data streams -------------------------------------------------

def synth_match_batch(cfg: RunConfig, step: int) -> Tuple[Tensor, Tensor]:
    """Fresh random-dot stereo scenes for one step, derived from (seed, step)."""
    samples = [gen_stereo_pair(random_scene(cfg.height, cfg.width,
                                            seed=derive_seed(cfg.seed, step, i),
                                            max_disp=cfg.max_disp,
                                            texture=cfg.texture,
                                            channels=cfg.channels))
               for i in range(cfg.batch)]
    return stack_pairs(samples)


def make_eval_scenes(cfg: RunConfig, count: int, tag: int = 7_777) -> List[StereoSample]:
    """Held-out scenes on a seed stream disjoint from training batches."""
    return [gen_stereo_pair(random_scene(cfg.height, cfg.width,
                                         seed=derive_seed(cfg.seed, tag, i),
                                         max_disp=cfg.max_disp,
                                         texture=cfg.texture,
                                         channels=cfg.channels))
            for i in range(count)]


def synth_sr_batch(cfg: RunConfig, step: int):
    """LR/HR stereo triples for SR training, with flip augmentation.

    Horizontal flips swap the left/right roles so epipolar geometry stays
    valid; vertical flips apply to both views directly.
    """
    lr_l, lr_r, hr_l = [], [], []
    for i in range(cfg.batch):
        seed = derive_seed(cfg.seed, step, i)
        s = gen_stereo_pair(random_scene(cfg.height, cfg.width, seed=seed,
                                         max_disp=cfg.max_disp, texture=cfg.texture,
                                         channels=cfg.channels))
        left, right = s.left.data[0], s.right.data[0]
        rng = np.random.default_rng(derive_seed(cfg.seed, step, i, 99))
        if rng.random() < 0.5:  # vertical flip
            left, right = left[:, ::-1].copy(), right[:, ::-1].copy()
        if rng.random() < 0.5:  # horizontal flip + view swap
            left, right = right[:, :, ::-1].copy(), left[:, :, ::-1].copy()
        lr_l.append(downsample_bicubic(left[None], cfg.scale)[0])
        lr_r.append(downsample_bicubic(right[None], cfg.scale)[0])
        hr_l.append(left)
    dt = default_dtype()
    return (Tensor(np.stack(lr_l).astype(dt)), Tensor(np.stack(lr_r).astype(dt)),
            Tensor(np.stack(hr_l).astype(dt)))


# -- training loops ----------------------------------------------------------------

@dataclass
class TrainLog:
    header: str
    rows: List[str] = field(default_factory=list)

    def add(self, step: int, breakdown: LossBreakdown, lr: float) -> None:
        vals = [f"{step}"] + [f"{v:.8f}" for v in breakdown.terms.values()]
        vals += [f"{breakdown.total:.8f}", f"{lr:.8g}"]
        self.rows.append(",".join(vals))

    def text(self) -> str:
        return self.header + "\n" + "\n".join(self.rows) + ("\n" if self.rows else "")

    def save(self, path) -> None:
        Path(path).write_text(self.text())

    def totals(self) -> List[float]:
        return [float(r.split(",")[-2]) for r in self.rows]


def train_matchnet(net: PasmNet, cfg: RunConfig,
                   batch_fn: Optional[Callable[[int], Tuple[Tensor, Tensor]]] = None,
                   out_dir=None, start_step: int = 0,
                   log_every: int = 0) -> TrainLog:
    """Run the unsupervised matching loop from `start_step` to cfg.steps."""
    batch_fn = batch_fn or (lambda step: synth_match_batch(cfg, step))
    w = weights_from_config(cfg)
    log = TrainLog(LOSS_CSV_HEADER)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if start_step == 0:
            save_checkpoint(out / "initial.ckpt", net.params, 0, MATCH_MAGIC)
    for step in range(start_step, cfg.steps):
        left, right = batch_fn(step)
        breakdown = train_step_pasm(net, left, right, w, lr=lr_at(step, cfg))
        log.add(step, breakdown, lr_at(step, cfg))
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            print(f"step {step}: total={breakdown.total:.5f}", flush=True)
        if out is not None and cfg.checkpoint_every > 0 and \
                (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step{step + 1:06d}.ckpt", net.params, step + 1, MATCH_MAGIC)
    if out is not None:
        save_checkpoint(out / "final.ckpt", net.params, cfg.steps, MATCH_MAGIC)
        log.save(out / "loss.csv")
    return log


def train_srnet(net, cfg: RunConfig, batch_fn=None, out_dir=None,
                start_step: int = 0, log_every: int = 0) -> TrainLog:
    """SR training loop; mirrors train_matchnet with the SR loss CSV schema."""
    from .srnet import train_step_passr
    batch_fn = batch_fn or (lambda step: synth_sr_batch(cfg, step))
    log = TrainLog(SR_CSV_HEADER)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if start_step == 0:
            save_checkpoint(out / "initial.ckpt", net.params, 0, SR_MAGIC)
    for step in range(start_step, cfg.steps):
        lr_left, lr_right, hr_left = batch_fn(step)
        breakdown = train_step_passr(net, lr_left, lr_right, hr_left,
                                     lam=cfg.lambda_sr_pam, lr=lr_at(step, cfg),
                                     lambda_pam_s=cfg.lambda_pam_s,
                                     lambda_pam_c=cfg.lambda_pam_c)
        log.add(step, breakdown, lr_at(step, cfg))
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            print(f"step {step}: total={breakdown.total:.6f}", flush=True)
        if out is not None and cfg.checkpoint_every > 0 and \
                (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step{step + 1:06d}.ckpt", net.params, step + 1, SR_MAGIC)
    if out is not None:
        save_checkpoint(out / "final.ckpt", net.params, cfg.steps, SR_MAGIC)
        log.save(out / "loss.csv")
    return log


# -- evaluation ----------------------------------------------------------------------

def mask_iou(pred_occluded: np.ndarray, gt_occluded: np.ndarray) -> float:
    """Intersection-over-union of two binary occlusion masks."""
    p = pred_occluded > 0.5
    g = gt_occluded > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class MatchEvalResult:
    noc: MetricReport
    all: MetricReport
    per_sample: List[Tuple[MetricReport, MetricReport]]
    occlusion_iou: float


def eval_matchnet(net: PasmNet, samples: List[StereoSample]) -> MatchEvalResult:
    """Aggregate metrics of the refined disparity over held-out samples."""
    errs_noc, errs_all = [], []
    per_sample = []
    ious = []
    for s in samples:
        left, right = stack_pairs([s])
        fwd = net.forward(left, right)
        pred = fwd.refined.data.data
        gt = s.d_gt.data.data
        rep_noc = evaluate(Tensor(pred), Tensor(gt), s.occ_gt, region="noc")
        rep_all = evaluate(Tensor(pred), Tensor(gt), s.occ_gt, region="all")
        per_sample.append((rep_noc, rep_all))
        sel_noc = s.occ_gt.data.data > 0
        err = np.abs(pred - gt)
        errs_noc.append(err[sel_noc])
        errs_all.append(err.reshape(-1))
        ious.append(mask_iou(1.0 - fwd.v_left_full.data.data,
                             1.0 - s.occ_gt.data.data))
    noc = np.concatenate(errs_noc)
    al = np.concatenate(errs_all)
    agg_noc = MetricReport(epe=float(noc.mean()), err_gt_1px=float((noc > 1).mean()),
                           err_gt_3px=float((noc > 3).mean()), region="noc")
    agg_all = MetricReport(epe=float(al.mean()), err_gt_1px=float((al > 1).mean()),
                           err_gt_3px=float((al > 3).mean()), region="all")
    return MatchEvalResult(noc=agg_noc, all=agg_all, per_sample=per_sample,
                           occlusion_iou=float(np.mean(ious)))
