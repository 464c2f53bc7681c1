"""Command-line surface: gen | train | eval | gradcheck | flops | viz.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
`--threads 1` pins the BLAS pool for bit-reproducible runs; the
PAM_PRECISION environment variable ({f32, f64}) selects the working
precision for verification runs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, f"error: {message}"))


def _build_parser() -> _Parser:
    p = _Parser(prog="pamstereo", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS thread cap (1 = deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic stereo dataset")
    g.add_argument("--config", type=Path, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train the matching or SR network")
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--data", type=Path, default=None,
                   help="dataset manifest (default: on-the-fly synthesis)")
    t.add_argument("--checkpoint", type=Path, default=None,
                   help="resume from this checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--config", type=Path, default=None)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True, help="dataset manifest")
    e.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("gradcheck", help="run the full gradient-check suite")
    c.add_argument("--tol", type=float, default=1e-4)

    f = sub.add_parser("flops", help="attention block vs 3-D convolution cost table")
    f.add_argument("--H", type=int, required=True)
    f.add_argument("--W", type=int, required=True)
    f.add_argument("--C", type=int, required=True)
    f.add_argument("--D", type=int, required=True)

    v = sub.add_parser("viz", help="render attention/disparity/mask figures")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--config", type=Path, default=None)
    v.add_argument("--data", type=Path, required=True)
    v.add_argument("--index", type=int, default=0, help="sample index in the manifest")
    v.add_argument("--rows", type=int, nargs="+", default=None)
    v.add_argument("--out", type=Path, required=True)
    return p


def _apply_threads(n: int) -> None:
    if n and n > 0:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(limits=n)
        except ImportError:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(n)


def _apply_precision() -> None:
    from .tensor import set_default_dtype
    name = os.environ.get("PAM_PRECISION", "f32").lower()
    if name not in ("f32", "f64"):
        raise SystemExit((EXIT_USAGE, f"error: PAM_PRECISION must be f32 or f64, got {name!r}"))
    set_default_dtype({"f32": "float32", "f64": "float64"}[name])


def _load_config(path, seed):
    from .fileio import RunConfig
    cfg = RunConfig.load(path) if path is not None else RunConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


# -- commands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    import numpy as np
    from .fileio import write_manifest, write_pfm, write_png
    from .synth import gen_stereo_pair, random_scene
    from .training import derive_seed

    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cfg.num_samples):
        s = gen_stereo_pair(random_scene(cfg.height, cfg.width,
                                         seed=derive_seed(cfg.seed, 1_000, i),
                                         max_disp=cfg.max_disp, texture=cfg.texture,
                                         channels=cfg.channels))
        names = (f"{i:05d}_left.png", f"{i:05d}_right.png",
                 f"{i:05d}_disp.pfm", f"{i:05d}_occ.png")
        write_png(out / names[0], s.left.data[0])
        write_png(out / names[1], s.right.data[0])
        write_pfm(out / names[2], s.d_gt.data.data[0, 0])
        write_png(out / names[3], s.occ_gt.data.data[0, 0])
        rows.append(names)
    write_manifest(out / "manifest.txt", rows)
    cfg.save(out / "gen.cfg")
    print(f"wrote {len(rows)} samples to {out}")
    return EXIT_OK


def _load_dataset(manifest_path):
    import numpy as np
    from .attention import ValidMask
    from .disparity import DisparityField
    from .fileio import read_manifest, read_pfm, read_png
    from .synth import StereoSample
    from .tensor import Tensor

    root = Path(manifest_path).parent
    samples = []
    for lp, rp, dp, op in read_manifest(manifest_path):
        left = read_png(root / lp)[None]
        right = read_png(root / rp)[None]
        d = read_pfm(root / dp)[None, None].astype(np.float64)
        occ = (read_png(root / op) > 0.5).astype(np.float64)[None]
        mask = ValidMask(Tensor(occ), side="left")
        samples.append(StereoSample(
            left=Tensor(left), right=Tensor(right),
            d_gt=DisparityField(Tensor(d), valid=mask), occ_gt=mask))
    if not samples:
        from .fileio import FileFormatError
        raise FileFormatError(f"empty manifest {manifest_path}")
    return samples


def cmd_train(args) -> int:
    import numpy as np
    from .fileio import MATCH_MAGIC, SR_MAGIC, load_checkpoint
    from .matchnet import PasmConfig, PasmNet, stack_pairs
    from .srnet import PassrNet, SrConfig
    from .synth import downsample_bicubic
    from .tensor import Tensor, default_dtype
    from .training import train_matchnet, train_srnet
    from .viz import loss_curve_figure

    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)

    batch_fn = None
    if args.data is not None:
        samples = _load_dataset(args.data)

        def match_batch(step):
            rng = np.random.default_rng((cfg.seed, step))
            idx = rng.choice(len(samples), size=min(cfg.batch, len(samples)), replace=False)
            return stack_pairs([samples[i] for i in idx])

        def sr_batch(step):
            rng = np.random.default_rng((cfg.seed, step))
            idx = rng.choice(len(samples), size=min(cfg.batch, len(samples)), replace=False)
            dt = default_dtype()
            hr_l = np.concatenate([samples[i].left.data for i in idx]).astype(dt)
            hr_r = np.concatenate([samples[i].right.data for i in idx]).astype(dt)
            return (Tensor(downsample_bicubic(hr_l, cfg.scale).astype(dt)),
                    Tensor(downsample_bicubic(hr_r, cfg.scale).astype(dt)),
                    Tensor(hr_l))

        batch_fn = match_batch if cfg.task == "pasm" else sr_batch

    if cfg.task == "pasm":
        net = PasmNet(PasmConfig(channels=cfg.net_channels, blocks_per_stage=cfg.blocks,
                                 stages=cfg.stages,
                                 d_max=(cfg.d_max if cfg.d_max >= 0 else None),
                                 in_channels=cfg.channels, tau=cfg.tau), seed=cfg.seed)
        start = load_checkpoint(args.checkpoint, net.params, MATCH_MAGIC) \
            if args.checkpoint else 0
        log = train_matchnet(net, cfg, batch_fn=batch_fn, out_dir=out, start_step=start)
    else:
        net = PassrNet(SrConfig(scale=cfg.scale, channels=cfg.net_channels,
                                in_channels=cfg.channels, tau=cfg.tau), seed=cfg.seed)
        start = load_checkpoint(args.checkpoint, net.params, SR_MAGIC) \
            if args.checkpoint else 0
        log = train_srnet(net, cfg, batch_fn=batch_fn, out_dir=out, start_step=start)
    cfg.save(out / "run.cfg")
    if log.rows:
        loss_curve_figure(log.text(), out / "loss_curve.png")
        print(f"final: {log.rows[-1]}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .fileio import MATCH_MAGIC, load_checkpoint
    from .matchnet import PasmConfig, PasmNet, stack_pairs
    from .training import eval_matchnet
    from .viz import disparity_figure, metrics_table_figure

    cfg = _load_config(args.config, None)
    net = PasmNet(PasmConfig(channels=cfg.net_channels, blocks_per_stage=cfg.blocks,
                             stages=cfg.stages,
                             d_max=(cfg.d_max if cfg.d_max >= 0 else None),
                             in_channels=cfg.channels, tau=cfg.tau), seed=cfg.seed)
    load_checkpoint(args.checkpoint, net.params, MATCH_MAGIC)
    samples = _load_dataset(args.data)
    res = eval_matchnet(net, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [res.noc.row(), res.all.row(), f"occlusion IoU = {res.occlusion_iou:.4f}"]
    print("\n".join(lines))
    csv = ["region,epe,err_gt_1px,err_gt_3px", res.noc.csv_row(), res.all.csv_row()]
    (out / "metrics.csv").write_text("\n".join(csv) + "\n")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    per = ["index,region,epe,err_gt_1px,err_gt_3px"]
    for i, (noc, al) in enumerate(res.per_sample):
        per.append(f"{i}," + noc.csv_row())
        per.append(f"{i}," + al.csv_row())
    (out / "per_sample.csv").write_text("\n".join(per) + "\n")
    metrics_table_figure(lines, out / "metrics.png")
    fwd = net.forward(*stack_pairs(samples[:1]))
    disparity_figure(fwd.refined.data.data[0, 0], out / "disparity_sample0.png")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_grad_suite

    report = run_grad_suite()
    worst = 0.0
    for name, err in report:
        print(f"{name:<40} max rel err {err:.3e}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e} (tolerance {args.tol:g})")
    if worst >= args.tol:
        print("gradient check FAILED")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .attention import complexity_table

    print(complexity_table(args.H, args.W, args.C, args.D))
    return EXIT_OK


def cmd_viz(args) -> int:
    from .fileio import MATCH_MAGIC, load_checkpoint
    from .matchnet import PasmConfig, PasmNet, stack_pairs
    from .viz import attention_rows_figure, disparity_figure, mask_overlay_figure

    cfg = _load_config(args.config, None)
    net = PasmNet(PasmConfig(channels=cfg.net_channels, blocks_per_stage=cfg.blocks,
                             stages=cfg.stages,
                             d_max=(cfg.d_max if cfg.d_max >= 0 else None),
                             in_channels=cfg.channels, tau=cfg.tau), seed=cfg.seed)
    load_checkpoint(args.checkpoint, net.params, MATCH_MAGIC)
    samples = _load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise SystemExit((EXIT_USAGE, f"error: sample index {args.index} out of range"))
    s = samples[args.index]
    fwd = net.forward(*stack_pairs([s]))
    st = fwd.stages[-1]
    H = st.attn_r2l.shape[1]
    rows = args.rows if args.rows is not None else [H // 4, H // 2, 3 * H // 4]
    for r in rows:
        if not 0 <= r < H:
            raise SystemExit((EXIT_USAGE, f"error: row {r} out of range 0..{H - 1}"))
    out = Path(args.out)
    paths = [
        attention_rows_figure(st.attn_r2l.data.data[0], rows, out / "attention_rows.png"),
        disparity_figure(fwd.refined.data.data[0, 0], out / "disparity.png"),
        mask_overlay_figure(s.left.data[0], st.v_left.data.data[0, 0],
                            out / "valid_mask.png"),
    ]
    for p in paths:
        print(p)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_threads(args.threads)
        _apply_precision()
        handler = {
            "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "flops": cmd_flops, "viz": cmd_viz,
        }[args.command]
        return handler(args)
    except SystemExit as e:
        if isinstance(e.code, tuple):
            code, msg = e.code
            print(msg, file=sys.stderr)
            return code
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except Exception as e:  # map library errors onto the exit-code contract
        from .fileio import ConfigError, FileFormatError
        from .tensor import NumericsError

        if isinstance(e, (ConfigError,)):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(e, (FileFormatError, FileNotFoundError, OSError)):
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(e, (NumericsError, ArithmeticError)):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
