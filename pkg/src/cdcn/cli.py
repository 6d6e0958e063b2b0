"""Command-line front end.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure
(non-finite loss), 4 artifact mismatch (checkpoint vs requested config).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import degradation as dg
from .model import CheckpointError, ModelConfig, load_checkpoint, param_count

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4

log = logging.getLogger("cdcn")


def _kernel_from_flags(args, parser):
    """Kernel from --kernel FILE or --width/--size; returns (kernel, description)."""
    if getattr(args, "kernel", None):
        try:
            return dg.read_kernel(args.kernel)
        except (OSError, ValueError, IndexError) as e:
            parser.error(f"cannot read kernel {args.kernel}: {e}")
    if args.width is None:
        parser.error("either --kernel or --width is required")
    try:
        spec = dg.IsoKernelSpec(args.width, args.size)
    except ValueError as e:
        parser.error(str(e))
    return dg.make_kernel(spec), spec.describe()


def cmd_kernel(args, parser):
    try:
        if args.type == "iso":
            if args.width is None:
                parser.error("--type iso requires --width")
            spec = dg.IsoKernelSpec(args.width, args.size or 21)
        else:
            missing = [f for f in ("l1", "l2", "theta") if getattr(args, f) is None]
            if missing:
                parser.error("--type aniso requires " + ", ".join("--" + m for m in missing))
            spec = dg.AnisoKernelSpec(args.l1, args.l2, args.theta, args.noise, args.seed, args.size or 11)
    except ValueError as e:
        parser.error(str(e))
    k = dg.make_kernel(spec)
    dg.write_kernel(args.out, k, spec.describe())
    c = k.shape[0] // 2
    print(f"sum={k.sum():.12f} center={k[c, c]:.12f}")
    return EXIT_OK


def _load_hr(path, scale, parser):
    if not Path(path).is_file():
        parser.error(f"image {path} not found")
    hr = dg.load_image(path)
    cropped = dg.modcrop(hr, scale)
    if cropped.shape != hr.shape:
        log.warning("cropped %s from %dx%d to %dx%d (multiple of scale %d)", path,
                    hr.shape[0], hr.shape[1], cropped.shape[0], cropped.shape[1], scale)
    return cropped


def cmd_degrade(args, parser):
    k, _ = _kernel_from_flags(args, parser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hr = _load_hr(args.hr, args.scale, parser)
    lr = dg.degrade(hr, k, dg.DegradationConfig(args.scale))
    dest = out / f"{Path(args.hr).stem}_lr.png"
    dg.save_image(dest, lr)
    print(dest)
    return EXIT_OK


def cmd_labels(args, parser):
    k, _ = _kernel_from_flags(args, parser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.hr).stem
    hr = _load_hr(args.hr, args.scale, parser)
    t = dg.decompose_labels(hr, k, dg.DegradationConfig(args.scale))
    dg.save_image(out / f"{stem}_s.png", t.structure)
    dg.save_image(out / f"{stem}_d.png", dg.detail_to_display(t.detail))
    dg.save_image(out / f"{stem}_lr.png", t.lr)
    if args.float_out:
        np.save(out / f"{stem}_s.npy", t.structure)
        np.save(out / f"{stem}_d.npy", t.detail)
        np.save(out / f"{stem}_lr.npy", t.lr)
    print(f"wrote {stem}_s, {stem}_d, {stem}_lr to {out}")
    return EXIT_OK


def cmd_train(args, parser):
    from . import training
    from .plotting import plot_loss_log

    overrides = {"total_iters": args.total_iters, "seed": args.seed, "batch_size": args.batch_size,
                 "patch_size": args.patch_size, "lr_init": args.lr_init,
                 "checkpoint_every": args.checkpoint_every}
    try:
        cfg, mcfg = training.read_config(args.config, overrides)
    except (ValueError, TypeError) as e:
        parser.error(f"{args.config}: {e}")
    if not Path(args.data).is_dir():
        parser.error(f"data directory {args.data} does not exist")
    print(f"# config file: {args.config}")
    print(f"# overrides: {' '.join(f'{k}={v}' for k, v in overrides.items() if v is not None) or 'none'}")
    print(training.format_config(cfg, mcfg), end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(training.format_config(cfg, mcfg))
    try:
        training.train(cfg, mcfg, args.data, out, resume=args.resume)
    except training.NonFiniteLossError as e:
        print(f"error: {e}; last good state in {out / 'ckpt_last_good.cdcn'}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    rows = training.read_loss_log(out / "loss.log")
    plot_loss_log(rows, out / "loss.png")
    if len(rows):
        print(f"final iter={int(rows[-1, 0])} loss={rows[-1, 1]:.6g}")
    return EXIT_OK


def _predictor(args, parser):
    from .evaluation import BicubicBaseline, ModelPredictor

    if args.baseline:
        return BicubicBaseline(args.scale)
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.cfg.scale != args.scale:
        raise CheckpointError(f"checkpoint scale x{model.cfg.scale} != requested x{args.scale}")
    return ModelPredictor(model)


def _floats(text, parser, name):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        parser.error(f"{name}: expected comma-separated numbers, got {text!r}")


def cmd_eval(args, parser):
    from . import evaluation as ev
    from .plotting import plot_detail_curve, plot_report

    if bool(args.checkpoint) == bool(args.baseline):
        parser.error("exactly one of --checkpoint or --baseline is required")
    if args.scale not in dg.SUPPORTED_SCALES:
        parser.error(f"unsupported scale {args.scale}")
    seeds = [int(v) for v in _floats(args.seeds, parser, "--seeds")]
    widths = _floats(args.widths, parser, "--widths") if args.widths else dg.gaussian8_widths(args.scale)
    if args.protocol == "detail" and args.baseline:
        parser.error("the detail protocol needs a checkpoint with a detail head")
    if not Path(args.data).is_dir():
        parser.error(f"dataset directory {args.data} does not exist")
    if args.checkpoint and not Path(args.checkpoint).is_file():
        parser.error(f"checkpoint {args.checkpoint} not found")
    try:
        pred = _predictor(args, parser)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{args.protocol}_x{args.scale}"
    if args.protocol == "detail":
        try:
            curve = ev.component_psnr(pred, args.data, args.scale, widths, args.border)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_MISMATCH
        lines = ["width,detail_psnr"] + [f"{w!r},{p!r}" for w, p in zip(widths, curve)]
        (out / f"report_{tag}.csv").write_text("\n".join(lines) + "\n")
        plot_detail_curve(widths, curve, out / f"report_{tag}.png")
        print(f"mean detail psnr={np.mean(curve):.4f}")
        return EXIT_OK
    if args.protocol == "gaussian8":
        rep = ev.evaluate_gaussian8(pred, args.data, args.scale, args.border, args.workers)
    else:
        rep = ev.evaluate_anisotropic(pred, args.data, args.scale, seeds, args.border, args.workers)
    rep.meta["predictor"] = "bicubic" if args.baseline else str(args.checkpoint)
    rep.write(out / f"report_{tag}.csv")
    plot_report(rep, out / f"report_{tag}.png")
    print(rep.aggregate_line())
    return EXIT_OK


def cmd_decompose(args, parser):
    from .evaluation import ModelPredictor
    from .plotting import plot_components

    if not Path(args.checkpoint).is_file():
        parser.error(f"checkpoint {args.checkpoint} not found")
    if bool(args.lr) == bool(args.hr):
        parser.error("exactly one of --lr or --hr is required")
    if args.hr and args.kernel is None and args.width is None:
        parser.error("--hr requires --kernel or --width")
    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    if not model.decomposed:
        print("error: checkpoint has no structure/detail heads", file=sys.stderr)
        return EXIT_MISMATCH
    scale = model.cfg.scale
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panels = {}
    if args.hr:
        k, _ = _kernel_from_flags(args, parser)
        hr = _load_hr(args.hr, scale, parser)
        t = dg.decompose_labels(hr, k, dg.DegradationConfig(scale))
        lr = dg.quantize(t.lr)
        dg.save_image(out / "structure_gt.png", t.structure)
        dg.save_image(out / "detail_gt.png", dg.detail_to_display(t.detail))
        panels.update({"HR": hr, "structure (label)": t.structure,
                       "detail (label)": dg.detail_to_display(t.detail)})
    else:
        if not Path(args.lr).is_file():
            parser.error(f"image {args.lr} not found")
        lr = dg.load_image(args.lr)
    p = ModelPredictor(model)(lr)
    dg.save_image(out / "sr.png", p.sr)
    dg.save_image(out / "structure_hat.png", p.structure_hat)
    dg.save_image(out / "detail_hat.png", dg.detail_to_display(p.detail_hat))
    panels.update({"SR": p.sr, "structure (predicted)": p.structure_hat,
                   "detail (predicted)": dg.detail_to_display(p.detail_hat)})
    plot_components(panels, out / "components.png")
    print(f"wrote components for {lr.shape[1]}x{lr.shape[0]} -> {p.sr.shape[1]}x{p.sr.shape[0]} to {out}")
    return EXIT_OK


def cmd_params(args, parser):
    try:
        cfg = ModelConfig(scale=args.scale, num_groups=args.groups, blocks_per_group=args.blocks,
                          channels=args.channels, ca_reduction=args.reduction, ablation=args.ablation)
    except ValueError as e:
        parser.error(str(e))
    n = param_count(cfg)
    print(f"{n} ({n / 1e6:.1f}M)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdcn", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kernel", help="write a blur kernel file")
    k.add_argument("--type", choices=("iso", "aniso"), required=True)
    k.add_argument("--width", type=float)
    k.add_argument("--size", type=int)
    k.add_argument("--l1", type=float)
    k.add_argument("--l2", type=float)
    k.add_argument("--theta", type=float)
    k.add_argument("--noise", type=float, default=0.0)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kernel)

    def blur_flags(sp):
        sp.add_argument("--kernel", help="kernel text file")
        sp.add_argument("--width", type=float, help="isotropic Gaussian width")
        sp.add_argument("--size", type=int, default=21)

    d = sub.add_parser("degrade", help="synthesize an LR image")
    d.add_argument("--hr", required=True)
    d.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    blur_flags(d)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_degrade)

    lb = sub.add_parser("labels", help="write structure/detail/LR labels")
    lb.add_argument("--hr", required=True)
    lb.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    blur_flags(lb)
    lb.add_argument("--float-out", action="store_true", help="also write lossless .npy arrays")
    lb.add_argument("--out", required=True)
    lb.set_defaults(func=cmd_labels)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--total-iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patch-size", type=int)
    t.add_argument("--lr-init", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark a checkpoint or the bicubic baseline")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=("bicubic",))
    e.add_argument("--data", required=True)
    e.add_argument("--scale", type=int, required=True)
    e.add_argument("--protocol", choices=("gaussian8", "anisotropic", "detail"), default="gaussian8")
    e.add_argument("--seeds", default="0", help="kernel seeds for the anisotropic protocol")
    e.add_argument("--widths", help="kernel widths for the detail protocol")
    e.add_argument("--border", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    dc = sub.add_parser("decompose", help="dump predicted structure/detail/SR images")
    dc.add_argument("--checkpoint", required=True)
    dc.add_argument("--lr")
    dc.add_argument("--hr")
    blur_flags(dc)
    dc.add_argument("--out", required=True)
    dc.set_defaults(func=cmd_decompose)

    pc = sub.add_parser("params", help="count model parameters")
    pc.add_argument("--groups", type=int, default=5)
    pc.add_argument("--blocks", type=int, default=10)
    pc.add_argument("--channels", type=int, default=64)
    pc.add_argument("--scale", type=int, default=4)
    pc.add_argument("--reduction", type=int, default=16)
    pc.add_argument("--ablation", default="full")
    pc.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    return args.func(args, sub)


if __name__ == "__main__":
    sys.exit(main())
