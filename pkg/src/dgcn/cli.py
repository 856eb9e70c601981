"""Command-line surface: gradcheck, cost, equiv, train, eval, infer.

Exit codes: 0 success, 1 verification/metric failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import costs, coord_gcn, head as head_mod, toy, verify
from .tensor import RngState, Tensor

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _load_cfg(args):
    cfg = ckpt.RunConfig()
    if getattr(args, "config", None):
        cfg = ckpt.load_config_file(args.config, cfg)
    for key in ("variant", "seed", "iterations", "ohem_k", "d", "mode", "order"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def cmd_gradcheck(args):
    results = verify.gradcheck_head(
        eps=args.eps, threshold=args.threshold, seed=args.seed or 0, corrupt=args.corrupt_backward
    )
    worst = max(results, key=lambda r: r.rel_err)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} rel_err={r.rel_err:.3e}")
    print(f"worst: {worst.name} rel_err={worst.rel_err:.3e} (threshold {args.threshold:g})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _parse_shape(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ckpt.ConfigError(f"bad shape {text!r}, expected like 1x512x128x128")
    if len(dims) != 4 or any(v <= 0 for v in dims):
        raise ckpt.ConfigError(f"bad shape {text!r}, expected like 1x512x128x128")
    return dims


def cmd_cost(args):
    _, d_model, h, w = _parse_shape(args.input_shape)
    orders = list(coord_gcn.ORDERS) if args.order == "both" else [args.order]
    cfg = head_mod.DGCConfig(
        d_in=d_model, d_model=d_model, num_classes=args.classes, d=args.d, mode=args.mode
    )
    reports = []
    for order in orders:
        reports.append(costs.cost_report(cfg, h, w, order=order, scope="module-only"))
        reports.append(costs.cost_report(cfg, h, w, order=order, scope="with-head"))
    print(costs.render_table(reports, csv=args.csv))
    if args.compare_published:
        module = reports[0]
        ref_params, ref_flops = costs.nonlocal_reference(d_model, h, w)
        print(f"\nnon-local reference (same conventions): params {ref_params:,}  flops {ref_flops:,}")
        print(f"module params / published {costs.PUBLISHED_MODULE_PARAMS:,}: {module.total_params / costs.PUBLISHED_MODULE_PARAMS:.3f}")
        print(f"module GFLOPs / published {costs.PUBLISHED_MODULE_GFLOPS}: {module.total_flops / 1e9 / costs.PUBLISHED_MODULE_GFLOPS:.3f}")
        print(f"reference GFLOPs published: {costs.PUBLISHED_NONLOCAL_GFLOPS}")
    return EXIT_OK


def cmd_equiv(args):
    errs = verify.order_equivalence_trials(trials=args.trials, n=args.nodes, width=args.width, seed=args.seed or 0)
    worst = max(errs)
    print(f"{args.trials} trials, n={args.nodes}, D={args.width}: worst rel disagreement {worst:.3e}")
    return EXIT_OK if worst <= args.tolerance else EXIT_FAIL


def _dataset(cfg, args):
    if args.dataset_dir and os.path.exists(os.path.join(args.dataset_dir, "manifest.txt")) and not args.generate:
        return ckpt.load_dataset(args.dataset_dir)
    samples = toy.gen_toy_dataset(cfg.seed, cfg.dataset_count, cfg.height, cfg.width, cfg.num_classes)
    if args.dataset_dir:
        ckpt.save_dataset(samples, args.dataset_dir, cfg.seed)
    return toy.split_dataset(samples)


def cmd_train(args):
    cfg = _load_cfg(args)
    train_set, val_set = _dataset(cfg, args)
    model = toy.init_toy_model(cfg.dgc_config(), RngState(cfg.seed), backbone_width=cfg.backbone_width)
    log = []
    toy.train(model, cfg.train_config(), train_set, val_set, log)
    os.makedirs(args.out, exist_ok=True)
    ckpt.save_checkpoint(model, os.path.join(args.out, "model.ckpt"), cfg)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("iter,lr,loss,val_miou\n")
        for it, lr, loss, miou in log:
            fh.write(f"{it},{lr:.8g},{loss:.8g},{miou:.6f}\n")
    if log:
        print(f"final val mIoU: {log[-1][3]:.6f}")
    print(f"checkpoint: {os.path.join(args.out, 'model.ckpt')}")
    return EXIT_OK


def _scales(text):
    return [float(s) for s in text.split(",")] if text else None


def cmd_eval(args):
    model, cfg = ckpt.load_checkpoint(args.checkpoint)
    if args.dataset_dir and os.path.exists(os.path.join(args.dataset_dir, "manifest.txt")):
        _, val_set = ckpt.load_dataset(args.dataset_dir)
    else:
        _, val_set = toy.split_dataset(
            toy.gen_toy_dataset(cfg.seed, cfg.dataset_count, cfg.height, cfg.width, cfg.num_classes)
        )
    miou, per_class = toy.evaluate(model, val_set, scales=_scales(args.scales))
    for i, iou in enumerate(per_class):
        print(f"class {i}: IoU {'n/a' if np.isnan(iou) else f'{iou:.6f}'}")
    print(f"mean IoU: {miou:.6f}")
    return EXIT_OK


def write_pgm(path, labels, maxval=255):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{labels.shape[1]} {labels.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(labels.tobytes())


def cmd_infer(args):
    model, cfg = ckpt.load_checkpoint(args.checkpoint)
    if args.dataset_dir:
        train_set, val_set = ckpt.load_dataset(args.dataset_dir)
        samples = train_set + val_set
    else:
        samples = toy.gen_toy_dataset(cfg.seed, cfg.dataset_count, cfg.height, cfg.width, cfg.num_classes)
    os.makedirs(args.out, exist_ok=True)
    scales = _scales(args.scales)
    for i, s in enumerate(samples):
        pred = toy.predict(model, s.image, scales)
        write_pgm(os.path.join(args.out, f"pred_{i:05d}.pgm"), pred)
    print(f"wrote {len(samples)} prediction maps to {args.out}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="dgcn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter group (f64)")
    g.add_argument("--eps", type=float, default=1e-6)
    g.add_argument("--threshold", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)  # negative-control hook
    g.set_defaults(fn=cmd_gradcheck)

    c = sub.add_parser("cost", help="analytic parameter/FLOP table")
    c.add_argument("--input-shape", default="1x512x128x128")
    c.add_argument("--d", type=int, default=8)
    c.add_argument("--mode", choices=coord_gcn.MODES, default="strided-conv")
    c.add_argument("--order", choices=list(coord_gcn.ORDERS) + ["both"], default="both")
    c.add_argument("--classes", type=int, default=19)
    c.add_argument("--csv", action="store_true")
    c.add_argument("--compare-published", action="store_true")
    c.set_defaults(fn=cmd_cost)

    e = sub.add_parser("equiv", help="adjacency-first vs factor-first agreement trials")
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--tolerance", type=float, default=1e-8)
    e.add_argument("--nodes", type=int, default=64)
    e.add_argument("--width", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_equiv)

    def add_common(p):
        p.add_argument("--config", help="key=value run config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--dataset-dir")

    t = sub.add_parser("train", help="train a toy segmentation model")
    add_common(t)
    t.add_argument("--variant", choices=toy.VARIANTS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--ohem", dest="ohem_k", type=int)
    t.add_argument("--generate", action="store_true", help="regenerate the dataset cache")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint (mIoU per class)")
    add_common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--scales", help="comma-separated inference scales, e.g. 0.75,1,1.25")
    v.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="write predicted label maps as 8-bit PGM")
    add_common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scales")
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ckpt.ConfigError, ckpt.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, IOError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
