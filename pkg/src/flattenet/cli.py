"""``flattenet`` command-line driver.

Exit codes: 0 success, 1 a check failed (or training diverged), 2 usage or
configuration error.  Set ``FLATTENET_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .head import ConfigError, load_config
from .layers import ShapeError
from .tensor import DTYPES, TensorError, decode_flt1, encode_flt1, tensor_new, write_flt1

log = logging.getLogger("flattenet")


class UsageError(Exception):
    pass


def _hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(args, text_lines, payload):
    if args.format == "json":
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _rows_table(rows):
    width = max((len(r.name) for r in rows), default=0)
    return [f"{r.status.upper():5s}  {r.name:<{width}s}  {r.detail}" for r in rows]


# subcommands -------------------------------------------------------------------

def cmd_describe(args):
    from .complexity import describe
    from .lab.backbone import ToyBackboneSpec

    toy = None
    if args.backbone == "toy" and args.widths:
        toy = ToyBackboneSpec(widths=args.widths)
    rep = describe(args.config, backbone=args.backbone, input_hw=args.input,
                   predictor=not args.no_predictor, toy_spec=toy)
    _emit(args, [rep.format_text()], rep.to_json())
    return 0


def cmd_gradcheck(args):
    from .checks import GRADCHECK_OPS, run_gradcheck

    if args.dtype != "f64":
        raise UsageError("finite-difference checks need --dtype f64")
    if args.list:
        print("\n".join(GRADCHECK_OPS))
        return 0
    if not args.all and not args.op:
        raise UsageError("pass --op NAME (repeatable) or --all")
    names = None if args.all else args.op
    try:
        rows = run_gradcheck(names, seed=args.seed or 0, eps=args.eps, tol=args.tol)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    ops = {}
    for r in rows:
        op = r.name.split("(")[0]
        ops[op] = max(ops.get(op, 0.0), r.value)
    failed = [r for r in rows if r.status != "pass"]
    lines = _rows_table(rows) + ["", "max relative error per op:"]
    lines += [f"  {op:<20s} {err:.3e}" for op, err in ops.items()]
    lines.append(f"{len(rows) - len(failed)}/{len(rows)} passed (tol {args.tol:g})")
    _emit(args, lines, {"tol": args.tol, "eps": args.eps, "max_rel_error": ops,
                        "cases": [r.to_json() for r in rows], "passed": not failed})
    return 1 if failed else 0


def cmd_selftest(args):
    from .checks import exit_code, selftest

    if args.dtype != "f64":
        raise UsageError("equivalence checks run in f64; pass --dtype f64")
    rows = selftest(args.config, seed=args.seed or 0)
    code = exit_code(rows)
    failed = [r.name for r in rows if r.status in ("fail", "error")]
    lines = _rows_table(rows)
    lines.append(f"{sum(r.status == 'pass' for r in rows)} passed, {len(failed)} failed")
    lines += [f"FAILED: {name}" for name in failed]
    _emit(args, lines, {"checks": [r.to_json() for r in rows], "failed": failed, "exit": code})
    for r in rows:
        if r.status == "error":
            print(f"config error: {r.name}: {r.detail}", file=sys.stderr)
    return code


def _build(run: dict):
    """Model and task from a run description (the dict stored next to checkpoints)."""
    from .lab.backbone import DEFAULT_WIDTHS, ToyBackboneSpec
    from .lab.tasks import SyntheticTask
    from .model import FlatteNet

    spec = load_config(run["config"])
    widths = tuple(run["widths"] or DEFAULT_WIDTHS)
    bb = ToyBackboneSpec(widths=widths, c_out=spec.c_in)
    size = run["image_size"]
    task = SyntheticTask(run["task"], image_size=size, num=run["num"] or spec.classes,
                         sigma=run["sigma"], s1=4, seed=run["seed"])
    fh, fw = bb.output_hw(size, size)
    oh, ow = spec.output_hw(fh, fw)
    if (oh, ow) != (task.heatmap_size, task.heatmap_size):
        raise ConfigError(f"{spec.name}: {size}px input gives a {fh}x{fw} backbone map and {oh}x{ow} head "
                          f"output, but the task needs {task.heatmap_size}x{task.heatmap_size}")
    if spec.classes != task.num:
        raise ConfigError(f"config predicts {spec.classes} channels but the task has {task.num}")
    model = FlatteNet.build(spec, bb, seed=run["seed"], dtype=DTYPES[run["dtype"]],
                            predictor_init_std=run["init_std"])
    return model, task


def cmd_train(args):
    from .lab.optim import make_optimizer
    from .lab.train import TrainConfig, TrainingDiverged, train

    if args.seed is None:
        raise UsageError("train requires --seed")
    config = args.config or ("toy_keypoints" if args.task == "keypoints" else "toy_segmentation")
    run = {"config": str(config), "task": args.task, "image_size": args.image_size, "num": args.num,
           "sigma": args.sigma, "widths": list(args.widths) if args.widths else None, "seed": args.seed,
           "dtype": args.dtype, "init_std": args.init_std, "path": args.path, "eval_size": args.eval_size}
    model, task = _build(run)
    cfg = TrainConfig(epochs=args.epochs, steps_per_epoch=args.steps_per_epoch, batch_size=args.batch_size,
                      path=args.path, eval_size=args.eval_size, train_size=args.train_size,
                      hflip=args.hflip)
    optim = make_optimizer(args.optimizer, model.params(), args.lr)
    try:
        history = train(model, task, optim, cfg, history_path=args.history, checkpoint_dir=args.checkpoint)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    if args.checkpoint:
        (Path(args.checkpoint) / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    metric = "pckh@0.5" if task.kind == "keypoints" else "miou"
    lines = [f"{'epoch':>5s} {'step':>6s} {'loss':>12s} {'eval_loss':>12s} {metric:>9s}"]
    lines += [f"{r['epoch']:5d} {r['step']:6d} {r['loss']:12.6g} {r['eval_loss']:12.6g} {r['metric']:9.4g}"
              for r in history]
    _emit(args, lines, {"run": run, "history": history})
    return 0


def cmd_eval(args):
    from .lab.tasks import gen_task
    from .lab.train import evaluate, load_checkpoint, restore

    ckpt = Path(args.checkpoint)
    run_file = ckpt / "run.json"
    if not run_file.is_file():
        raise UsageError(f"{ckpt} has no run.json; was it written by 'flattenet train --checkpoint'?")
    run = json.loads(run_file.read_text())
    model, task = _build(run)
    restore(model, load_checkpoint(ckpt))
    n = args.eval_size or run["eval_size"]
    images, targets, extra = gen_task(task, n, batch=10_000 if args.batch is None else args.batch,
                                      dtype=DTYPES[run["dtype"]])
    res = evaluate(model, task, images, targets, extra)
    metric = "pckh@0.5" if task.kind == "keypoints" else "miou"
    _emit(args, [f"loss {res['loss']:.6g}", f"{metric} {res['metric']:.4g}"], {**res, "metric_name": metric})
    return 0


def cmd_dump(args):
    x = tensor_new(args.shape, args.fill, value=args.value, seed=args.seed if args.seed is not None else 0,
                   dtype=args.dtype)
    write_flt1(args.out, x)
    data = Path(args.out).read_bytes()
    _emit(args, [f"wrote {args.out} {args.dtype} {x.shape} sha256 {hashlib.sha256(data).hexdigest()}"],
          {"path": str(args.out), "dtype": args.dtype, "shape": list(x.shape),
           "sha256": hashlib.sha256(data).hexdigest()})
    return 0


def cmd_load(args):
    data = Path(args.input).read_bytes()
    x = decode_flt1(data)
    dtype = {np.dtype(v): k for k, v in DTYPES.items()}[x.dtype]
    stats = {"min": float(x.min()), "max": float(x.max()), "mean": float(x.mean())} if x.size else {}
    info = {"path": str(args.input), "dtype": dtype, "shape": list(x.shape),
            "sha256": hashlib.sha256(data).hexdigest(), **stats}
    if args.out:
        Path(args.out).write_bytes(encode_flt1(x))
        info["out"] = str(args.out)
    lines = [f"{k}: {v}" for k, v in info.items()]
    _emit(args, lines, info)
    return 0


# parser ------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (required for train)")
    common.add_argument("--dtype", choices=sorted(DTYPES), default="f64")
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="flattenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", parents=[common], help="parameter and multiply-add counts")
    p.add_argument("config", help="shipped config name or JSON path")
    p.add_argument("--backbone", choices=("resnet50", "resnet101", "toy"))
    p.add_argument("--input", type=_hw, help="HxW: image size with a backbone, feature size without")
    p.add_argument("--widths", type=_ints, help="toy backbone stage widths")
    p.add_argument("--no-predictor", action="store_true")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op", action="append", help="op name (repeatable)")
    g.add_argument("--all", action="store_true")
    g.add_argument("--list", action="store_true", help="list op names")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common], help="bijection, density and equivalence checks")
    p.add_argument("--config", nargs="+", help="configs to check instead of the shipped set")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("train", parents=[common], help="train on a synthetic task")
    p.add_argument("--task", choices=("keypoints", "segmentation"), default="keypoints")
    p.add_argument("--config", help="head config (default: toy_keypoints / toy_segmentation)")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--steps-per-epoch", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--train-size", type=int, help="fixed training pool size (default: fresh batches)")
    p.add_argument("--eval-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--num", type=int, help="keypoints or classes (default: the config's classes)")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--widths", type=_ints, help="toy backbone stage widths")
    p.add_argument("--path", choices=("A", "B"), default="A", help="A: rearrange then predict; B: folded targets")
    p.add_argument("--hflip", action="store_true", help="random horizontal flips of training samples")
    p.add_argument("--init-std", type=float, default=1e-3, help="predictor weight init std")
    p.add_argument("--history", help="write per-epoch JSONL history here")
    p.add_argument("--checkpoint", help="write a checkpoint directory here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--batch", type=int, help="data-stream index of the evaluation set")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump", parents=[common], help="write an FLT1 tensor")
    p.add_argument("out")
    p.add_argument("--shape", type=_ints, default=(1, 1, 2, 2), help="N,C,H,W")
    p.add_argument("--fill", choices=("zeros", "ones", "constant", "uniform"), default="uniform")
    p.add_argument("--value", type=float, default=0.0)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("load", parents=[common], help="read an FLT1 tensor")
    p.add_argument("input")
    p.add_argument("--out", help="re-encode to this path")
    p.set_defaults(func=cmd_load)
    return parser


def _thread_limit():
    from threadpoolctl import threadpool_limits

    n = os.environ.get("FLATTENET_THREADS")
    if not n:
        return None
    try:
        return threadpool_limits(int(n))
    except ValueError:
        raise UsageError(f"FLATTENET_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        limit = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limit is not None:
                limit.restore_original_limits()
    except UsageError as exc:
        print(f"flattenet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError, TensorError, OSError, ValueError, KeyError) as exc:
        print(f"flattenet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
