"""``dlkd`` command line: data generation, the three training arms, evaluation.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure (non-finite loss or failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from dlkd import data as D
from dlkd.config import RunConfig, load_config
from dlkd.errors import DLKDError, UsageError

log = logging.getLogger("dlkd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dims(text):
    try:
        dims = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxTxHxW, got {text!r}") from None
    if len(dims) != 4:
        raise argparse.ArgumentTypeError(f"expected CxTxHxW, got {text!r}")
    return dims


def _run_config(path):
    return load_config(path) if path else RunConfig()


def _train_config(args):
    return _run_config(args.config).train


def cmd_gen_data(args):
    bright = D.generate_dataset(args.classes, args.per_class, args.dims, args.seed)
    dark = D.darken_dataset(bright, D.DarkenParams(args.gamma_dark, args.scale, args.noise, args.seed))
    out = Path(args.out)
    if args.train_fraction is None:
        D.save_dataset(dark, out)
        print(f"wrote {len(dark)} clips to {out}")
        return
    train, test = D.split(dark, args.train_fraction, args.split_seed)
    D.save_dataset(train, out / "train")
    D.save_dataset(test, out / "test")
    print(f"wrote {len(train)} training clips to {out / 'train'} and {len(test)} test clips to {out / 'test'}")


def _train(kind, args):
    from dlkd.model import save_model
    from dlkd.train import LogitStore, train_baseline, train_student, train_teacher

    config = _train_config(args)
    dataset = D.load_dataset(args.data)
    if kind == "teacher":
        model, run = train_teacher(dataset, config)
    elif kind == "student":
        model, run = train_student(dataset, LogitStore.load(args.logits), config)
    else:
        model, run = train_baseline(dataset, config)
    save_model(model, args.out)
    run.write_csv(args.metrics)
    last = run.records[-1]
    print(f"{kind}: {len(run.records)} epochs, final loss {last.total:.4f}, train top-1 {last.train_top1:.3f}")
    print(f"checkpoint {args.out} sha256 {model.digest()}")


def cmd_cache_logits(args):
    from dlkd.model import load_model
    from dlkd.train import cache_teacher_logits

    teacher = load_model(args.teacher)
    store = cache_teacher_logits(teacher, _train_config(args).enhance, D.load_dataset(args.data))
    store.save(args.out)
    print(f"cached {len(store)} teacher logit vectors from {store.teacher_hash[:12]} to {args.out}")


def cmd_eval(args):
    from dlkd.metrics import evaluate
    from dlkd.model import load_model

    model = load_model(args.model)
    enhance = _train_config(args).enhance if args.enhance else None
    variant = args.variant or ("teacher" if args.enhance else "student")
    record = evaluate(model, D.load_dataset(args.data), enhance, variant)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "top1", "top5", "n"])
        writer.writerow([record.variant, repr(record.top1), repr(record.top5), record.n])
    print(f"{record.variant}: top-1 {record.top1:.4f}, top-5 {record.top5:.4f} on {record.n} clips")


def cmd_experiment(args):
    from dlkd.experiment import run_experiment

    report = run_experiment(args.config, args.out, workers=args.workers)
    print(report.table(), end="")


def cmd_gradcheck(args):
    from dlkd.errors import GradcheckError
    from dlkd.gradcheck import run_suite

    seeds = range(10) if args.seed is None else [args.seed]
    failed = 0
    for result in run_suite(seeds):
        status = "ok  " if result.ok else "FAIL"
        print(f"{status} {result.name:<24} seed {result.seed:<3} rel err {result.error:.2e}")
        failed += not result.ok
    if failed:
        raise GradcheckError(f"{failed} gradient check(s) above tolerance")


def build_parser():
    parser = _Parser(prog="dlkd", description="Dual-light knowledge distillation on synthetic dark video.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render, darken and write a dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dims", type=_dims, required=True, help="CxTxHxW")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma-dark", type=float, default=D.BENCH_GAMMA_DARK)
    p.add_argument("--scale", type=float, default=D.BENCH_SCALE)
    p.add_argument("--noise", type=float, default=D.BENCH_NOISE)
    p.add_argument("--train-fraction", type=float, help="also split into OUT/train and OUT/test")
    p.add_argument("--split-seed", type=int, default=D.BENCH_SPLIT_SEED)
    p.set_defaults(func=cmd_gen_data)

    for kind in ("teacher", "student", "baseline"):
        p = sub.add_parser(f"train-{kind}", help=f"train the {kind} on every clip in --data")
        p.add_argument("--data", required=True)
        if kind == "student":
            p.add_argument("--logits", required=True)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--metrics", required=True)
        p.set_defaults(func=lambda a, kind=kind: _train(kind, a))

    p = sub.add_parser("cache-logits", help="store teacher logits on enhanced clips")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="enhancement settings (default: built-in)")
    p.set_defaults(func=cmd_cache_logits)

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on --data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--enhance", action="store_true", help="enhance clips first (teacher evaluation)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="enhancement settings (default: built-in)")
    p.add_argument("--variant", choices=["baseline", "teacher", "student"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="three-arm comparison over the configured seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, help="override the config's worker count")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except DLKDError as exc:
        print(f"dlkd: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dlkd: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
