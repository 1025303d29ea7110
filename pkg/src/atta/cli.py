"""Command-line driver: ``atta build-data | train | eval | ablate``.

Every flag can also come from ``--config file.json`` whose keys are the flag
names with dashes replaced by underscores; flags given on the command line
win. Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .adaptation import AdaptConfig
from .nn import load_checkpoint
from .tensorfile import FormatError
from .trainer import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("atta")


class UsageError(Exception):
    """Bad flag values or missing inputs; maps to exit code 2."""


def _csv_list(text, cast=str):
    return [cast(t) for t in str(text).split(",") if t.strip()]


def _fraction_range(text):
    try:
        lo, hi = (float(t) for t in str(text).split(","))
    except ValueError:
        raise UsageError(f"--ood-range expects 'lo,hi', got {text!r}") from None
    if not 0.0 <= lo <= hi <= 0.5:
        raise UsageError(f"--ood-range must satisfy 0 <= lo <= hi <= 0.5, got {lo},{hi}")
    return lo, hi


def build_parser():
    p = argparse.ArgumentParser(prog="atta", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with flag values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-data", help="generate the synthetic train/test splits")
    b.add_argument("--out", required=False)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--n-train", type=int, default=200)
    b.add_argument("--n-test", type=int, default=50)
    b.add_argument("--ood-range", default="0.02,0.10", help="novel-pixel area fraction 'lo,hi'")

    t = sub.add_parser("train", help="train and calibrate a model")
    t.add_argument("--data")
    t.add_argument("--out", default="model.json")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--calib-sigmas", type=float, default=3.0,
                   help="shift detector threshold in std units above the mean training KL-sum")

    for name, helptext in (("eval", "evaluate methods"), ("ablate", "run the ablation registry")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--data")
        e.add_argument("--model")
        e.add_argument("--out")
        e.add_argument("--seeds", default="0")
        e.add_argument("--splits", default="clean,corrupt")
        e.add_argument("--score-kinds", default="energy")
        e.add_argument("--iterations", type=int, default=1)
        e.add_argument("--lr", type=float, default=1e-4)
        if name == "eval":
            e.add_argument("--methods", default=",".join(experiment.METHODS))
        else:
            e.add_argument("--variants", default=",".join(experiment.ABLATIONS))
    p.subcommands = sub.choices
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config: cannot read {args.config}: {exc}") from None
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"--config: unknown keys {unknown} for {args.command}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _existing(path, flag):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: {p} does not exist")
    return p


def cmd_build_data(args):
    _require(args, "out")
    lo_hi = _fraction_range(args.ood_range)
    if args.n_train < 1 or args.n_test < 1:
        raise UsageError("--n-train and --n-test must be positive")
    manifest = experiment.build_data(args.out, args.seed, args.n_train, args.n_test, lo_hi)
    print(f"wrote {len(manifest['entries'])} scenes to {args.out}")
    return manifest


def cmd_train(args):
    _require(args, "data")
    data = _existing(args.data, "--data")
    _existing(data / "manifest.json", "--data")
    try:
        config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                             learning_rate=args.lr, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def progress(row):
        log.info("epoch %d  loss %.4f  acc %.4f", row["epoch"], row["loss"], row["accuracy"])

    ckpt, summary = experiment.train_model(data, args.out, config, args.calib_sigmas, progress)
    print(f"train pixel accuracy {ckpt.meta['train_accuracy']:.4f}")
    print(f"domain detector a={ckpt.calib_a:.6g} b={ckpt.calib_b:.6g} "
          f"(KL-sum mean {summary.mean_kl_sum:.6g}, std {summary.std_kl_sum:.6g}, n={summary.count})")
    return ckpt


def _grid_inputs(args):
    _require(args, "data", "model", "out")
    data = _existing(args.data, "--data")
    _existing(data / "manifest.json", "--data")
    try:
        ckpt = load_checkpoint(args.model)
    except (OSError, FormatError) as exc:
        raise UsageError(f"--model: {exc}") from None
    splits = _csv_list(args.splits)
    bad = [s for s in splits if s not in experiment.SPLIT_DIRS]
    if bad:
        raise UsageError(f"--splits: unknown split(s) {bad}; known: {list(experiment.SPLIT_DIRS)}")
    kinds = _csv_list(args.score_kinds)
    bad = [k for k in kinds if k not in ("energy", "max_logit")]
    if bad:
        raise UsageError(f"--score-kinds: unknown score kind(s) {bad}")
    try:
        seeds = _csv_list(args.seeds, int)
        AdaptConfig(iterations=args.iterations, learning_rate=args.lr)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = {"iterations": args.iterations, "learning_rate": args.lr}
    return ckpt, data, splits, kinds, seeds, base


def _print_rows(rows):
    print("method,split,seed,auroc,ap,fpr95,miou,macc,mean_ms_per_image")
    for r in rows:
        print(f"{r['method']},{r['split']},{r['seed']},{r['auroc']:.4f},{r['ap']:.4f},"
              f"{r['fpr95']:.4f},{r['miou']:.4f},{r['macc']:.4f},{r['mean_ms_per_image']:.1f}")


def cmd_eval(args):
    ckpt, data, splits, kinds, seeds, base = _grid_inputs(args)
    methods = _csv_list(args.methods)
    bad = [m for m in methods if m not in experiment.METHODS]
    if bad:
        raise UsageError(f"--methods: unknown method(s) {bad}; known: {list(experiment.METHODS)}")
    rows = experiment.run_grid(ckpt, data, args.out, methods, splits, seeds, kinds, base=base)
    _print_rows(rows)
    return rows


def cmd_ablate(args):
    ckpt, data, splits, kinds, seeds, base = _grid_inputs(args)
    variants = _csv_list(args.variants)
    bad = [v for v in variants if v not in experiment.ABLATIONS]
    if bad:
        raise UsageError(f"--variants: unknown variant(s) {bad}; known: {list(experiment.ABLATIONS)}")
    rows = experiment.run_grid(ckpt, data, args.out, variants, splits, seeds, kinds,
                               registry=experiment.ABLATIONS, base=base)
    text = "\n".join(experiment.ablation_table(rows, s) for s in splits)
    experiment.write_atomic(Path(args.out) / "ablation_summary.md", text)
    print(text)
    return rows


COMMANDS = {"build-data": cmd_build_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"atta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"atta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"atta: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
