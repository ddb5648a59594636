"""``dpkit`` command line: calibrate, train, grid, perturb, classical, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from dpkit import data
from dpkit.accountant import PrivacySpec, SubsampleSchedule, calibrate_noise
from dpkit.errors import DpkitError
from dpkit.harness import charts, experiments, pipelines
from dpkit.mechanisms import LaplaceParams

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _read_dataset(path, split="train") -> data.Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(data.CONTAINER_MAGIC))
    if head == data.CONTAINER_MAGIC.encode():
        return data.load_dataset(path)
    return data.load_cifar_file(path, split)


def _emit(text: str, out):
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------- commands

def cmd_calibrate(args) -> int:
    schedule = SubsampleSchedule.from_training(args.batch, args.epochs, args.n)
    nm = calibrate_noise(PrivacySpec(args.epsilon, args.delta), schedule, accountant=args.accountant)
    print(f"sigma = {nm.sigma:.3f}")
    print(f"achieved epsilon = {nm.achieved_epsilon:.4f} (delta = {args.delta:g}, "
          f"q = {schedule.sample_rate:.6g}, steps = {schedule.steps}, accountant = {args.accountant})")
    return EXIT_OK


def _apply_overrides(spec: experiments.ExperimentSpec, args) -> experiments.ExperimentSpec:
    config = spec.config
    if getattr(args, "epochs", None):
        config = replace(config, epochs=args.epochs)
    if getattr(args, "runs", None):
        config = replace(config, runs=args.runs)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    changes = {}
    if getattr(args, "model", None):
        config = replace(config, widths=experiments.parse_model(args.model))
        changes["model"] = args.model
    if getattr(args, "dataset", None):
        changes["dataset"] = args.dataset
    if getattr(args, "subset_size", None):
        changes["subset_size"] = args.subset_size
    return replace(spec, config=config, **changes)


def _finish_grid(result: experiments.GridResult) -> int:
    for exp, m in result.summary.items():
        print(f"{exp}: runs={m['runs']} test_acc={m['test_acc']:.4f} "
              f"epsilon_spent={m['epsilon_spent']:.4f} sigma={m['sigma']:.4f}", file=sys.stderr)
    for exp, msg in result.failures.items():
        print(f"{exp}: FAILED {msg}", file=sys.stderr)
    return EXIT_RUNTIME if result.failures else EXIT_OK


def cmd_train(args) -> int:
    spec = _apply_overrides(experiments.load_config(args.config), args)
    result = experiments.run_grid([spec], args.out, data_dir=args.data_dir)
    if args.out is None:
        sys.stdout.write(experiments.format_records(result.records))
    return _finish_grid(result)


def cmd_grid(args) -> int:
    if args.preset:
        specs = experiments.PRESETS[args.preset]()
    else:
        specs = [experiments.load_config(p) for p in args.config]
    specs = [_apply_overrides(s, args) for s in specs]
    if args.only:
        wanted = set(args.only)
        specs = [s for s in specs if s.id in wanted]
    result = experiments.run_grid(specs, args.out, data_dir=args.data_dir)
    print(f"wrote {result.csv_path}, {result.summary_path}, {result.metadata_path}",
          file=sys.stderr)
    return _finish_grid(result)


def cmd_perturb(args) -> int:
    ds = _read_dataset(args.input, args.split)
    noisy = pipelines.perturb_dataset(ds, LaplaceParams(args.epsilon, args.sensitivity), args.seed)
    data.save_dataset(noisy, args.out)
    print(f"wrote {len(noisy)} perturbed images to {args.out} "
          f"(Laplace scale {args.sensitivity / args.epsilon:g})", file=sys.stderr)
    return EXIT_OK


def cmd_classical(args) -> int:
    train = _read_dataset(args.train, "train")
    test = _read_dataset(args.test, "test")
    model = pipelines.build_classifier(args.model, k=args.k, kernel=args.kernel, C_reg=args.C,
                                       gamma=args.gamma, degree=args.degree, coef0=args.coef0)
    exp_id = args.id or (args.model if args.model != "svm" else f"svm-{args.kernel}")
    rec = pipelines.run_classical(model, train, test, exp_id)
    _emit(experiments.format_records([rec]), args.out)
    print(f"{exp_id}: test accuracy {rec.test_acc:.4f}, loss {rec.test_loss:.4f}",
          file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    meta = args.metadata
    if meta is None:
        sidecar, _ = experiments.sidecar_paths(args.csv)
        meta = sidecar if sidecar.is_file() else None
    svg = charts.report(args.csv, None, args.metric, meta)
    _emit(svg, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpkit", description="Differentially private training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="noise multiplier for an (epsilon, delta) budget")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--delta", type=float, default=1e-5)
    c.add_argument("--batch", type=_positive_int, required=True)
    c.add_argument("--epochs", type=_positive_int, required=True)
    c.add_argument("--n", type=_positive_int, default=50_000, help="training set size")
    c.add_argument("--accountant", choices=("prv", "rdp"), default="prv")
    c.set_defaults(func=cmd_calibrate)

    def grid_overrides(q):
        q.add_argument("--out", help="CSV output path")
        q.add_argument("--data-dir", help="CIFAR-10 directory (default $DPKIT_DATA_DIR)")
        q.add_argument("--dataset", choices=experiments.DATASETS)
        q.add_argument("--subset-size", type=_positive_int)
        q.add_argument("--model", help="convnet or convnet:w1,w2,w3,w4")
        q.add_argument("--epochs", type=_positive_int)
        q.add_argument("--runs", type=_positive_int)
        q.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train from one key = value config file")
    t.add_argument("--config", required=True)
    grid_overrides(t)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="run a preset or a list of config files")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(experiments.PRESETS))
    src.add_argument("--config", nargs="+")
    g.add_argument("--only", nargs="+", help="run only these experiment ids")
    grid_overrides(g)
    g.set_defaults(func=cmd_grid)

    pt = sub.add_parser("perturb", help="add per-pixel Laplace noise to a dataset")
    pt.add_argument("--input", required=True, help="dataset container or CIFAR-10 batch file")
    pt.add_argument("--out", required=True)
    pt.add_argument("--epsilon", type=float, default=5.0)
    pt.add_argument("--sensitivity", type=float, default=1.0)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--split", choices=data.SPLITS, default="train")
    pt.set_defaults(func=cmd_perturb)

    k = sub.add_parser("classical", help="KNN / naive Bayes / SVM on (perturbed) data")
    k.add_argument("--train", required=True)
    k.add_argument("--test", required=True)
    k.add_argument("--model", choices=pipelines.CLASSIFIERS, required=True)
    k.add_argument("--k", type=_positive_int, default=10)
    k.add_argument("--kernel", choices=("linear", "poly", "rbf", "sigmoid"), default="rbf")
    k.add_argument("--C", type=float, default=1.0)
    k.add_argument("--gamma", type=float)
    k.add_argument("--degree", type=_positive_int, default=3)
    k.add_argument("--coef0", type=float, default=0.0)
    k.add_argument("--id")
    k.add_argument("--out")
    k.set_defaults(func=cmd_classical)

    r = sub.add_parser("report", help="SVG charts from a metrics CSV")
    r.add_argument("csv")
    r.add_argument("--out")
    r.add_argument("--metric", default="test_acc",
                   choices=("train_loss", "train_acc", "test_loss", "test_acc", "epsilon_spent"))
    r.add_argument("--metadata", help="grid .meta.json (default: sidecar next to the CSV)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command == "grid" and args.out is None:
        print("dpkit grid: error: --out is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DpkitError, ValueError, OSError, ArithmeticError) as exc:
        print(f"dpkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
