"""Experiment specs, flat config files, the table1 preset, and the grid runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dpkit import convnet, data, dp_optim
from dpkit.dp_optim import DpTrainConfig
from dpkit.errors import ConfigError, ParseError
from dpkit.metrics import CSV_COLUMNS, MetricsRecord

log = logging.getLogger(__name__)

CONFIG_KEYS = ("optimizer", "batch_size", "epsilon", "delta", "clip_norm", "learning_rate",
               "epochs", "noise_multiplier", "model", "seed", "runs", "dataset", "subset_size")
DATASETS = ("cifar10", "synthetic")
REFERENCE_DATASET_SIZE = 50_000
SYNTHETIC_SEPARATION = 4.0
FINAL_METRICS = ("train_loss", "train_acc", "test_loss", "test_acc", "epsilon_spent", "sigma")


@dataclass(frozen=True)
class ExperimentSpec:
    """One grid entry.

    ``reference_sigma`` is the noise multiplier listed for the full 50000-image
    training set.  ``config.noise_multiplier`` is what training actually uses;
    when it is None the multiplier is calibrated for the dataset at hand.
    """

    id: str
    config: DpTrainConfig
    model: str = "convnet"
    dataset: str = "synthetic"
    subset_size: int | None = None
    reference_sigma: float | None = None

    def __post_init__(self):
        if not self.id or any(c in self.id for c in ",\n\r\""):
            raise ConfigError(f"invalid experiment id {self.id!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigError("subset_size must be positive")
        parse_model(self.model)

    @property
    def runs(self) -> int:
        return self.config.runs

    def describe(self) -> dict:
        out = asdict(self.config)
        out["widths"] = list(out["widths"])
        out.update(id=self.id, model=self.model, dataset=self.dataset,
                   subset_size=self.subset_size, reference_sigma=self.reference_sigma)
        return out


def parse_model(selector: str) -> tuple[int, ...]:
    """``convnet`` or ``convnet:w1,w2,w3,w4`` -> conv widths."""
    name, _, rest = str(selector).partition(":")
    if name.strip() != "convnet":
        raise ConfigError(f"unknown model {selector!r}; only 'convnet' is available")
    if not rest:
        return convnet.DEFAULT_WIDTHS
    try:
        widths = tuple(int(w) for w in rest.split(","))
    except ValueError:
        raise ConfigError(f"bad widths in model selector {selector!r}") from None
    return convnet._check_widths(widths)


# ---------------------------------------------------------------- config files

def _number(key, text, cast, line):
    try:
        value = cast(text)
    except ValueError:
        raise ParseError(f"{key}: cannot read {text!r} as {cast.__name__}", line) from None
    if cast is float and math.isnan(value):
        raise ParseError(f"{key}: NaN is not allowed", line)
    return value


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(text)
    return int(value)


_CASTS = {"batch_size": _int, "epochs": _int, "seed": _int, "runs": _int, "subset_size": _int,
          "epsilon": float, "delta": float, "clip_norm": float, "learning_rate": float,
          "noise_multiplier": float}


def parse_config(text: str, experiment_id: str = "exp") -> ExperimentSpec:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key or not value:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in CONFIG_KEYS:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        if key in _CASTS:
            if key == "noise_multiplier" and value.lower() in ("none", "auto"):
                values[key] = None
                continue
            values[key] = _number(key, value, _CASTS[key], lineno)
        else:
            values[key] = value
    model = values.pop("model", "convnet")
    dataset = values.pop("dataset", "synthetic")
    subset = values.pop("subset_size", None)
    config = DpTrainConfig(widths=parse_model(model), **values)
    return ExperimentSpec(experiment_id, config, model, dataset, subset)


def load_config(path) -> ExperimentSpec:
    path = Path(path)
    return parse_config(path.read_text(), path.stem)


def format_config(spec: ExperimentSpec) -> str:
    c = spec.config
    lines = [f"optimizer = {c.optimizer}", f"batch_size = {c.batch_size}",
             f"epsilon = {c.epsilon!r}", f"delta = {c.delta!r}", f"clip_norm = {c.clip_norm!r}",
             f"learning_rate = {c.learning_rate!r}", f"epochs = {c.epochs}",
             f"noise_multiplier = {c.noise_multiplier!r}", f"model = {spec.model}",
             f"seed = {c.seed}", f"runs = {c.runs}", f"dataset = {spec.dataset}"]
    if spec.subset_size is not None:
        lines.append(f"subset_size = {spec.subset_size}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reference grid

# optimizer, batch, epsilon, clip, lr, epochs, sigma, runs
TABLE1_ROWS = (
    ("sgd", 128, 20, 1.0, 1e-3, 50, 0.47, 1),
    ("adam", 128, 20, 1.0, 1e-3, 50, 0.47, 1),
    ("adam", 128, 5, 1.0, 1e-3, 50, 0.67, 1),
    ("rmsprop", 128, 5, 1.0, 1e-3, 50, 0.67, 1),
    ("adam", 128, 5, 0.75, 1e-3, 50, 0.67, 1),
    ("adam", 128, 5, 0.5, 1e-3, 50, 0.67, 1),
    ("adam", 128, 2.5, 0.75, 1e-3, 50, 0.88, 1),
    ("adam", 256, 2.5, 0.75, 1e-3, 50, 1.07, 1),
    ("adam", 128, 5, 1.0, 1e-3, 100, 0.76, 3),
    ("adam", 256, 5, 1.0, 1e-3, 100, 0.91, 3),
    ("adam", 256, 5, 1.0, 1e-2, 100, 0.91, 3),
    ("adam", 128, 5, 1.0, 5e-4, 100, 0.76, 3),
    ("adam", 256, 5, 1.0, 5e-4, 100, 0.91, 3),
    ("adagrad", 256, 5, 1.0, 1e-4, 100, 0.91, 3),
    ("adam", 256, 5, 1.5, 5e-4, 100, 0.91, 3),
    ("adam", 256, 3, 2.5, 5e-4, 100, 1.21, 3),
    ("adam", 256, 5, 5.0, 5e-4, 100, 0.91, 3),
    ("adam", 256, 3, 5.0, 5e-4, 100, 1.21, 3),
    ("adam", 256, 1, 5.0, 5e-4, 100, 2.81, 3),
    ("adam", 128, 5, 1.0, 1e-3, 200, 0.91, 1),
)
DELTA = 1e-5


def table1(dataset: str = "cifar10", subset_size: int | None = 5000, model: str = "convnet",
           seed: int = 0) -> list[ExperimentSpec]:
    """The 20 reference ablation rows with their listed noise multipliers and run counts.

    Training recalibrates sigma for the actual dataset size; the listed value
    is kept in ``reference_sigma`` (it belongs to the 50000-image train set).
    """
    widths = parse_model(model)
    specs = []
    for i, (opt, batch, eps, clip, lr, epochs, sigma, runs) in enumerate(TABLE1_ROWS, start=1):
        config = DpTrainConfig(optimizer=opt, batch_size=batch, epsilon=float(eps), delta=DELTA,
                               clip_norm=clip, learning_rate=lr, epochs=epochs, seed=seed,
                               runs=runs, widths=widths)
        specs.append(ExperimentSpec(f"exp{i:02d}", config, model, dataset, subset_size, sigma))
    return specs


PRESETS = {"table1": table1}


# ---------------------------------------------------------------- datasets

def load_data(spec: ExperimentSpec, data_dir=None):
    """(train, test) for a spec's dataset selector."""
    if spec.dataset == "cifar10":
        return data.load_cifar10(data_dir, train_subset=spec.subset_size)
    n = spec.subset_size or 1000
    per_class = max(1, n // data.NUM_CLASSES)
    return data.make_synthetic_pair(data.NUM_CLASSES, per_class, SYNTHETIC_SEPARATION,
                                    seed=spec.config.seed, test_per_class=max(1, per_class // 2))


# ---------------------------------------------------------------- grid

Runner = Callable[[ExperimentSpec, int, object], Sequence[MetricsRecord]]


def train_runner(spec: ExperimentSpec, run: int, dataset) -> list[MetricsRecord]:
    """Default runner: DP-SGD training of the ConvNet with seed ``seed + run``."""
    config = replace(spec.config, seed=spec.config.seed + run)
    return dp_optim.train(config, None, dataset, spec.id, run)


@dataclass
class GridResult:
    records: list[MetricsRecord]
    summary: dict[str, dict[str, float]]
    failures: dict[str, str] = field(default_factory=dict)
    csv_path: Path | None = None
    metadata_path: Path | None = None
    summary_path: Path | None = None


def _check_ids(specs):
    seen = set()
    for s in specs:
        if s.id in seen:
            raise ConfigError(f"duplicate experiment id {s.id!r}")
        seen.add(s.id)


def summarize(records: Sequence[MetricsRecord]) -> dict[str, dict[str, float]]:
    """Mean over runs of each final-epoch metric, per experiment (ids in first-seen order)."""
    finals: dict[str, dict[int, MetricsRecord]] = {}
    for r in records:
        runs = finals.setdefault(r.experiment_id, {})
        if r.run not in runs or r.epoch >= runs[r.run].epoch:
            runs[r.run] = r
    out = {}
    for exp, runs in finals.items():
        rows = [runs[k] for k in sorted(runs)]
        out[exp] = {m: float(np.mean([getattr(r, m) for r in rows])) for m in FINAL_METRICS}
        out[exp]["runs"] = len(rows)
    return out


def format_records(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def format_summary(summary: dict[str, dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("experiment_id", "runs") + FINAL_METRICS)
    for exp, m in summary.items():
        w.writerow([exp, m["runs"]] + [repr(m[k]) for k in FINAL_METRICS])
    return buf.getvalue()


def sidecar_paths(csv_path) -> tuple[Path, Path]:
    csv_path = Path(csv_path)
    return (csv_path.with_name(csv_path.stem + ".meta.json"),
            csv_path.with_name(csv_path.stem + ".summary.csv"))


def run_grid(specs: Sequence[ExperimentSpec], csv_path=None, runner: Runner | None = None,
             data_dir=None, loader=None) -> GridResult:
    """Run every spec ``runs`` times, sequentially, streaming records to ``csv_path``.

    A failing experiment is logged in ``failures`` and the grid moves on.
    Timestamps and configs go to a ``.meta.json`` sidecar so that the CSV
    itself depends only on the seeds; means of final-epoch metrics go to a
    ``.summary.csv`` sidecar.
    """
    _check_ids(specs)
    runner = runner or train_runner
    loader = loader or (lambda spec: load_data(spec, data_dir))
    meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S"), "experiments": {}, "failures": {}}
    records: list[MetricsRecord] = []
    failures: dict[str, str] = {}
    cache: dict = {}

    handle = None
    writer = None
    if csv_path is not None:
        csv_path = Path(csv_path)
        handle = open(csv_path, "w", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
    try:
        for spec in specs:
            entry = spec.describe()
            entry["started"] = time.strftime("%Y-%m-%dT%H:%M:%S")
            meta["experiments"][spec.id] = entry
            produced: list[MetricsRecord] = []
            try:
                key = (spec.dataset, spec.subset_size, spec.config.seed)
                if key not in cache:
                    cache[key] = loader(spec)
                for run in range(spec.runs):
                    rows = list(runner(spec, run, cache[key]))
                    _check_rows(spec, run, rows)
                    produced.extend(rows)
            except Exception as exc:  # one failed experiment must not stop the grid
                failures[spec.id] = f"{type(exc).__name__}: {exc}"
                meta["failures"][spec.id] = traceback.format_exc()
                log.warning("experiment %s failed: %s", spec.id, failures[spec.id])
                continue
            finally:
                entry["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
            # rows of an experiment are written only once all its runs succeeded
            records.extend(produced)
            if writer is not None:
                for r in produced:
                    writer.writerow(r.row())
                handle.flush()
    finally:
        if handle is not None:
            handle.close()

    summary = summarize(records)
    result = GridResult(records, summary, failures)
    if csv_path is not None:
        meta_path, summary_path = sidecar_paths(csv_path)
        meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
        summary_path.write_text(format_summary(summary))
        result.csv_path, result.metadata_path, result.summary_path = csv_path, meta_path, summary_path
    return result


def _check_rows(spec, run, rows):
    last = -math.inf
    for r in rows:
        if r.experiment_id != spec.id or r.run != run:
            raise ValueError(f"runner returned a record for {r.experiment_id}/{r.run}")
        if r.epsilon_spent < last:
            raise ValueError("epsilon_spent decreased between epochs")
        last = r.epsilon_spent


def _json_default(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")
