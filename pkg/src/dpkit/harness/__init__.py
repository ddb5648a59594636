"""Experiment harness: config files, presets, grid runs, SVG reports and the CLI."""

from dpkit.harness.experiments import (CONFIG_KEYS, TABLE1_ROWS, ExperimentSpec, GridResult,
                                       format_config, load_config, load_data, parse_config,
                                       run_grid, summarize, table1, train_runner)
from dpkit.harness.charts import parse_metrics, read_metrics, render_svg, report

__all__ = ["CONFIG_KEYS", "TABLE1_ROWS", "ExperimentSpec", "GridResult", "format_config",
           "load_config", "load_data", "parse_config", "run_grid", "summarize", "table1",
           "train_runner", "parse_metrics", "read_metrics", "render_svg", "report"]
