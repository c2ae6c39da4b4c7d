"""Experiment configuration, execution and reporting."""

from groundloop.runner.config import ConfigError, ExperimentConfig, apply_overrides, load_config
from groundloop.runner.experiment import ExperimentResult, run_experiment
from groundloop.runner.report import ReportError, read_run_log, render_report

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "ReportError",
    "apply_overrides",
    "load_config",
    "read_run_log",
    "render_report",
    "run_experiment",
]
