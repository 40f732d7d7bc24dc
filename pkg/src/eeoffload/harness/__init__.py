"""Experiment sweeps, metrics, plots and the trace recount oracle."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .metrics import exit_point_accuracy, mean_ci, on_device_probability, overall_accuracy
from .sweep import run_sweep

__all__ = [
    "ConfigError", "ExperimentConfig", "exit_point_accuracy", "load_config", "mean_ci",
    "on_device_probability", "overall_accuracy", "parse_config", "run_sweep",
]
