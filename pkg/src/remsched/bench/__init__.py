"""Experiment harness: YAML configs, seeded runs, comparison tables, curve export."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiment import (AgentRun, check_artifact, compare_table, export_curves, moving_average,
                         run_experiment)

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "AgentRun",
           "check_artifact", "compare_table", "export_curves", "moving_average", "run_experiment"]
