"""Experiment configuration, seeded streams, runner and command-line interface."""
from .config import ExperimentConfig, load_config, parse_config
from .runner import grid_search, run_experiment
from .rng import stream

__all__ = ["ExperimentConfig", "load_config", "parse_config", "grid_search", "run_experiment", "stream"]
