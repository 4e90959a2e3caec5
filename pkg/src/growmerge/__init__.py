"""Continual category discovery with growing and merging phases."""
from .runner import RunConfig, load_config, run_experiment

__all__ = ["RunConfig", "load_config", "run_experiment"]
__version__ = "0.1.0"
