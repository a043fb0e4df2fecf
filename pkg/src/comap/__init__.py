"""Desk-scale simulator of instance-level multi-agent collaborative
implicit mapping over a lossy message bus."""

__version__ = "0.1.0"

from .config import ExperimentConfig, bundled_config_path, load_config
from .pipeline import run_experiment, run_sweep

__all__ = [
    "ExperimentConfig", "bundled_config_path", "load_config",
    "run_experiment", "run_sweep", "__version__",
]
