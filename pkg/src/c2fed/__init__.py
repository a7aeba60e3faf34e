"""Federated continual prompt learning with class-aware aggregation and
local class distribution compensation, at desk scale on synthetic data."""

from .config import RunConfig, load as load_config
from .errors import C2FedError, ConfigError
from .orchestrator import RunRecord, Simulation, run

__all__ = ["C2FedError", "ConfigError", "RunConfig", "RunRecord", "Simulation", "load_config", "run"]
__version__ = "0.1.0"
