"""Deterministic discrete-event simulator for mmWave vehicle-to-vehicle sidelinks."""

from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .scenario import Simulation, build_scenario

__version__ = "0.1.0"

__all__ = ["ConfigError", "ScenarioConfig", "Simulation", "build_scenario", "load_config", "parse_config"]
