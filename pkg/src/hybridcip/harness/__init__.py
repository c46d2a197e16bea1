"""Experiment orchestration and the command line interface."""

from .config import ConfigError, RunConfig, load_config, parse_config

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]
