"""Workload generation, experiment driver and CLI."""

from .config import (CacheSettings, ConfigError, ExperimentConfig, ModelShape, Strategy,
                     StrategyConfig, WorkloadConfig, load_config, parse_config_text)
from .experiment import Report, run_experiment
from .footprint import LLAMA32_1B, LLAMA32_3B, estimate_kvcache_bytes
from .workload import generate_workload

__all__ = [
    "CacheSettings", "ConfigError", "ExperimentConfig", "ModelShape", "Strategy",
    "StrategyConfig", "WorkloadConfig", "load_config", "parse_config_text",
    "Report", "run_experiment", "LLAMA32_1B", "LLAMA32_3B", "estimate_kvcache_bytes",
    "generate_workload",
]
