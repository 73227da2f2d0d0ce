"""CLI orchestration: config files, cached stages, manifests, reports."""

from .config import ConfigError, RunConfig, parse_config, parse_config_text, serialize_config
from .stages import LockHeldError, Report, StageError, Workspace, run_task, stage_seed

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "parse_config_text",
    "serialize_config",
    "LockHeldError",
    "Report",
    "StageError",
    "Workspace",
    "run_task",
    "stage_seed",
]
