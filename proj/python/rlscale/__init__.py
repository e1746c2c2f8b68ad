"""Python access to the rlscale C++ core."""

from ._rlscale import (
    AdamState,
    ConfigError,
    Env,
    Network,
    OperationError,
    ShapeError,
    adam_step,
    catch_values,
    categorical_project,
    cli,
    default_config,
    make_env,
    make_support,
    parse_config,
    train,
    updates_per_cycle,
)

__all__ = [
    "AdamState",
    "ConfigError",
    "Env",
    "Network",
    "OperationError",
    "ShapeError",
    "adam_step",
    "catch_values",
    "categorical_project",
    "cli",
    "default_config",
    "make_env",
    "make_support",
    "parse_config",
    "train",
    "updates_per_cycle",
]
