"""Python access to the hfflab core library."""

from ._core import (
    ConfigError,
    comparison_rows,
    encoder_param_count,
    hff_params,
    linear_fusion_params,
    paper_count_rows,
    resolved_config,
    step_cost,
)

__all__ = [
    "ConfigError",
    "comparison_rows",
    "encoder_param_count",
    "hff_params",
    "linear_fusion_params",
    "paper_count_rows",
    "resolved_config",
    "step_cost",
]
