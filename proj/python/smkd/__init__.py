"""Few-shot ViT training with patch-level self/supervised distillation."""

from ._smkd import (
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    FormatError,
    NumericError,
    ParameterError,
    block_mask,
    checkpoint_info,
    evaluate,
    match_patches,
    pretrain,
    train,
    visualize,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "Error",
    "FormatError",
    "NumericError",
    "ParameterError",
    "block_mask",
    "checkpoint_info",
    "evaluate",
    "match_patches",
    "pretrain",
    "train",
    "visualize",
]
