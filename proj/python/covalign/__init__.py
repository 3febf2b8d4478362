"""Deep covariance alignment for domain-adaptive segmentation (C++ core)."""

from ._covalign import (
    ConfigError,
    ContractViolation,
    DataError,
    NumericError,
    SegModel,
    config_hash,
    cr_loss,
    cross_entropy,
    default_benchmark,
    diag,
    evaluate,
    gen,
    generate,
    iou,
    mse_align_loss,
    pearson_matrix,
    pool,
    run,
    softmax_channel,
    triplet_align_loss,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DataError",
    "NumericError",
    "SegModel",
    "config_hash",
    "cr_loss",
    "cross_entropy",
    "default_benchmark",
    "diag",
    "evaluate",
    "gen",
    "generate",
    "iou",
    "mse_align_loss",
    "pearson_matrix",
    "pool",
    "run",
    "softmax_channel",
    "triplet_align_loss",
]
