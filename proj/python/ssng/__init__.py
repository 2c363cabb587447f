"""Python bindings for the ssng library: kernels, evaluation metrics and the command line runner."""

import torch  # noqa: F401  loads the libtorch shared libraries the extension links against

from ._ssng import (
    ConfigError,
    DataError,
    DomainError,
    __version__,
    categorical_kl_uniform,
    collapse_metric,
    config_hash,
    gaussian_kl,
    levenshtein,
    neg_cosine,
    procedural_dsprites,
    resolve_config,
    run,
    topk_accuracy,
    topsim,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "__version__",
    "categorical_kl_uniform",
    "collapse_metric",
    "config_hash",
    "gaussian_kl",
    "levenshtein",
    "neg_cosine",
    "procedural_dsprites",
    "resolve_config",
    "run",
    "topk_accuracy",
    "topsim",
]
