# SPDX-License-Identifier: Apache-2.0
"""Hierarchical masked autoregressive image generation (C++ core)."""

from ._core import (
    ConfigError,
    DimensionError,
    FeatureExtractor,
    FormatError,
    HimarError,
    Model,
    NumericError,
    RunConfig,
    config_keys,
    fd_proxy,
    frechet_distance,
    gradcheck,
    inference_schedule,
    make_shapes_dataset,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "FeatureExtractor",
    "FormatError",
    "HimarError",
    "Model",
    "NumericError",
    "RunConfig",
    "config_keys",
    "fd_proxy",
    "frechet_distance",
    "gradcheck",
    "inference_schedule",
    "make_shapes_dataset",
]
