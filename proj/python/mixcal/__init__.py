# Copyright 2026 The mixcal Authors
# SPDX-License-Identifier: Apache-2.0
"""Python bindings for mixcal.

Configs are plain dicts with the same fields as the CLI's JSON config; unset
fields take their defaults. Checkpoints travel as JSON text.
"""

import json

from . import _mixcal
from ._mixcal import (
    CapacityError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ParseError,
    beta_schedule,
    calibration_loss,
    calibration_minimizer,
    check_decomposition,
    expected_calibration_error,
    spearman,
    total_loss,
)

__all__ = [
    "CapacityError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "NumericError",
    "ParseError",
    "beta_schedule",
    "calibration_loss",
    "calibration_minimizer",
    "check_decomposition",
    "default_config",
    "evaluate",
    "expected_calibration_error",
    "generate_split",
    "perturbation_probe",
    "spearman",
    "total_loss",
    "train",
]


def default_config():
    return json.loads(_mixcal.default_config())


def _dump(config):
    return json.dumps(config if config is not None else {})


def generate_split(config=None, split="train"):
    return _mixcal.generate_split(_dump(config), split)


def train(config=None):
    """Returns {"checkpoint": str, "metrics_csv": str, "final": {split: report}}."""
    return _mixcal.train(_dump(config))


def evaluate(checkpoint, config=None, split="val"):
    return _mixcal.evaluate(checkpoint, _dump(config), split)


def perturbation_probe(checkpoint, tokens, eps=(1e-1, 1e-2, 1e-3, 1e-4), direction_seed=0):
    return _mixcal.perturbation_probe(checkpoint, list(tokens), list(eps), direction_seed)
