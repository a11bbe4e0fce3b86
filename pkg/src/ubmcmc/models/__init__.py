"""Built-in discretized targets and their synthetic-data generators."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..rng import RngStream
from ..targets import DiscretizedTarget
from . import fem
from .elliptic import EllipticModel, make_elliptic_data
from .sirx import SirxModel, make_sirx_data
from .toy import ToyModel, exact_g, make_toy_data

MODEL_NAMES = ("toy", "elliptic", "sirx")

__all__ = [
    "MODEL_NAMES",
    "EllipticModel",
    "SirxModel",
    "ToyModel",
    "exact_g",
    "fem",
    "make_data",
    "make_elliptic_data",
    "make_model",
    "make_sirx_data",
    "make_toy_data",
]


def make_data(name: str, stream: RngStream, **kwargs) -> np.ndarray:
    """Synthetic observations for a named model (defaults per model)."""
    if name == "toy":
        return make_toy_data(stream, **kwargs)
    if name == "elliptic":
        return make_elliptic_data(stream, **kwargs)
    if name == "sirx":
        return make_sirx_data(stream, **kwargs)
    raise ConfigError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


def make_model(name: str, y: np.ndarray, theta) -> DiscretizedTarget:
    if name == "toy":
        return ToyModel(y, float(theta))
    if name == "elliptic":
        return EllipticModel(y, float(theta))
    if name == "sirx":
        return SirxModel(y, theta)
    raise ConfigError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
