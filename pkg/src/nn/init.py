"""Parameter initialisers."""

from typing import Tuple

import numpy as np

from .tensor import Parameter


def truncated_normal(shape: Tuple[int, ...], mean: float, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal draws, resampling any value more than two standard deviations from the mean."""
    values = rng.normal(mean, std, size=shape)
    outside = np.abs(values - mean) > 2.0 * std
    while outside.any():
        values[outside] = rng.normal(mean, std, size=int(outside.sum()))
        outside = np.abs(values - mean) > 2.0 * std
    return values


def truncated_normal_parameter(name: str, shape, std: float, rng: np.random.Generator,
                               dtype=np.float64) -> Parameter:
    return Parameter(truncated_normal(tuple(shape), 0.0, std, rng), name=name, dtype=dtype)


def constant_parameter(name: str, shape, value: float, dtype=np.float64) -> Parameter:
    return Parameter(np.full(tuple(shape), value), name=name, dtype=dtype)


def uniform_parameter(name: str, shape, low: float, high: float, rng: np.random.Generator,
                      dtype=np.float64) -> Parameter:
    return Parameter(rng.uniform(low, high, size=tuple(shape)), name=name, dtype=dtype)
