from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class MeasurementModel:
    """Measurement map ``h: R^n -> R^m`` and its Jacobian."""

    m: int
    h: Callable[[np.ndarray], np.ndarray]
    H: Callable[[np.ndarray], np.ndarray]
    name: str = ""


def selector(n: int, indices: Sequence[int], name: str = "") -> MeasurementModel:
    """Linear measurement picking the listed state coordinates."""
    idx = np.asarray(indices, dtype=int)
    S = np.zeros((len(idx), n))
    S[np.arange(len(idx)), idx] = 1.0
    S.setflags(write=False)
    return MeasurementModel(len(idx), lambda x: np.asarray(x)[..., idx], lambda x: S, name)


def linear(C: np.ndarray, name: str = "") -> MeasurementModel:
    C = np.array(C, dtype=float)
    C.setflags(write=False)
    return MeasurementModel(C.shape[0], lambda x: C @ x, lambda x: C, name)
