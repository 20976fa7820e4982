"""Reference predictors the trained models must beat."""
from __future__ import annotations

from enum import Enum

import numpy as np


class BaselineKind(Enum):
    HISTORICAL_MEAN = "historical_mean"
    PERSISTENCE = "persistence"


def baseline_predict(kind: BaselineKind, history: np.ndarray, horizon: int) -> np.ndarray:
    """Constant-shape predictions from history alone.

    1-D history (thread gaps): returns `horizon` gaps. 2-D history
    (count rows): returns `horizon` future rows. HISTORICAL_MEAN fills
    with the global mean of the history; PERSISTENCE repeats the last
    gap or row.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        raise ValueError("baseline needs a non-empty history")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if h.ndim == 1:
        fill = h.mean() if kind is BaselineKind.HISTORICAL_MEAN else h[-1]
        return np.full(horizon, fill, dtype=np.float64)
    if h.ndim == 2:
        if kind is BaselineKind.HISTORICAL_MEAN:
            return np.full((horizon, h.shape[1]), h.mean(), dtype=np.float64)
        return np.tile(h[-1], (horizon, 1))
    raise ValueError(f"history must be 1-D or 2-D, got shape {h.shape}")
