"""Event streams and response tables."""
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .exceptions import DataError


def _as_keys(a, n, what):
    a = np.asarray(a)
    if a.shape != (n,):
        raise DataError(f"{what}: expected {n} series keys, got shape {a.shape}")
    return a.astype(str)


@dataclass
class EventStream:
    """Timestamped predictor vectors grouped by series.

    Parameters
    ----------
    series : array of str, shape (N,)
    time : array of float, shape (N,)
    X : array of float, shape (N, K)
    predictor_names : list of str, length K
    """

    series: np.ndarray
    time: np.ndarray
    X: np.ndarray
    predictor_names: List[str]

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        n = self.time.shape[0]
        self.X = np.asarray(self.X, dtype=np.float64).reshape(n, -1)
        self.series = _as_keys(self.series, n, "events")
        self.predictor_names = list(self.predictor_names)
        if self.X.shape[1] != len(self.predictor_names):
            raise DataError(
                f"events: {self.X.shape[1]} predictor columns but {len(self.predictor_names)} names")
        if not np.all(np.isfinite(self.time)) or not np.all(np.isfinite(self.X)):
            raise DataError("events: non-finite time or predictor value")
        for key in np.unique(self.series):
            t = self.time[self.series == key]
            if np.any(np.diff(t) < 0):
                raise DataError(f"events: timestamps decrease within series {key!r}")

    def __len__(self):
        return self.time.shape[0]

    def column(self, name):
        return self.X[:, self.predictor_names.index(name)]

    def subset(self, idx):
        return EventStream(self.series[idx], self.time[idx], self.X[idx], self.predictor_names)


@dataclass
class ResponseTable:
    """Response samples ``y`` at times ``time`` with random-effect level labels."""

    series: np.ndarray
    time: np.ndarray
    y: np.ndarray
    factors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        n = self.time.shape[0]
        self.y = np.asarray(self.y, dtype=np.float64).reshape(n)
        self.series = _as_keys(self.series, n, "responses")
        self.factors = {k: np.asarray(v).astype(str) for k, v in self.factors.items()}
        for k, v in self.factors.items():
            if v.shape != (n,):
                raise DataError(f"responses: factor {k!r} has shape {v.shape}, expected ({n},)")
        if not np.all(np.isfinite(self.time)) or not np.all(np.isfinite(self.y)):
            raise DataError("responses: non-finite time or response value")

    def __len__(self):
        return self.time.shape[0]

    def subset(self, idx):
        return ResponseTable(self.series[idx], self.time[idx], self.y[idx],
                             {k: v[idx] for k, v in self.factors.items()})
