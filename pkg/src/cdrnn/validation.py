"""Input validation helpers for the estimator API."""
import numpy as np

from .data import EventStream, ResponseTable
from .exceptions import ConfigError, DataError


def _columns(table, required, what):
    cols = [str(c) for c in (table.keys() if isinstance(table, dict) else table.columns)]
    missing = [c for c in required if c not in cols]
    if missing:
        raise DataError(f"{what}: missing column(s) {missing}")
    return cols


def check_events(events, predictors=None) -> EventStream:
    """Coerce ``events`` to an :class:`EventStream`.

    Accepts an EventStream, a DataFrame-like object with ``series_id``,
    ``time`` and predictor columns, or a dict of equal-length arrays.
    """
    if isinstance(events, EventStream):
        if predictors is not None and list(predictors) != events.predictor_names:
            idx = [_index(events.predictor_names, p, "events") for p in predictors]
            return EventStream(events.series, events.time, events.X[:, idx], list(predictors))
        return events
    if isinstance(events, dict) or hasattr(events, "columns"):
        cols = _columns(events, ("series_id", "time"), "events")
        names = list(predictors) if predictors is not None else [c for c in cols if c not in ("series_id", "time")]
        for p in names:
            if p not in cols:
                raise DataError(f"events: missing predictor column {p!r}")
        X = np.column_stack([np.asarray(events[p], dtype=np.float64) for p in names]) if names \
            else np.zeros((len(np.asarray(events["time"])), 0))
        return EventStream(np.asarray(events["series_id"]), np.asarray(events["time"]), X, names)
    raise DataError(f"events: unsupported type {type(events).__name__}")


def check_responses(responses, factors=None) -> ResponseTable:
    """Coerce ``responses`` to a :class:`ResponseTable`.

    Extra columns are random-factor labels; ``factors`` restricts them.
    """
    if isinstance(responses, ResponseTable):
        return responses
    if isinstance(responses, dict) or hasattr(responses, "columns"):
        cols = _columns(responses, ("series_id", "time", "y"), "responses")
        names = list(factors) if factors is not None else [c for c in cols if c not in ("series_id", "time", "y")]
        f = {}
        for n in names:
            if n not in cols:
                raise DataError(f"responses: missing random-factor column {n!r}")
            f[n] = np.asarray(responses[n])
        return ResponseTable(np.asarray(responses["series_id"]), np.asarray(responses["time"]),
                             np.asarray(responses["y"]), f)
    raise DataError(f"responses: unsupported type {type(responses).__name__}")


def _index(names, p, what):
    try:
        return names.index(p)
    except ValueError:
        raise DataError(f"{what}: unknown predictor {p!r}") from None


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(value, name, upper_open=True):
    v = float(value)
    if not (0.0 <= v < 1.0 if upper_open else 0.0 <= v <= 1.0):
        raise ConfigError(f"{name} must lie in [0, 1{')' if upper_open else ']'}, got {value!r}")
    return v


def check_is_fitted(est):
    if not hasattr(est, "model_"):
        from sklearn.exceptions import NotFittedError
        raise NotFittedError(f"this {type(est).__name__} instance is not fitted yet; call 'fit' first")
