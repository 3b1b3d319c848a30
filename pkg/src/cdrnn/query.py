"""Perturbation queries against fitted models.

Every estimate is a difference ``f(alt) - f(ref)`` where each configuration
is a single event (predictor vector, timestamp, delay) in an otherwise
empty window, and ``f`` is a statistic of the predictive distribution.
Uncertainty comes from resampling: pick an ensemble component, draw one
dropout-mask set and one variational sample, freeze them, and evaluate the
whole query grid under that draw.
"""
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import nnkernel as nn
from .exceptions import ConfigError
from .model import AssembledBatch, FittedModel, PredictiveParams, materialize_params, train_masks

STATISTICS = ("mu", "sigma")
DEFAULT_QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class ReferenceConfig:
    x: np.ndarray
    t: float
    delays: np.ndarray
    statistic: str = "mu"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.delays = np.asarray(self.delays, dtype=np.float64)
        if np.any(self.delays < 0) or np.any(np.diff(self.delays) <= 0):
            raise ConfigError("delay grid must be nonnegative and strictly increasing")


def reference_config(model_or_std, delays=None, horizon=None, n_delays=101, statistic="mu"):
    """Training-mean predictors and timestamp, with an evenly spaced delay grid.

    ``horizon`` defaults to the largest training offset.
    """
    std = getattr(model_or_std, "standardization", model_or_std)
    if delays is None:
        if horizon is None:
            horizon = std.offset_max if np.isfinite(std.offset_max) else 1.0
        delays = np.linspace(0.0, horizon, n_delays)
    return ReferenceConfig(std.predictor_mean.copy(), std.time_mean, delays, statistic)


@dataclass
class IrfQueryResult:
    """Point estimates (medians) and quantile bands over a query grid."""

    axes: Dict[str, np.ndarray]
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    statistic: str
    n_samples: int
    quantiles: tuple = DEFAULT_QUANTILES
    out_of_range: bool = False
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def rows(self):
        """Long-format records, one per grid point."""
        names = list(self.axes)
        grids = np.meshgrid(*[self.axes[n] for n in names], indexing="ij")
        out = []
        for idx in np.ndindex(self.median.shape):
            rec = {n: float(g[idx]) for n, g in zip(names, grids)}
            rec.update(statistic=self.statistic, lower=float(self.lower[idx]),
                       median=float(self.median[idx]), upper=float(self.upper[idx]))
            out.append(rec)
        return out

    def to_csv(self, path):
        import csv
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_dict(self):
        return {
            "axes": {k: v.tolist() for k, v in self.axes.items()},
            "statistic": self.statistic,
            "quantiles": list(self.quantiles),
            "n_samples": self.n_samples,
            "out_of_range": self.out_of_range,
            "lower": self.lower.tolist(),
            "median": self.median.tolist(),
            "upper": self.upper.tolist(),
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)


@dataclass
class ModelDraw:
    """One frozen realisation of a fitted model.

    Dropout masks have one indicator per unit, shared by every row, so a
    draw is a single deterministic network.
    """

    model: FittedModel
    snapshot: object
    masks: Optional[dict] = None

    def predict(self, batch) -> PredictiveParams:
        return self.model.predict(batch, snapshot=self.snapshot, masks=self.masks)


def point_draw(model: FittedModel) -> ModelDraw:
    """Evaluation-mode draw: no dropout, variational means, population level."""
    return ModelDraw(model, model.snapshot())


def sample_draw(model: FittedModel, rng, dropout=True, variational=True) -> ModelDraw:
    snap = materialize_params(model.params, model.spec, None, sample_variational=variational, rng=rng)
    masks = train_masks(model.spec, rng, ()) if dropout else None
    return ModelDraw(model, snap, masks)


def single_event_batch(model: FittedModel, X, t, d):
    """Windows holding one valid event each; shapes (G, K), (G,), (G,)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    G = X.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (G,))
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (G,))
    if X.shape[1] != model.spec.n_predictors:
        raise ConfigError(f"expected {model.spec.n_predictors} predictor values")
    z = np.zeros((G, len(model.spec.random_factors)), dtype=np.int64)
    return AssembledBatch(X[:, None, :], t[:, None].copy(), d[:, None].copy(),
                          np.ones((G, 1), dtype=bool), np.zeros(G), t + d, z)


def statistic_of(pp: PredictiveParams, statistic):
    if callable(statistic):
        return statistic(pp)
    if statistic == "mu":
        return pp.mu
    if statistic == "sigma":
        return pp.sigma
    raise ConfigError(f"statistic {statistic!r} is not defined for a normal predictive distribution")


def _evaluate(draw: ModelDraw, X, t, d, statistic):
    return statistic_of(draw.predict(single_event_batch(draw.model, X, t, d)), statistic)


def effect_deltas(draw: ModelDraw, ref_x, ref_t, alt_x, alt_t, d, statistic="mu"):
    """Vectorised ``f(alt) - f(ref)`` over G configurations sharing delays ``d``."""
    alt_x = np.atleast_2d(alt_x)
    G = alt_x.shape[0]
    ref_x = np.broadcast_to(np.asarray(ref_x, dtype=np.float64), (G, alt_x.shape[1]))
    both_x = np.concatenate([ref_x, alt_x])
    both_t = np.concatenate([np.broadcast_to(ref_t, (G,)), np.broadcast_to(alt_t, (G,))])
    both_d = np.concatenate([np.broadcast_to(d, (G,)), np.broadcast_to(d, (G,))])
    v = _evaluate(draw, both_x, both_t, both_d, statistic)
    return v[G:] - v[:G]


def _as_draw(model):
    return model if isinstance(model, ModelDraw) else point_draw(model)


def effect_query(model, ref: ReferenceConfig, alt_x, alt_t=None, delay=0.0, statistic=None):
    """Scalar ``f(alt) - f(ref)`` for one event at ``delay``."""
    statistic = statistic or ref.statistic
    alt_t = ref.t if alt_t is None else alt_t
    return float(effect_deltas(_as_draw(model), ref.x, ref.t, alt_x, alt_t, delay, statistic)[0])


def _components(model):
    if isinstance(model, (list, tuple)):
        return list(model)
    return [model]


def uncertainty_band(ensemble, query: Callable[[ModelDraw], np.ndarray], n_samples=1000,
                     quantiles=DEFAULT_QUANTILES, rng=None, dropout=True, variational=True):
    """Pointwise quantiles of ``query`` over frozen draws from an ensemble.

    Each sample picks a component uniformly, draws one dropout-mask set and
    one variational sample, and evaluates the entire query under it.
    Returns ``(lower, median, upper, samples)``.
    """
    if n_samples < 2:
        raise ConfigError("n_samples must be >= 2")
    rng = np.random.default_rng(rng)
    comps = _components(ensemble)
    vals = []
    for _ in range(n_samples):
        comp = comps[int(rng.integers(len(comps)))]
        draw = sample_draw(comp, rng, dropout=dropout, variational=variational)
        vals.append(np.asarray(query(draw), dtype=np.float64))
    vals = np.stack(vals)
    q = np.quantile(vals, quantiles, axis=0)
    return q[0], q[len(quantiles) // 2], q[-1], vals


def _run(model, query, axes, statistic, n_samples, quantiles, rng, out_of_range):
    comps = _components(model)
    if n_samples is None:
        if len(comps) == 1 and not isinstance(comps[0], ModelDraw):
            v = query(point_draw(comps[0]))
        elif len(comps) == 1:
            v = query(comps[0])
        else:
            v = np.median(np.stack([query(point_draw(c)) for c in comps]), axis=0)
        return IrfQueryResult(axes, v, v.copy(), v.copy(), str(statistic), 1, tuple(quantiles),
                              out_of_range)
    lo, med, hi, samples = uncertainty_band(comps, query, n_samples, quantiles, rng)
    return IrfQueryResult(axes, med, lo, hi, str(statistic), n_samples, tuple(quantiles),
                          out_of_range, samples)


def _first(model):
    m = _components(model)[0]
    return m.model if isinstance(m, ModelDraw) else m


def _k(model, k):
    names = _first(model).spec.predictor_names
    if isinstance(k, str):
        if k not in names:
            raise ConfigError(f"unknown predictor {k!r}")
        return names.index(k)
    return int(k)


def _check_range(model, k_values=(), times=None, delays=None):
    std = _first(model).standardization
    bad = False
    for k, vals in k_values:
        vals = np.asarray(vals)
        bad |= bool(np.any(vals < std.predictor_min[k]) or np.any(vals > std.predictor_max[k]))
    if times is not None:
        times = np.asarray(times)
        bad |= bool(np.any(times < std.time_min) or np.any(times > std.time_max))
    if delays is not None:
        bad |= bool(np.any(np.asarray(delays) > std.offset_max))
    if bad:
        warnings.warn("query grid extends beyond the training data range", stacklevel=3)
    return bad


def irf_curve(model, k, ref: Optional[ReferenceConfig] = None, step=None, statistic=None,
              n_samples=None, quantiles=DEFAULT_QUANTILES, rng=None) -> IrfQueryResult:
    """Effect over the delay grid of raising predictor ``k`` by ``step`` (default one training SD)."""
    k = _k(model, k)
    ref = ref or reference_config(_first(model))
    statistic = statistic or ref.statistic
    std = _first(model).standardization
    step = std.predictor_sd[k] if step is None else step
    alt = ref.x.copy()
    alt[k] += step
    G = ref.delays.size

    def query(draw):
        return effect_deltas(draw, ref.x, ref.t, np.tile(alt, (G, 1)), ref.t, ref.delays, statistic)

    oor = _check_range(model, [(k, [alt[k]])], delays=ref.delays)
    return _run(model, query, {"delay": ref.delays}, statistic, n_samples, quantiles, rng, oor)


def irf_surface(model, k, values, ref: Optional[ReferenceConfig] = None, statistic=None,
                n_samples=None, quantiles=DEFAULT_QUANTILES, rng=None) -> IrfQueryResult:
    """Effect of setting predictor ``k`` to each of ``values``, over value x delay."""
    k = _k(model, k)
    ref = ref or reference_config(_first(model))
    statistic = statistic or ref.statistic
    values = np.asarray(values, dtype=np.float64)
    V, D = values.size, ref.delays.size
    alt = np.tile(ref.x, (V * D, 1))
    alt[:, k] = np.repeat(values, D)
    d = np.tile(ref.delays, V)

    def query(draw):
        return effect_deltas(draw, ref.x, ref.t, alt, ref.t, d, statistic).reshape(V, D)

    oor = _check_range(model, [(k, values)], delays=ref.delays)
    return _run(model, query, {"value": values, "delay": ref.delays}, statistic, n_samples,
                quantiles, rng, oor)


def interaction_surface(model, k1, k2, values1, values2, delay=0.0,
                        ref: Optional[ReferenceConfig] = None, statistic=None, n_samples=None,
                        quantiles=DEFAULT_QUANTILES, rng=None) -> IrfQueryResult:
    """Joint effect of predictors ``k1``/``k2`` over a value grid at a fixed delay."""
    k1, k2 = _k(model, k1), _k(model, k2)
    ref = ref or reference_config(_first(model))
    statistic = statistic or ref.statistic
    v1 = np.asarray(values1, dtype=np.float64)
    v2 = np.asarray(values2, dtype=np.float64)
    alt = np.tile(ref.x, (v1.size * v2.size, 1))
    alt[:, k1] = np.repeat(v1, v2.size)
    alt[:, k2] = np.tile(v2, v1.size)

    def query(draw):
        return effect_deltas(draw, ref.x, ref.t, alt, ref.t, delay, statistic).reshape(v1.size, v2.size)

    oor = _check_range(model, [(k1, v1), (k2, v2)], delays=[delay])
    return _run(model, query, {"value1": v1, "value2": v2}, statistic, n_samples, quantiles, rng, oor)


def nonstationarity_slice(model, k, times, delay=0.0, ref: Optional[ReferenceConfig] = None,
                          step=None, statistic=None, n_samples=None,
                          quantiles=DEFAULT_QUANTILES, rng=None) -> IrfQueryResult:
    """Effect of a ``step`` increase in predictor ``k`` at a fixed delay, by event timestamp."""
    k = _k(model, k)
    ref = ref or reference_config(_first(model))
    statistic = statistic or ref.statistic
    std = _first(model).standardization
    step = std.predictor_sd[k] if step is None else step
    times = np.asarray(times, dtype=np.float64)
    alt = np.tile(ref.x, (times.size, 1))
    alt[:, k] += step

    def query(draw):
        return effect_deltas(draw, np.tile(ref.x, (times.size, 1)), times, alt, times, delay,
                             statistic)

    oor = _check_range(model, [(k, alt[:1, k])], times=times, delays=[delay])
    return _run(model, query, {"time": times}, statistic, n_samples, quantiles, rng, oor)
