"""CSV ingestion, checkpoints and JSON artifacts."""
import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .data import EventStream, ResponseTable
from .exceptions import ConfigError, DataError
from .model import FittedModel, ModelSpec, ParameterStore, Standardization
from .trainer import AdamState, AveragedParams, LossGuardState

EVENT_KEYS = ("series_id", "time")
RESPONSE_KEYS = ("series_id", "time", "y")
CHECKPOINT_FORMAT = "cdrnn-checkpoint/1"


def _read_rows(path, required):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing required column(s) {missing}")
        if len(set(header)) != len(header):
            raise DataError(f"{path}:1: duplicate column names")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            rows.append((line_no, row))
    return path, header, rows


def _numeric(path, header, rows, cols):
    out = np.empty((len(rows), len(cols)))
    idx = [header.index(c) for c in cols]
    for i, (line_no, row) in enumerate(rows):
        for j, (c, k) in enumerate(zip(cols, idx)):
            try:
                v = float(row[k])
            except ValueError:
                raise DataError(f"{path}:{line_no}: column {c!r}: cannot parse {row[k]!r} as a number") from None
            if not np.isfinite(v):
                raise DataError(f"{path}:{line_no}: column {c!r}: non-finite value {row[k]!r}")
            out[i, j] = v
    return out


def read_events(path, predictors=None) -> EventStream:
    """Read ``series_id,time,<predictors...>``; every extra column is a predictor."""
    path, header, rows = _read_rows(path, EVENT_KEYS)
    names = [c for c in header if c not in EVENT_KEYS]
    if predictors is not None:
        unknown = [p for p in predictors if p not in names]
        if unknown:
            raise DataError(f"{path}: predictor column(s) {unknown} not found")
        names = list(predictors)
    vals = _numeric(path, header, rows, ["time"] + names)
    series = [r[header.index("series_id")] for _, r in rows]
    _check_sorted(path, rows, series, vals[:, 0])
    return EventStream(series, vals[:, 0], vals[:, 1:], names)


def read_responses(path) -> ResponseTable:
    """Read ``series_id,time,y,<random-factor columns...>``."""
    path, header, rows = _read_rows(path, RESPONSE_KEYS)
    vals = _numeric(path, header, rows, ["time", "y"])
    factors = {c: np.array([r[header.index(c)] for _, r in rows], dtype=str)
               for c in header if c not in RESPONSE_KEYS}
    series = [r[header.index("series_id")] for _, r in rows]
    return ResponseTable(series, vals[:, 0], vals[:, 1], factors)


def _check_sorted(path, rows, series, time):
    last = {}
    for (line_no, _), s, t in zip(rows, series, time):
        if s in last and t < last[s]:
            raise DataError(f"{path}:{line_no}: column 'time': timestamps decrease within series {s!r}")
        last[s] = t


def _atomic_write(path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    return repr(float(v))


def write_events(path, events: EventStream):
    def w(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(list(EVENT_KEYS) + events.predictor_names)
        for s, t, x in zip(events.series, events.time, events.X):
            out.writerow([s, _fmt(t)] + [_fmt(v) for v in x])
    _atomic_write(path, w)


def write_responses(path, responses: ResponseTable):
    names = list(responses.factors)

    def w(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(list(RESPONSE_KEYS) + names)
        for i in range(len(responses)):
            out.writerow([responses.series[i], _fmt(responses.time[i]), _fmt(responses.y[i])]
                         + [responses.factors[n][i] for n in names])
    _atomic_write(path, w)


def write_table(path, header, rows):
    def w(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)
    _atomic_write(path, w)


def write_json(path, obj):
    _atomic_write(path, lambda fh: fh.write(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: file not found")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def save_checkpoint(path, model: FittedModel, state=None, meta=None):
    """Write a model (and optionally trainer state) to a single ``.npz``.

    Arrays are stored at full precision, so reloading is bit-exact.
    """
    arrays = {"format": np.array(CHECKPOINT_FORMAT),
              "spec": np.array(json.dumps(model.spec.to_dict(), sort_keys=True)),
              "meta": np.array(json.dumps(meta or {}, sort_keys=True, default=_json_default))}
    arrays.update({f"param/{k}": v for k, v in model.params.items()})
    arrays.update({f"std/{k}": v for k, v in model.standardization.to_arrays().items()})
    if state:
        arrays.update({f"state/params/{k}": v for k, v in state["params"].items()})
        adam, avg, guard = state["adam"], state["avg"], state["guard"]
        arrays.update({f"state/adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"state/adam_v/{k}": v for k, v in adam.v.items()})
        arrays["state/adam"] = np.array([adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps])
        arrays.update({f"state/avg/{k}": v for k, v in avg.avg.items()})
        arrays["state/avg_meta"] = np.array([avg.count, avg.decay])
        arrays["state/guard"] = np.array([guard.mean, guard.sq, guard.count, guard.decay])
        arrays["state/epoch"] = np.array(state["epoch"])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _group(data, prefix):
    return {k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)}


def load_checkpoint(path, with_state=False):
    """Load a checkpoint; returns the model, or ``(model, state, meta)`` with ``with_state``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: checkpoint not found")
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as e:
        raise ConfigError(f"{path}: unreadable checkpoint ({e})") from None
    with data:
        if "format" not in data.files or str(data["format"]) != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        spec = ModelSpec.from_dict(json.loads(str(data["spec"])))
        params = ParameterStore({k: v.copy() for k, v in _group(data, "param/").items()})
        std = Standardization.from_arrays(_group(data, "std/"))
        meta = json.loads(str(data["meta"]))
        model = FittedModel(spec, params, std)
        if not with_state:
            return model
        state = None
        if "state/epoch" in data.files:
            a = data["state/adam"]
            adam = AdamState(_group(data, "state/adam_m/"), _group(data, "state/adam_v/"),
                             int(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4]))
            am = data["state/avg_meta"]
            g = data["state/guard"]
            state = dict(params=ParameterStore(_group(data, "state/params/")), adam=adam,
                         avg=AveragedParams(_group(data, "state/avg/"), int(am[0]), float(am[1])),
                         guard=LossGuardState(float(g[0]), float(g[1]), int(g[2]), float(g[3])),
                         epoch=int(data["state/epoch"]))
        return model, state, meta
