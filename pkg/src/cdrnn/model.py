"""The CDRNN regression function and its penalized likelihood objective.

A model maps a window of preceding events ``(x_n, t_n, d_n = tau - t_n)`` to
the parameters ``s = (mu, sigma)`` of a normal predictive distribution::

    s = s0 + 1/(T (J+1)) * sum_n G_n diag(b) [1; x'_n]

where ``x'_n = f_in([t_n; x_n])`` and ``G_n`` is produced by one or more
IRF networks. Each network owns a subset of the convolved columns (``rate``
plus predictors) for a subset of the distribution parameters.

All arithmetic happens in standardized units: predictors, timestamps,
offsets and the response are divided by their training-set SDs. Reported
``mu``/``sigma`` are mapped back to response units.
"""
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nnkernel as nn
from .data import EventStream, ResponseTable
from .exceptions import ConfigError, DataError, NumericalError

RATE = "rate"
DIST_PARAMS = ("mu", "sigma")
SIGMA_EPS = 1e-5
FIXED_PRIOR_SD = 1.0
RANEF_PRIOR_SD = 0.1
RANEF_GROUPS = ("irf_bias", "coef", "s0")
INFERENCE_MODES = ("mle", "variational")


@dataclass
class IrfBlockSpec:
    """One IRF network.

    ``convolved`` lists the columns (``"rate"`` and/or predictor names) whose
    convolution weights this network produces, for every parameter in
    ``targets``. ``conditioning`` lists the predictors fed to the network as
    inputs. ``None`` means "all predictors" (plus rate for ``convolved``).
    """

    convolved: Optional[Tuple[str, ...]] = None
    conditioning: Optional[Tuple[str, ...]] = None
    include_offset: bool = True
    include_timestamp: bool = True
    targets: Tuple[str, ...] = DIST_PARAMS
    dirac_delta: bool = False

    def __post_init__(self):
        if self.convolved is not None:
            self.convolved = tuple(self.convolved)
        if self.conditioning is not None:
            self.conditioning = tuple(self.conditioning)
        self.targets = tuple(self.targets)

    def resolve(self, predictor_names):
        """Concrete ``(convolved, conditioning)`` tuples for a predictor list."""
        conv = (RATE,) + tuple(predictor_names) if self.convolved is None else self.convolved
        cond = tuple(predictor_names) if self.conditioning is None else self.conditioning
        return conv, cond


@dataclass
class RandomFactor:
    """A grouping factor with named levels and the parameter groups that get offsets."""

    name: str
    levels: Tuple[str, ...]
    groups: Tuple[str, ...] = RANEF_GROUPS

    def __post_init__(self):
        self.levels = tuple(str(v) for v in self.levels)
        self.groups = tuple(self.groups)

    @property
    def n_levels(self):
        return len(self.levels)


@dataclass
class Hyperparameters:
    n_layers: int = 2
    n_units: int = 32
    weight_l2: float = 5.0
    ranef_l2: float = 10.0
    dropout: float = 0.2
    learning_rate: float = 0.003
    batch_size: int = 1024
    inference: str = "mle"


@dataclass
class ModelSpec:
    """Declarative description of a model; full and null models alike.

    ``f_in`` is ``"identity"`` or a tuple of hidden-layer widths for an
    input-processing network whose output keeps one column per predictor.
    """

    predictor_names: Tuple[str, ...]
    irf_blocks: Tuple[IrfBlockSpec, ...] = (IrfBlockSpec(),)
    f_in: object = "identity"
    history_length: int = 32
    max_lookback: Optional[float] = None
    random_factors: Tuple[RandomFactor, ...] = ()
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    def __post_init__(self):
        self.predictor_names = tuple(self.predictor_names)
        self.irf_blocks = tuple(self.irf_blocks)
        self.random_factors = tuple(self.random_factors)
        if self.f_in != "identity":
            self.f_in = tuple(int(u) for u in self.f_in)

    @property
    def n_predictors(self):
        return len(self.predictor_names)

    @property
    def columns(self):
        """Convolved column names; index 0 is rate."""
        return (RATE,) + self.predictor_names

    @property
    def rescale(self):
        return 1.0 / (self.history_length * (self.n_predictors + 1))

    def to_dict(self):
        d = asdict(self)
        d["f_in"] = self.f_in if self.f_in == "identity" else list(self.f_in)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["irf_blocks"] = tuple(IrfBlockSpec(**b) for b in d.get("irf_blocks", [{}]))
        d["random_factors"] = tuple(RandomFactor(**f) for f in d.get("random_factors", []))
        d["hyper"] = Hyperparameters(**d.get("hyper", {}))
        return cls(**d)


def validate_spec(spec: ModelSpec) -> List[str]:
    """List every violation of the block/coverage rules; empty means valid.

    Each ``(convolved column, parameter)`` pair may be produced by at most
    one block. Uncovered pairs are legal: they are how null models ablate
    an effect on one distribution parameter.
    """
    out = []
    names = set(spec.predictor_names)
    if len(names) != len(spec.predictor_names):
        out.append("duplicate predictor names")
    if RATE in names:
        out.append(f"{RATE!r} is reserved and cannot be a predictor name")
    if spec.history_length < 1:
        out.append(f"history_length must be >= 1, got {spec.history_length}")
    if spec.max_lookback is not None and spec.max_lookback <= 0:
        out.append("max_lookback must be positive")
    if not spec.irf_blocks:
        out.append("at least one IRF block is required")
    h = spec.hyper
    if h.n_layers < 0 or h.n_units < 1:
        out.append("n_layers must be >= 0 and n_units >= 1")
    if not 0.0 <= h.dropout < 1.0:
        out.append(f"dropout must be in [0, 1), got {h.dropout}")
    if h.weight_l2 < 0 or h.ranef_l2 < 0:
        out.append("L2 strengths must be nonnegative")
    if h.learning_rate <= 0 or h.batch_size < 1:
        out.append("learning_rate must be positive and batch_size >= 1")
    if h.inference not in INFERENCE_MODES:
        out.append(f"inference must be one of {INFERENCE_MODES}, got {h.inference!r}")
    if spec.f_in != "identity" and any(u < 1 for u in spec.f_in):
        out.append("f_in hidden widths must be >= 1")
    owner = {}
    for i, block in enumerate(spec.irf_blocks):
        conv, cond = block.resolve(spec.predictor_names)
        if not block.targets:
            out.append(f"block {i}: targets must be nonempty")
        for p in block.targets:
            if p not in DIST_PARAMS:
                out.append(f"block {i}: unknown distribution parameter {p!r}")
        if len(set(block.targets)) != len(block.targets):
            out.append(f"block {i}: duplicate targets")
        if not conv:
            out.append(f"block {i}: convolved set is empty")
        if len(set(conv)) != len(conv) or len(set(cond)) != len(cond):
            out.append(f"block {i}: duplicate feature names")
        for c in conv:
            if c != RATE and c not in names:
                out.append(f"block {i}: unknown convolved feature {c!r}")
        for c in cond:
            if c == RATE:
                out.append(f"block {i}: rate cannot be a conditioning feature")
            elif c not in names:
                out.append(f"block {i}: unknown conditioning feature {c!r}")
        if block.dirac_delta and block.include_offset:
            out.append(f"block {i}: a Dirac-delta block cannot take the offset d as input")
        for c in conv:
            for p in block.targets:
                if (c, p) in owner:
                    out.append(f"blocks {owner[(c, p)]} and {i} both convolve {c!r} for {p!r}")
                else:
                    owner[(c, p)] = i
    seen = set()
    for f in spec.random_factors:
        if f.name in seen:
            out.append(f"duplicate random factor {f.name!r}")
        seen.add(f.name)
        if f.n_levels < 1:
            out.append(f"random factor {f.name!r} has no levels")
        for g in f.groups:
            if g not in RANEF_GROUPS:
                out.append(f"random factor {f.name!r}: unknown group {g!r}")
    return out


def check_spec(spec):
    problems = validate_spec(spec)
    if problems:
        raise ConfigError("invalid model spec:\n" + "\n".join("  - " + p for p in problems))


@dataclass
class Standardization:
    """Training-set scales (and means, used as the query reference)."""

    predictor_sd: np.ndarray
    predictor_mean: np.ndarray
    response_sd: float
    response_mean: float
    time_sd: float
    time_mean: float
    offset_sd: float
    n_train: int
    predictor_min: np.ndarray = None
    predictor_max: np.ndarray = None
    time_min: float = -np.inf
    time_max: float = np.inf
    offset_max: float = np.inf

    def __post_init__(self):
        self.predictor_sd = np.asarray(self.predictor_sd, dtype=np.float64)
        self.predictor_mean = np.asarray(self.predictor_mean, dtype=np.float64)
        k = self.predictor_sd.shape
        self.predictor_min = np.asarray(np.full(k, -np.inf) if self.predictor_min is None
                                        else self.predictor_min, dtype=np.float64)
        self.predictor_max = np.asarray(np.full(k, np.inf) if self.predictor_max is None
                                        else self.predictor_max, dtype=np.float64)

    @staticmethod
    def _sd(a):
        sd = float(np.std(a)) if np.size(a) > 1 else 0.0
        return sd if sd > 0 and np.isfinite(sd) else 1.0

    @classmethod
    def from_data(cls, events: EventStream, batch: "AssembledBatch"):
        valid_d = batch.d[batch.mask]
        return cls(
            predictor_sd=np.array([cls._sd(events.X[:, k]) for k in range(events.X.shape[1])]),
            predictor_mean=events.X.mean(axis=0) if len(events) else np.zeros(events.X.shape[1]),
            response_sd=cls._sd(batch.y),
            response_mean=float(np.mean(batch.y)) if len(batch) else 0.0,
            time_sd=cls._sd(events.time),
            time_mean=float(np.mean(events.time)) if len(events) else 0.0,
            offset_sd=cls._sd(valid_d),
            n_train=int(len(batch)),
            predictor_min=events.X.min(axis=0) if len(events) else None,
            predictor_max=events.X.max(axis=0) if len(events) else None,
            time_min=float(events.time.min()) if len(events) else -np.inf,
            time_max=float(events.time.max()) if len(events) else np.inf,
            offset_max=float(valid_d.max()) if valid_d.size else np.inf,
        )

    def to_arrays(self):
        return {k: np.asarray(v, dtype=np.float64) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, d):
        kw = {k: np.asarray(d[k]) for k in cls.__dataclass_fields__}
        for k in ("response_sd", "response_mean", "time_sd", "time_mean", "offset_sd",
                  "time_min", "time_max", "offset_max"):
            kw[k] = float(kw[k])
        kw["n_train"] = int(kw["n_train"])
        return cls(**kw)


@dataclass
class AssembledBatch:
    """Fixed-length event windows, one per response, newest event last.

    Arrays are in raw units: ``X`` (M, T, K), ``t``/``d``/``mask`` (M, T),
    ``y``/``tau`` (M,), ``z`` (M, F) integer level indices.
    """

    X: np.ndarray
    t: np.ndarray
    d: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    tau: np.ndarray
    z: np.ndarray

    def __len__(self):
        return self.y.shape[0]

    def subset(self, idx):
        return AssembledBatch(self.X[idx], self.t[idx], self.d[idx], self.mask[idx],
                              self.y[idx], self.tau[idx], self.z[idx])

    @staticmethod
    def concat(batches):
        return AssembledBatch(*(np.concatenate([getattr(b, f) for b in batches])
                                for f in ("X", "t", "d", "mask", "y", "tau", "z")))

    def last_valid(self):
        """One-hot (M, T) marking the most recent valid row of each window."""
        m = self.mask
        last = np.zeros(m.shape, dtype=bool)
        has = m.any(axis=1)
        pos = m.shape[1] - 1 - np.argmax(m[:, ::-1], axis=1)
        last[np.nonzero(has)[0], pos[has]] = True
        return last


def level_indices(spec: ModelSpec, responses: ResponseTable):
    z = np.zeros((len(responses), len(spec.random_factors)), dtype=np.int64)
    for f_i, factor in enumerate(spec.random_factors):
        if factor.name not in responses.factors:
            raise DataError(f"responses lack random factor column {factor.name!r}")
        lookup = {lvl: i for i, lvl in enumerate(factor.levels)}
        labels = responses.factors[factor.name]
        try:
            z[:, f_i] = [lookup[v] for v in labels]
        except KeyError as e:
            raise DataError(f"unknown level {e.args[0]!r} of random factor {factor.name!r}") from None
    return z


def assemble_inputs(events: EventStream, responses: ResponseTable, spec: ModelSpec) -> AssembledBatch:
    """Build one window per response from the events of its series.

    A window holds the ``history_length`` most recent events with
    ``t <= tau`` (and ``tau - t <= max_lookback`` when set), newest last.
    Shorter histories are padded with masked rows at the front.
    """
    if list(events.predictor_names) != list(spec.predictor_names):
        raise DataError(f"event predictors {events.predictor_names} != spec predictors "
                        f"{list(spec.predictor_names)}")
    T, K, M = spec.history_length, spec.n_predictors, len(responses)
    X = np.zeros((M, T, K))
    t = np.zeros((M, T))
    d = np.zeros((M, T))
    mask = np.zeros((M, T), dtype=bool)
    offsets = np.arange(-T, 0)
    for key in np.unique(responses.series):
        r_idx = np.nonzero(responses.series == key)[0]
        e_idx = np.nonzero(events.series == key)[0]
        if e_idx.size == 0:
            continue
        et = events.time[e_idx]
        tau = responses.time[r_idx]
        end = np.searchsorted(et, tau, side="right")
        rows = end[:, None] + offsets[None, :]
        valid = rows >= 0
        rows = np.where(valid, rows, 0)
        tt = et[rows]
        dd = tau[:, None] - tt
        if spec.max_lookback is not None:
            valid &= dd <= spec.max_lookback
        X[r_idx] = np.where(valid[..., None], events.X[e_idx][rows], 0.0)
        t[r_idx] = np.where(valid, tt, 0.0)
        d[r_idx] = np.where(valid, dd, 0.0)
        mask[r_idx] = valid
    return AssembledBatch(X, t, d, mask, responses.y.copy(), responses.time.copy(),
                          level_indices(spec, responses))


class ParameterStore(dict):
    """Named float64 arrays: fixed part, random offsets and variational scales.

    Naming scheme::

        irf{i}/W{l}, irf{i}/b{l}      IRF network i, layer l
        in/W{l}, in/b{l}              input-processing network
        coef, s0                      coefficient vector b and bias s0
        coef_logscale, s0_logscale    variational log-SDs (variational mode)
        re/{factor}/irf{i}/b{l}       random offsets (levels, width), hidden layers
        re/{factor}/coef, re/{factor}/s0
    """

    def copy(self):
        return ParameterStore({k: v.copy() for k, v in self.items()})

    def zeros_like(self):
        return ParameterStore({k: np.zeros_like(v) for k, v in self.items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values())


def _net_names(spec):
    names = [f"irf{i}" for i in range(len(spec.irf_blocks))]
    if spec.f_in != "identity":
        names.append("in")
    return names


def _block_io(spec, i):
    block = spec.irf_blocks[i]
    conv, cond = block.resolve(spec.predictor_names)
    d_in = int(block.include_offset) + int(block.include_timestamp) + len(cond)
    return d_in, len(block.targets) * len(conv)


def _net_sizes(spec, name):
    h = spec.hyper
    if name == "in":
        return [spec.n_predictors + 1] + list(spec.f_in) + [spec.n_predictors]
    d_in, d_out = _block_io(spec, int(name[3:]))
    return [d_in] + [h.n_units] * h.n_layers + [d_out]


def init_params(spec: ModelSpec, rng, s0_mu=0.0) -> ParameterStore:
    """Glorot-initialised networks, unit coefficients, sigma starting at 1."""
    check_spec(spec)
    p = ParameterStore()
    for name in _net_names(spec):
        layers = nn.init_layers(_net_sizes(spec, name), rng)
        for l, layer in enumerate(layers):
            p[f"{name}/W{l}"] = layer.weights
            p[f"{name}/b{l}"] = layer.biases
    p["coef"] = np.ones(spec.n_predictors + 1)
    p["s0"] = np.array([s0_mu, float(nn.softplus_inverse(1.0 - SIGMA_EPS))])
    if spec.hyper.inference == "variational":
        p["coef_logscale"] = np.full(spec.n_predictors + 1, np.log(0.01))
        p["s0_logscale"] = np.full(2, np.log(0.01))
    for f in spec.random_factors:
        if "irf_bias" in f.groups:
            for i in range(len(spec.irf_blocks)):
                sizes = _net_sizes(spec, f"irf{i}")
                for l in range(len(sizes) - 2):
                    p[f"re/{f.name}/irf{i}/b{l}"] = np.zeros((f.n_levels, sizes[l + 1]))
        if "coef" in f.groups:
            p[f"re/{f.name}/coef"] = np.zeros((f.n_levels, spec.n_predictors + 1))
        if "s0" in f.groups:
            p[f"re/{f.name}/s0"] = np.zeros((f.n_levels, 2))
    return p


def _centered(v):
    return v - v.mean(axis=0, keepdims=True)


@dataclass
class Snapshot:
    """Effective parameters for one batch.

    Random offsets make biases, ``coef`` and ``s0`` per-response arrays with
    a leading batch axis; without them that axis has length 1.
    """

    nets: Dict[str, List[nn.LayerParams]]
    coef: np.ndarray
    s0: np.ndarray
    z: Optional[np.ndarray] = None
    noise: Optional[Dict[str, np.ndarray]] = None


def materialize_params(store: ParameterStore, spec: ModelSpec, z=None,
                       sample_variational=False, rng=None, noise=None) -> Snapshot:
    """Effective parameters ``v = v0 + V z`` for the responses indexed by ``z``.

    ``z`` is an (M, F) array of level indices, or ``None`` for population
    level. Offsets are centered across levels here, so the materialized
    columns of each factor always sum to zero. With ``sample_variational``,
    ``coef`` and ``s0`` are drawn as ``mean + scale * noise``; pass
    ``noise`` to freeze the standard-normal draws.
    """
    variational = spec.hyper.inference == "variational"
    if z is not None:
        z = np.asarray(z, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != len(spec.random_factors):
            raise DataError(f"level indicators must have shape (M, {len(spec.random_factors)})")
        for f_i, f in enumerate(spec.random_factors):
            if z.size and (z[:, f_i].min() < 0 or z[:, f_i].max() >= f.n_levels):
                raise DataError(f"unknown level index for random factor {f.name!r}")
        if not spec.random_factors:
            z = None

    def offsets(key_suffix):
        total = None
        for f_i, f in enumerate(spec.random_factors):
            key = f"re/{f.name}/{key_suffix}"
            if key in store:
                off = _centered(store[key])[z[:, f_i]]
                total = off if total is None else total + off
        return total

    nets = {}
    for name in _net_names(spec):
        n_layers = len(_net_sizes(spec, name)) - 1
        layers = []
        for l in range(n_layers):
            b = store[f"{name}/b{l}"]
            if z is not None and name != "in" and l < n_layers - 1:
                off = offsets(f"{name}/b{l}")
                if off is not None:
                    b = (b + off)[:, None, :]
            act = "identity" if l == n_layers - 1 else "gelu"
            layers.append(nn.LayerParams(store[f"{name}/W{l}"], b, act))
        nets[name] = layers

    used_noise = None
    coef, s0 = store["coef"], store["s0"]
    if variational and (sample_variational or noise is not None):
        if noise is None:
            if rng is None:
                raise ConfigError("variational sampling needs an rng")
            noise = {"coef": rng.standard_normal(coef.shape), "s0": rng.standard_normal(s0.shape)}
        used_noise = noise
        coef = coef + np.exp(store["coef_logscale"]) * noise["coef"]
        s0 = s0 + np.exp(store["s0_logscale"]) * noise["s0"]
    coef = coef[None, :]
    s0 = s0[None, :]
    if z is not None:
        off = offsets("coef")
        if off is not None:
            coef = coef + off
        off = offsets("s0")
        if off is not None:
            s0 = s0 + off
    return Snapshot(nets, coef, s0, z, used_noise)


@dataclass
class PredictiveParams:
    """Normal predictive parameters in response units."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class _Cache:
    inputs: dict
    fin_trace: Optional[nn.Trace]
    xp: np.ndarray
    blocks: list
    s: np.ndarray


def _standardized(batch: AssembledBatch, std: Standardization):
    w = batch.mask.astype(np.float64)
    return {
        "x": batch.X / std.predictor_sd,
        "t": batch.t / std.time_sd,
        "d": batch.d / std.offset_sd,
        "w": w,
        "w_last": batch.last_valid().astype(np.float64),
    }


def _forward_std(snap: Snapshot, spec: ModelSpec, inputs, masks=None):
    """Raw (pre-bounding) parameter channels ``s`` in standardized units."""
    masks = masks or {}
    xs = inputs["x"]
    M, T = xs.shape[:2]
    fin_trace = None
    if spec.f_in == "identity":
        xp = xs
    else:
        fin_trace = nn.ffn_forward(snap.nets["in"],
                                   np.concatenate([inputs["t"][..., None], xs], axis=-1),
                                   masks.get("in"))
        xp = fin_trace.output
    s = np.broadcast_to(snap.s0, (M, len(DIST_PARAMS))).copy()
    cols = spec.columns
    ones = np.ones((M, T, 1))
    blocks = []
    for i, block in enumerate(spec.irf_blocks):
        conv, cond = block.resolve(spec.predictor_names)
        parts = []
        if block.include_offset:
            parts.append(inputs["d"][..., None])
        if block.include_timestamp:
            parts.append(inputs["t"][..., None])
        cond_idx = [spec.predictor_names.index(c) for c in cond]
        if cond_idx:
            parts.append(xp[..., cond_idx])
        x_in = np.concatenate(parts, axis=-1) if parts else np.zeros((M, T, 0))
        trace = nn.ffn_forward(snap.nets[f"irf{i}"], x_in, masks.get(f"irf{i}"))
        P, C = len(block.targets), len(conv)
        out = trace.output.reshape(M, T, P, C)
        col_idx = [cols.index(c) for c in conv]
        xc = np.concatenate([ones if c == RATE else xp[..., [spec.predictor_names.index(c)]]
                             for c in conv], axis=-1)
        coef_c = snap.coef[:, col_idx][:, None, :]
        wx = xc * coef_c
        rw = (inputs["w_last"] if block.dirac_delta else inputs["w"]) * spec.rescale
        part = np.einsum("mtpc,mtc->mp", out, wx * rw[..., None])
        tgt = [DIST_PARAMS.index(p) for p in block.targets]
        s[:, tgt] += part
        blocks.append(dict(trace=trace, out=out, xc=xc, wx=wx, rw=rw, coef_c=coef_c,
                           col_idx=col_idx, tgt=tgt, cond_idx=cond_idx, conv=conv,
                           n_pre=len(parts) - (1 if cond_idx else 0)))
    return s, _Cache(inputs, fin_trace, xp, blocks, s)


def _check_finite(s):
    bad = ~np.all(np.isfinite(s), axis=1)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise NumericalError(f"non-finite predictive parameters at response {idx}", index=idx)


def bound_sigma(raw):
    return nn.softplus(raw) + SIGMA_EPS


def forward(snap: Snapshot, spec: ModelSpec, batch: AssembledBatch, std: Standardization,
            masks=None) -> PredictiveParams:
    """Predictive ``mu``/``sigma`` in response units for every window in ``batch``."""
    s, _ = _forward_std(snap, spec, _standardized(batch, std), masks)
    _check_finite(s)
    return PredictiveParams(mu=s[:, 0] * std.response_sd,
                            sigma=bound_sigma(s[:, 1]) * std.response_sd)


def _backward_std(snap: Snapshot, spec: ModelSpec, cache: _Cache, gs):
    """Gradients of ``<gs, s>`` with respect to every snapshot tensor."""
    grads = {"coef": np.zeros(np.broadcast_shapes(snap.coef.shape, (gs.shape[0], 1))),
             "s0": gs.copy()}
    net_grads = {}
    xp = cache.xp
    g_xp = None if spec.f_in == "identity" else np.zeros_like(xp)
    M, T = xp.shape[:2]
    for i, (block, c) in enumerate(zip(spec.irf_blocks, cache.blocks)):
        gp = gs[:, c["tgt"]]
        g_out = (c["rw"][:, :, None, None] * gp[:, None, :, None]) * c["wx"][:, :, None, :]
        g_wx = c["rw"][..., None] * np.einsum("mtpc,mp->mtc", c["out"], gp)
        grads["coef"][:, c["col_idx"]] += np.einsum("mtc,mtc->mc", g_wx, c["xc"])
        layers = snap.nets[f"irf{i}"]
        gb = nn.ffn_backward(layers, c["trace"], g_out.reshape(M, T, -1))
        net_grads[f"irf{i}"] = gb
        if g_xp is not None:
            g_xc = g_wx * c["coef_c"]
            for j, name in enumerate(c["conv"]):
                if name != RATE:
                    g_xp[..., spec.predictor_names.index(name)] += g_xc[..., j]
            if c["cond_idx"]:
                g_xp[..., c["cond_idx"]] += gb.inputs[..., c["n_pre"]:]
    if g_xp is not None:
        net_grads["in"] = nn.ffn_backward(snap.nets["in"], cache.fin_trace, g_xp)
    return grads, net_grads


def _reduce_offsets(store, spec, snap, key_suffix, g):
    """Map per-response gradient ``g`` (M, D) onto centered offset tables."""
    out = {}
    for f_i, f in enumerate(spec.random_factors):
        key = f"re/{f.name}/{key_suffix}"
        if key in store:
            per_level = np.zeros_like(store[key])
            np.add.at(per_level, snap.z[:, f_i], g)
            out[key] = per_level - per_level.mean(axis=0, keepdims=True)
    return out


def _store_grads(store, spec, snap, grads, net_grads):
    out = store.zeros_like()
    for name, gb in net_grads.items():
        n_layers = len(gb.weights)
        for l in range(n_layers):
            out[f"{name}/W{l}"] = gb.weights[l]
            gbias = gb.biases[l]
            if gbias.ndim == 1:
                out[f"{name}/b{l}"] = gbias
            else:
                g2 = gbias.reshape(gbias.shape[0], -1)
                out[f"{name}/b{l}"] = g2.sum(axis=0)
                if snap.z is not None:
                    out.update(_reduce_offsets(store, spec, snap, f"{name}/b{l}", g2))
    for key in ("coef", "s0"):
        g = grads[key]
        out[key] = g.sum(axis=0)
        if snap.z is not None and g.shape[0] == snap.z.shape[0]:
            out.update(_reduce_offsets(store, spec, snap, key, g))
        if snap.noise is not None:
            out[f"{key}_logscale"] = out[key] * snap.noise[key] * np.exp(store[f"{key}_logscale"])
    return out


@dataclass
class LossResult:
    loss: float
    nll: float
    penalty: float
    grads: ParameterStore


def penalties(store: ParameterStore, spec: ModelSpec, n_train):
    """Weight L2, random-effect shrinkage and variational KL, with gradients."""
    h = spec.hyper
    total = 0.0
    grads = store.zeros_like()
    for name in _net_names(spec):
        n_layers = len(_net_sizes(spec, name)) - 1
        layers = [nn.LayerParams(store[f"{name}/W{l}"], store[f"{name}/b{l}"])
                  for l in range(n_layers)]
        pen, g = nn.l2_penalty(layers, h.weight_l2)
        total += pen
        for l in range(n_layers):
            grads[f"{name}/W{l}"] += g[l]
    for key, v in store.items():
        if not key.startswith("re/"):
            continue
        vc = _centered(v)
        if key.endswith("/coef") or key.endswith("/s0"):
            # normal prior on random offsets of coef/s0, per training datum
            prec = 1.0 / (RANEF_PRIOR_SD ** 2 * n_train)
            total += 0.5 * prec * float(np.sum(vc ** 2))
            grads[key] += prec * vc
        elif h.ranef_l2 > 0:
            total += h.ranef_l2 * float(np.mean(vc ** 2))
            grads[key] += 2.0 * h.ranef_l2 * vc / vc.size
    if h.inference == "variational":
        for key in ("coef", "s0"):
            m, ls = store[key], store[f"{key}_logscale"]
            var_ratio = np.exp(2.0 * ls) / FIXED_PRIOR_SD ** 2
            kl = np.sum(0.5 * (var_ratio + (m / FIXED_PRIOR_SD) ** 2 - 1.0) - ls + np.log(FIXED_PRIOR_SD))
            total += float(kl) / n_train
            grads[key] += m / FIXED_PRIOR_SD ** 2 / n_train
            grads[f"{key}_logscale"] += (var_ratio - 1.0) / n_train
    return total, grads


def normal_nll(y, mu, sigma):
    return 0.5 * np.log(2.0 * np.pi) + np.log(sigma) + 0.5 * ((y - mu) / sigma) ** 2


def nll_loss(store: ParameterStore, spec: ModelSpec, batch: AssembledBatch, std: Standardization,
             masks=None, sample_variational=False, rng=None, noise=None,
             with_penalty=True) -> LossResult:
    """Mean normal NLL (standardized units) plus penalties, with exact gradients.

    Dropout ``masks`` and variational ``noise`` are treated as constants, so
    finite differences with the same frozen draws reproduce the gradients.
    """
    snap = materialize_params(store, spec, batch.z if spec.random_factors else None,
                              sample_variational=sample_variational, rng=rng, noise=noise)
    inputs = _standardized(batch, std)
    s, cache = _forward_std(snap, spec, inputs, masks)
    _check_finite(s)
    M = len(batch)
    y = batch.y / std.response_sd
    mu = s[:, 0]
    sigma = bound_sigma(s[:, 1])
    nll = float(np.mean(normal_nll(y, mu, sigma)))
    r = (mu - y) / sigma
    gs = np.empty_like(s)
    gs[:, 0] = r / sigma / M
    gs[:, 1] = (1.0 / sigma - r ** 2 / sigma) * nn.sigmoid(s[:, 1]) / M
    grads, net_grads = _backward_std(snap, spec, cache, gs)
    g = _store_grads(store, spec, snap, grads, net_grads)
    pen = 0.0
    if with_penalty:
        pen, pg = penalties(store, spec, std.n_train)
        for k in g:
            g[k] += pg[k]
    return LossResult(nll + pen, nll, pen, g)


def train_masks(spec: ModelSpec, rng, shape, rate=None):
    """Dropout masks for every network; ``shape`` gives the leading axes."""
    rate = spec.hyper.dropout if rate is None else rate
    if rate == 0.0:
        return None
    out = {}
    for name in _net_names(spec):
        sizes = _net_sizes(spec, name)
        out[name] = nn.sample_dropout_mask(rate, sizes[1:-1], rng, shape)
    return out


@dataclass
class FittedModel:
    """A spec, its (averaged) parameters and the standardization record."""

    spec: ModelSpec
    params: ParameterStore
    standardization: Standardization

    def snapshot(self, z=None, sample=False, rng=None):
        return materialize_params(self.params, self.spec, z, sample_variational=sample, rng=rng)

    def predict(self, batch: AssembledBatch, snapshot=None, masks=None) -> PredictiveParams:
        if snapshot is None:
            snapshot = self.snapshot(batch.z if self.spec.random_factors else None)
        return forward(snapshot, self.spec, batch, self.standardization, masks)

    def loglik(self, batch: AssembledBatch):
        """Per-response log-likelihood in response units."""
        pp = self.predict(batch)
        return -normal_nll(batch.y, pp.mu, pp.sigma)

    def with_params(self, params):
        return replace(self, params=params)
