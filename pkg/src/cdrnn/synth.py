"""Synthetic event streams with known continuous-time response kernels.

Predictors are equicorrelated standard normals, events arrive at fixed or
exponential intervals, and each response is the exact (untruncated)
convolution of every preceding event with the true kernels plus Gaussian
noise.
"""
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammaln

from .data import EventStream, ResponseTable
from .exceptions import ConfigError

FAMILIES = ("exponential", "normal", "shifted_gamma")
DEFAULT_KERNEL_PARAMS = {
    "exponential": {"beta": 1.0},
    "normal": {"mean": 1.0, "sd": 0.5},
    "shifted_gamma": {"alpha": 2.0, "beta": 2.0, "delta": -0.5},
}
TIMINGS = ("fixed", "random", "async")


@dataclass
class KernelSpec:
    """A true IRF: ``coefficient`` times a probability density over delay."""

    family: str = "exponential"
    params: dict = field(default_factory=dict)
    coefficient: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}")
        self.params = {**DEFAULT_KERNEL_PARAMS[self.family], **(self.params or {})}
        p = self.params
        ok = {
            "exponential": lambda: p["beta"] > 0,
            "normal": lambda: p["sd"] > 0,
            "shifted_gamma": lambda: p["alpha"] > 0 and p["beta"] > 0,
        }[self.family]()
        if not ok:
            raise ConfigError(f"{self.family} kernel parameters out of domain: {p}")


def kernel_eval(kernel: KernelSpec, d):
    """IRF value at delay ``d``; zero outside the density's support."""
    d = np.asarray(d, dtype=np.float64)
    p = kernel.params
    if kernel.family == "exponential":
        b = p["beta"]
        with np.errstate(over="ignore"):
            val = np.where(d >= 0, b * np.exp(-b * np.maximum(d, 0.0)), 0.0)
    elif kernel.family == "normal":
        z = (d - p["mean"]) / p["sd"]
        val = np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * p["sd"])
    else:
        a, b = p["alpha"], p["beta"]
        x = d - p["delta"]
        pos = x > 0
        xs = np.where(pos, x, 1.0)
        logpdf = a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(xs) - b * xs
        val = np.where(pos, np.exp(logpdf), 0.0)
        if a == 1.0:
            val = np.where(x == 0, b, val)
    return kernel.coefficient * val


@dataclass
class SynthConfig:
    n_predictors: int = 3
    correlation: float = 0.0
    noise_sd: float = 0.1
    timing: str = "random"
    interval: float = 0.2
    n_events: int = 10000
    n_responses: Optional[int] = None
    kernels: Optional[List[KernelSpec]] = None
    sigma_predictor: Optional[int] = None
    sigma_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.timing not in TIMINGS:
            raise ConfigError(f"timing must be one of {TIMINGS}")
        if self.interval <= 0 or self.n_events < 1 or self.n_predictors < 1:
            raise ConfigError("interval must be positive; n_events and n_predictors >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")
        if self.kernels is None:
            self.kernels = [KernelSpec() for _ in range(self.n_predictors)]
        self.kernels = [k if isinstance(k, KernelSpec) else KernelSpec(**k) for k in self.kernels]
        if len(self.kernels) != self.n_predictors:
            raise ConfigError("need exactly one kernel per predictor")
        if self.sigma_predictor is not None and not 0 <= self.sigma_predictor < self.n_predictors:
            raise ConfigError("sigma_predictor out of range")

    @property
    def predictor_names(self):
        return [f"x{k + 1}" for k in range(self.n_predictors)]

    def to_dict(self):
        return asdict(self)


def equicorrelation(K, r):
    return np.full((K, K), float(r)) + (1.0 - float(r)) * np.eye(K)


def gen_predictors(K, r, count, rng):
    """Standard-normal columns with every pairwise correlation equal to ``r``."""
    C = equicorrelation(K, r)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise ConfigError(f"equicorrelation matrix with K={K}, r={r} is not positive definite") from None
    return rng.standard_normal((count, K)) @ L.T


def _arrivals(timing, interval, count, rng):
    if timing == "fixed":
        return np.arange(count) * interval
    gaps = rng.exponential(interval, size=count)
    gaps[0] = 0.0
    return np.cumsum(gaps)


def gen_events(config: SynthConfig, rng):
    """Event stream plus response times.

    ``fixed``: ``t_n = n * interval``; ``random``: exponential gaps with mean
    ``interval``. Responses coincide with events unless ``async``, in which
    case their times come from an independent exponential process.
    """
    timing = "random" if config.timing == "async" else config.timing
    t = _arrivals(timing, config.interval, config.n_events, rng)
    X = gen_predictors(config.n_predictors, config.correlation, config.n_events, rng)
    events = EventStream(np.full(config.n_events, "0"), t, X, config.predictor_names)
    if config.timing == "async":
        n = config.n_responses or config.n_events
        tau = _arrivals("random", config.interval * config.n_events / n, n, rng)
        tau = tau + rng.exponential(config.interval)
    else:
        tau = t.copy()
        if config.n_responses is not None and config.n_responses < config.n_events:
            tau = np.sort(rng.choice(tau, config.n_responses, replace=False))
    return events, tau


def convolve(events: EventStream, kernels, response_times, chunk=256):
    """Exact convolution: per response and predictor, sum over all events with ``t <= tau``.

    Returns an (M, K) array of per-predictor contributions.
    """
    tau = np.asarray(response_times, dtype=np.float64)
    out = np.zeros((tau.size, len(kernels)))
    order = np.argsort(events.time, kind="stable")
    et, X = events.time[order], events.X[order]
    for start in range(0, tau.size, chunk):
        tc = tau[start:start + chunk]
        n_max = np.searchsorted(et, tc.max(), side="right")
        d = tc[:, None] - et[None, :n_max]
        valid = d >= 0
        for k, kern in enumerate(kernels):
            w = np.where(valid, kernel_eval(kern, np.where(valid, d, 0.0)), 0.0)
            out[start:start + chunk, k] = w @ X[:n_max, k]
    return out


def synth_response(events: EventStream, kernels, noise_sd, response_times, rng,
                   sigma_predictor=None, sigma_strength=0.0) -> ResponseTable:
    """Responses ``y = sum_n sum_k x_nk kernel_k(tau - t_n) + noise``.

    With ``sigma_predictor`` the noise SD becomes
    ``noise_sd * exp(sigma_strength * c_k(tau))`` where ``c_k`` is that
    predictor's convolved contribution, making the data heteroscedastic.
    """
    tau = np.asarray(response_times, dtype=np.float64)
    contrib = convolve(events, kernels, tau)
    mean = contrib.sum(axis=1)
    sd = np.full(tau.size, float(noise_sd))
    if sigma_predictor is not None:
        sd = sd * np.exp(sigma_strength * contrib[:, sigma_predictor])
    y = mean + sd * rng.standard_normal(tau.size)
    return ResponseTable(np.full(tau.size, "0"), tau, y)


def generate(config: SynthConfig):
    """Events, responses and a ground-truth record for ``config``."""
    rng = np.random.default_rng(config.seed)
    events, tau = gen_events(config, rng)
    responses = synth_response(events, config.kernels, config.noise_sd, tau, rng,
                               config.sigma_predictor, config.sigma_strength)
    truth = {
        "predictors": config.predictor_names,
        "kernels": {name: asdict(k) for name, k in zip(config.predictor_names, config.kernels)},
        "config": config.to_dict(),
    }
    return events, responses, truth


def truth_curve(kernel: KernelSpec, delays, step=1.0):
    """Ground-truth response change for a ``step`` increase of the predictor."""
    return kernel_eval(kernel, delays) * step
