"""Data partitioning, out-of-sample likelihood, ensembles and the ensemble permutation test."""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import CDRNNError, ConfigError, DataError, TrainingError
from .model import AssembledBatch, FittedModel, ModelSpec, Standardization, check_spec
from .trainer import FitResult, TrainConfig, fit

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "exploratory", "test")


def split_data(n_items, ratios=(0.5, 0.25, 0.25), seed=0, names=PARTITIONS) -> Dict[str, np.ndarray]:
    """Seeded random partition of ``range(n_items)``.

    Counts are ``floor(ratio * n)`` with leftovers handed out by largest
    remainder, so the proportions are as exact as integer counts allow.
    Returns sorted index arrays keyed by partition name.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or len(ratios) != len(names) or np.any(ratios < 0) \
            or not np.isclose(ratios.sum(), 1.0):
        raise ConfigError(f"ratios must be {len(names)} nonnegative numbers summing to 1")
    raw = ratios * n_items
    counts = np.floor(raw).astype(int)
    leftover = n_items - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:leftover]] += 1
    perm = np.random.default_rng(seed).permutation(n_items)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return {name: np.sort(perm[bounds[i]:bounds[i + 1]]) for i, name in enumerate(names)}


def eval_loglik(model: FittedModel, batch: AssembledBatch) -> np.ndarray:
    """Per-item log-likelihood in response units (eval mode, averaged params, variational means)."""
    return model.loglik(batch)


@dataclass
class LikelihoodMatrix:
    """Per-item log-likelihoods: ``values[n, e]`` for item n under component e."""

    values: np.ndarray
    items: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        self.values = v[:, None] if v.ndim == 1 else v
        if self.values.ndim != 2:
            raise DataError("likelihood matrix must be 2-d (items x components)")
        if self.items is not None:
            self.items = np.asarray(self.items)
            if self.items.shape != (self.values.shape[0],):
                raise DataError("item identifiers do not match the number of rows")

    @property
    def total(self):
        """Summed (over items) mean (over components) log-likelihood."""
        return float(self.values.mean(axis=1).sum())


@dataclass
class TestResult:
    observed: float
    p: float
    n_iter: int
    total0: float
    total1: float
    null: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self):
        return dict(observed=self.observed, p=self.p, n_iter=self.n_iter,
                    total0=self.total0, total1=self.total1)


def _as_matrix(L):
    return L if isinstance(L, LikelihoodMatrix) else LikelihoodMatrix(L)


def resample_differences(pooled, E, n_iter, rng, chunk=None):
    """Null distribution of ``|L1 - L2|`` under per-item repartitioning.

    ``pooled`` is (N, 2E). Each iteration shuffles every item's row
    independently and splits it into halves of size E, so values never
    move between items.
    """
    N = pooled.shape[0]
    totals = pooled.sum(axis=1)
    chunk = chunk or max(1, int(4e6 // max(1, pooled.size)))
    out = np.empty(n_iter)
    for start in range(0, n_iter, chunk):
        c = min(chunk, n_iter - start)
        shuffled = rng.permuted(np.broadcast_to(pooled, (c,) + pooled.shape), axis=-1)
        first = shuffled[..., :E].sum(axis=-1)
        out[start:start + c] = np.abs((2.0 * first - totals).sum(axis=-1)) / E
    return out


def permutation_test(L0, L1, n_iter=10000, rng=None, keep_null=False) -> TestResult:
    """Ensemble paired permutation test of two likelihood matrices.

    The observed statistic is ``|sum_n mean_e L1 - sum_n mean_e L0|``. Per
    iteration, each item's 2E values are pooled and split at random into
    two sets of E. ``p = max(#{resampled >= observed}, 1) / n_iter``.
    """
    L0, L1 = _as_matrix(L0), _as_matrix(L1)
    if L0.values.shape != L1.values.shape:
        raise DataError(f"likelihood matrices differ in shape: {L0.values.shape} vs {L1.values.shape}")
    if L0.items is not None and L1.items is not None and not np.array_equal(L0.items, L1.items):
        raise DataError("likelihood matrices are not aligned on the same items")
    if n_iter < 1:
        raise ConfigError("n_iter must be >= 1")
    rng = np.random.default_rng(rng)
    E = L0.values.shape[1]
    t0, t1 = L0.total, L1.total
    observed = abs(t1 - t0)
    null = resample_differences(np.concatenate([L0.values, L1.values], axis=1), E, n_iter, rng)
    tol = 1e-10 * max(1.0, observed)
    hits = int(np.count_nonzero(null >= observed - tol))
    p = max(hits, 1) / n_iter
    return TestResult(observed, p, n_iter, t0, t1, null if keep_null else None)


def derive_seeds(root_seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root_seed).spawn(n)]


@dataclass
class Ensemble:
    components: List[FitResult]
    seeds: List[int]
    manifest: dict

    @property
    def models(self):
        return [c.model for c in self.components]

    def loglik_matrix(self, batch: AssembledBatch, items=None) -> LikelihoodMatrix:
        return LikelihoodMatrix(np.stack([eval_loglik(m, batch) for m in self.models], axis=1), items)


def _fit_one(spec, train, std, seed, config, explore):
    return fit(spec, train, std, seed, config, explore=explore)


def ensemble_fit(spec: ModelSpec, train: AssembledBatch, std: Standardization, E=10, root_seed=0,
                 config: Optional[TrainConfig] = None, explore=None, retries=1, n_jobs=1) -> Ensemble:
    """Fit ``E`` replicates that differ only in their derived seeds.

    A component that raises a training error is retried with a fresh seed
    derived from the same root, up to ``retries`` times.
    """
    check_spec(spec)
    if E < 1:
        raise ConfigError("ensemble size must be >= 1")
    seeds = derive_seeds(root_seed, E)
    if n_jobs == 1:
        results = [_try_fit(spec, train, std, s, config, explore) for s in seeds]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(_try_fit)(spec, train, std, s, config, explore)
                                          for s in seeds)
    failures = []
    for i in range(E):
        attempt = 0
        while isinstance(results[i], CDRNNError) and attempt < retries:
            attempt += 1
            seeds[i] = derive_seeds([root_seed, i, attempt], 1)[0]
            results[i] = _try_fit(spec, train, std, seeds[i], config, explore)
        if isinstance(results[i], CDRNNError):
            failures.append(f"component {i} (seed {seeds[i]}): {results[i]}")
    if failures:
        raise TrainingError("ensemble fitting failed:\n" + "\n".join(failures))
    manifest = dict(
        root_seed=root_seed if isinstance(root_seed, int) else list(root_seed),
        size=E, seeds=seeds,
        epochs=[r.epochs for r in results],
        converged=[r.converged for r in results],
        final_losses=[r.final_loss for r in results],
        restores=[r.restores for r in results],
        spec=spec.to_dict(),
    )
    return Ensemble(results, seeds, manifest)


def _try_fit(spec, train, std, seed, config, explore):
    try:
        return _fit_one(spec, train, std, seed, config, explore)
    except TrainingError as e:
        logger.warning("component with seed %s failed: %s", seed, e)
        return e


def manifest_hash(manifest) -> str:
    blob = json.dumps(manifest, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
