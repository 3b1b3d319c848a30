"""Stochastic optimization with the stabilization recipe.

Adam on global-norm-clipped gradients, a loss-spike guard that restores the
last checkpoint, exponential iterate averaging, and the time-loss
convergence criterion.
"""
import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import stats

from .exceptions import NumericalError, TrainingError
from .model import (AssembledBatch, FittedModel, ModelSpec, ParameterStore, Standardization,
                    check_spec, init_params, nll_loss, train_masks)

logger = logging.getLogger(__name__)

EMA_DECAY = 0.999
SPIKE_SDS = 1000.0
SD_FLOOR = 1e-12


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads, max_norm=1.0):
    """Scale every entry by ``max_norm / norm`` when the global norm exceeds ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NumericalError("non-finite gradient")
    if norm <= max_norm:
        return grads, norm
    f = max_norm / norm
    return type(grads)({k: g * f for k, g in grads.items()}), norm


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, lr):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class LossGuardState:
    mean: float = 0.0
    sq: float = 0.0
    count: int = 0
    decay: float = EMA_DECAY

    def moments(self):
        c = 1.0 - self.decay ** self.count
        m = self.mean / c
        var = max(self.sq / c - m * m, 0.0)
        return m, max(np.sqrt(var), SD_FLOOR)


def loss_guard(guard: LossGuardState, loss) -> bool:
    """Return True (spike) iff ``loss`` is non-finite or more than 1000 moving SDs above the moving mean.

    The guard only fires after two accepted updates and only updates on accepted losses.
    """
    if not np.isfinite(loss):
        return True
    if guard.count >= 2:
        m, sd = guard.moments()
        if loss > m + SPIKE_SDS * sd:
            return True
    guard.count += 1
    guard.mean = guard.decay * guard.mean + (1.0 - guard.decay) * loss
    guard.sq = guard.decay * guard.sq + (1.0 - guard.decay) * loss * loss
    return False


@dataclass
class AveragedParams:
    avg: dict
    count: int = 0
    decay: float = EMA_DECAY

    @classmethod
    def like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()})

    def debiased(self):
        if self.count == 0:
            raise ValueError("no updates yet")
        c = 1.0 - self.decay ** self.count
        return ParameterStore({k: a / c for k, a in self.avg.items()})


def iterate_average(avg: AveragedParams, params):
    avg.count += 1
    for k, p in params.items():
        a = avg.avg[k]
        a *= avg.decay
        a += (1.0 - avg.decay) * p
    return avg


def time_loss_pvalue(window_losses):
    """Two-sided p of the Pearson correlation between loss and epoch index, and r."""
    y = np.asarray(window_losses, dtype=np.float64)
    n = y.size
    if n < 3 or np.ptp(y) == 0:
        return 1.0, 0.0
    x = np.arange(n) - (n - 1) / 2.0
    yc = y - y.mean()
    r = float(np.dot(x, yc) / np.sqrt(np.dot(x, x) * np.dot(yc, yc)))
    r = min(max(r, -1.0), 1.0)
    if abs(r) == 1.0:
        return 0.0, r
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2)), r


def fails_to_reject(window_losses, alpha=0.5):
    p, r = time_loss_pvalue(window_losses)
    return p > alpha or r >= 0


def convergence_check(loss_history, window=100, alpha=0.5):
    """Time-loss criterion: converged once at least half of the last ``window`` epochs fail to reject.

    An epoch fails to reject when the loss-vs-epoch correlation over its
    trailing ``window`` epochs is non-negative or has p > ``alpha``. Epochs
    without a full trailing window never count.
    """
    n = len(loss_history)
    if n < window:
        return False
    losses = np.asarray(loss_history, dtype=np.float64)
    start = max(window, n - window + 1)
    fails = sum(fails_to_reject(losses[e - window:e], alpha) for e in range(start, n + 1))
    return fails >= window / 2


class _ConvergenceTracker:
    """Incremental form of :func:`convergence_check`."""

    def __init__(self, window, alpha):
        self.window, self.alpha = window, alpha
        self.flags = []

    def reset(self, history):
        self.flags = []
        for n in range(1, len(history) + 1):
            self._push(history[:n])

    def _push(self, history):
        if len(history) >= self.window:
            self.flags.append(fails_to_reject(history[-self.window:], self.alpha))

    def update(self, history):
        self._push(history)
        return len(history) >= self.window and sum(self.flags[-self.window:]) >= self.window / 2


@dataclass
class TrainConfig:
    max_epochs: int = 5000
    min_epochs: int = 0
    checkpoint_every: int = 10
    convergence_window: int = 100
    convergence_alpha: float = 0.5
    guard: bool = True
    max_restores: int = 3
    diagnostic: str = "train"
    diagnostic_every: int = 10
    max_grad_norm: float = 1.0


@dataclass
class FitResult:
    model: FittedModel
    log: List[dict]
    epochs: int
    converged: bool
    restores: int
    final_loss: float
    state: dict = field(default_factory=dict)


def _snapshot_state(params, adam, guard, avg, epoch, history):
    return copy.deepcopy(dict(params=params, adam=adam, guard=guard, avg=avg,
                              epoch=epoch, history=history))


def fit(spec: ModelSpec, train: AssembledBatch, std: Standardization, seed,
        config: Optional[TrainConfig] = None, explore: Optional[AssembledBatch] = None,
        loss_hook: Optional[Callable[[int, int, float], float]] = None,
        log_path=None) -> FitResult:
    """Train ``spec`` on ``train`` and return the de-biased averaged parameters.

    ``loss_hook(epoch, batch_index, loss)`` may replace the observed batch
    loss (fault injection). With ``diagnostic="explore"`` the convergence
    metric is the held-out NLL of ``explore`` every ``diagnostic_every``
    epochs instead of the training epoch loss.
    """
    check_spec(spec)
    cfg = config or TrainConfig()
    rng = np.random.default_rng(seed)
    h = spec.hyper
    s0_mu = float(np.mean(train.y)) / std.response_sd if len(train) else 0.0
    params = init_params(spec, rng, s0_mu=s0_mu)
    adam = AdamState.like(params, h.learning_rate)
    guard = LossGuardState()
    avg = AveragedParams.like(params)
    history: List[float] = []
    log: List[dict] = []
    checkpoint = _snapshot_state(params, adam, guard, avg, 0, history)
    restores = consecutive = 0
    variational = h.inference == "variational"
    M = len(train)
    bs = min(h.batch_size, M)
    sink = open(log_path, "w") if log_path else None

    def emit(rec):
        log.append(rec)
        if sink:
            sink.write(json.dumps(rec, sort_keys=True) + "\n")

    tracker = _ConvergenceTracker(cfg.convergence_window, cfg.convergence_alpha)
    epoch = 0
    converged = False
    try:
        while epoch < cfg.max_epochs:
            epoch += 1
            order = rng.permutation(M)
            losses, norms = [], []
            spiked = False
            for b_i, start in enumerate(range(0, M, bs)):
                batch = train.subset(order[start:start + bs])
                masks = train_masks(spec, rng, batch.mask.shape)
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        res = nll_loss(params, spec, batch, std, masks=masks,
                                       sample_variational=variational, rng=rng)
                    loss = res.loss
                except NumericalError:
                    res, loss = None, float("nan")
                if loss_hook is not None:
                    loss = loss_hook(epoch, b_i, loss)
                is_spike = loss_guard(guard, loss) if cfg.guard else not np.isfinite(loss)
                if not is_spike:
                    try:
                        grads, norm = clip_global_norm(res.grads, cfg.max_grad_norm)
                    except NumericalError:
                        is_spike = True
                if is_spike:
                    spiked = True
                    restores += 1
                    consecutive += 1
                    emit(dict(event="restore", epoch=epoch, batch=b_i, loss=_jsonable(loss),
                              to_epoch=checkpoint["epoch"], restores=restores))
                    logger.warning("loss spike at epoch %d batch %d (%s); restoring epoch %d",
                                   epoch, b_i, loss, checkpoint["epoch"])
                    if consecutive > cfg.max_restores:
                        raise TrainingError(f"training diverged after {cfg.max_restores} consecutive "
                                            "restores", log)
                    st = copy.deepcopy(checkpoint)
                    params, adam, guard, avg = st["params"], st["adam"], st["guard"], st["avg"]
                    epoch, history = st["epoch"], st["history"]
                    tracker.reset(history)
                    break
                applied = global_norm(grads)
                adam_step(adam, params, grads)
                iterate_average(avg, params)
                losses.append(loss)
                norms.append(applied)
                emit(dict(event="batch", epoch=epoch, batch=b_i, loss=loss, grad_norm=norm,
                          clipped_norm=applied))
            if spiked:
                continue
            if cfg.diagnostic == "explore" and explore is not None:
                if epoch % cfg.diagnostic_every == 0:
                    fm = FittedModel(spec, avg.debiased(), std)
                    history.append(float(-np.mean(fm.loglik(explore))))
            else:
                history.append(float(np.mean(losses)))
            new_point = cfg.diagnostic != "explore" or explore is None or epoch % cfg.diagnostic_every == 0
            converged = bool(new_point and tracker.update(history) and epoch >= cfg.min_epochs)
            emit(dict(event="epoch", epoch=epoch, loss=float(np.mean(losses)),
                      max_grad_norm=float(max(norms)), restores=restores, converged=converged,
                      diagnostic=history[-1] if history else None))
            if epoch % cfg.checkpoint_every == 0:
                # restores only count as consecutive while they return to the same checkpoint
                checkpoint = _snapshot_state(params, adam, guard, avg, epoch, history)
                consecutive = 0
            if converged:
                break
    finally:
        if sink:
            sink.close()
    final = avg.debiased() if avg.count else params.copy()
    model = FittedModel(spec, final, std)
    final_loss = history[-1] if history else float("nan")
    state = dict(params=params, adam=adam, guard=guard, avg=avg, epoch=epoch)
    return FitResult(model, log, epoch, converged, restores, final_loss, state)


def _jsonable(x):
    x = float(x)
    return x if np.isfinite(x) else str(x)
