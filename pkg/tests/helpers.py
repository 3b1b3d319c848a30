"""Shared builders and the finite-difference oracle used across tests."""
import numpy as np

from cdrnn.model import AssembledBatch, Standardization, init_params, nll_loss


def random_batch(spec, rng, M=5, levels=None):
    T, K = spec.history_length, spec.n_predictors
    mask = rng.random((M, T)) > 0.3
    mask[:, -1] = True
    F = len(spec.random_factors)
    z = np.stack([rng.integers(0, f.n_levels, M) for f in spec.random_factors], axis=1) \
        if F else np.zeros((M, 0), dtype=np.int64)
    return AssembledBatch(rng.normal(size=(M, T, K)), rng.uniform(0, 10, (M, T)),
                          rng.uniform(0, 3, (M, T)), mask, rng.normal(size=M), np.zeros(M), z)


def random_std(K, rng, n_train=50):
    return Standardization(rng.uniform(0.5, 2.0, K), np.zeros(K), float(rng.uniform(0.5, 2)), 0.0,
                           float(rng.uniform(1, 5)), 0.0, float(rng.uniform(0.5, 2)), n_train)


def perturbed_params(spec, rng, scale=0.3):
    store = init_params(spec, rng)
    for k in store:
        store[k] = store[k] + rng.normal(scale=scale, size=store[k].shape)
    return store


def fd_worst_error(store, spec, batch, std, masks=None, noise=None, h=1e-5, floor=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    res = nll_loss(store, spec, batch, std, masks=masks, noise=noise)
    worst = 0.0
    for key, v in store.items():
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp = nll_loss(store, spec, batch, std, masks=masks, noise=noise).loss
            v[idx] = old - h
            lm = nll_loss(store, spec, batch, std, masks=masks, noise=noise).loss
            v[idx] = old
            fd = (lp - lm) / (2 * h)
            a = res.grads[key][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


ACCEPTANCE = {}


def report(n, ok, detail):
    """Record and print one acceptance line."""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok
