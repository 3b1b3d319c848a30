import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cdrnn.data import EventStream, ResponseTable
from cdrnn.exceptions import NumericalError, TrainingError
from cdrnn.model import Hyperparameters, ModelSpec, ParameterStore, Standardization, assemble_inputs
from cdrnn.trainer import (AdamState, AveragedParams, LossGuardState, TrainConfig, adam_step,
                           clip_global_norm, convergence_check, fit, global_norm,
                           iterate_average, loss_guard, time_loss_pvalue)


def tiny_task(seed=0, n=300):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.exponential(0.2, n))
    X = rng.normal(size=(n, 2))
    y = X[:, 0] + 0.1 * rng.normal(size=n)
    ev = EventStream(["0"] * n, t, X, ["a", "b"])
    rs = ResponseTable(["0"] * n, t, y)
    spec = ModelSpec(("a", "b"), history_length=4, hyper=Hyperparameters(n_units=6, batch_size=64))
    batch = assemble_inputs(ev, rs, spec)
    return spec, batch, Standardization.from_data(ev, batch)


@settings(max_examples=50)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_clip_bounds_global_norm(scale, seed):
    rng = np.random.default_rng(seed)
    g = ParameterStore({"a": rng.normal(size=3) * scale, "b": rng.normal(size=(2, 2)) * scale})
    out, pre = clip_global_norm(g)
    assert pre == pytest.approx(np.sqrt(sum(np.sum(v ** 2) for v in g.values())))
    assert global_norm(out) <= 1.0 + 1e-9
    if pre <= 1.0:
        assert out is g
    else:
        np.testing.assert_allclose(out["a"] / g["a"], 1.0 / pre)


def test_clip_rejects_non_finite():
    with pytest.raises(NumericalError):
        clip_global_norm({"a": np.array([np.nan])})


def test_adam_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState.like(p, 0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    adam_step(st_, p, {"w": g1})
    # first step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)
    adam_step(st_, p, {"w": g2})
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    first = np.array([1.0, -2.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p["w"], first - step, rtol=1e-12)


def test_loss_guard_needs_two_updates_and_catches_spike():
    g = LossGuardState()
    assert not loss_guard(g, 1.0)
    assert not loss_guard(g, 1e9)  # only one accepted update so far
    g = LossGuardState()
    for v in np.random.default_rng(0).normal(1.0, 0.01, 50):
        assert not loss_guard(g, v)
    assert loss_guard(g, 1e6)
    assert loss_guard(g, np.inf)
    assert not loss_guard(g, 1.01)


def test_loss_guard_moments_are_debiased():
    g = LossGuardState()
    for v in (2.0, 2.0, 2.0):
        loss_guard(g, v)
    m, sd = g.moments()
    assert m == pytest.approx(2.0)
    assert sd >= 1e-12


def test_iterate_average_debiases_constant_sequence():
    p = {"w": np.array([3.0])}
    avg = AveragedParams.like(p)
    for _ in range(5):
        iterate_average(avg, p)
    assert avg.debiased()["w"][0] == pytest.approx(3.0)


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_time_loss_pvalue_matches_pearsonr(seed):
    y = np.random.default_rng(seed).normal(size=100) - np.linspace(0, 0.2, 100)
    p, r = time_loss_pvalue(y)
    ref = stats.pearsonr(np.arange(100), y)
    assert r == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-8)


def test_convergence_on_plateau_not_on_descent():
    rng = np.random.default_rng(1)
    descending = np.linspace(2, 0, 250) + 0.01 * rng.normal(size=250)
    assert not convergence_check(list(descending))
    flat = np.concatenate([np.linspace(2, 0, 100), np.zeros(150) + 0.01 * rng.normal(size=150)])
    assert convergence_check(list(flat))
    assert not convergence_check([1.0] * 99)


def test_fit_is_deterministic_and_logs_restores_on_injected_spike(tmp_path):
    spec, batch, std = tiny_task()
    cfg = TrainConfig(max_epochs=25)
    a = fit(spec, batch, std, 7, cfg, log_path=tmp_path / "a.jsonl")
    b = fit(spec, batch, std, 7, cfg, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])

    fired = []

    def hook(epoch, b_i, loss):  # transient fault: fires once
        if (epoch, b_i) == (15, 2) and not fired:
            fired.append(epoch)
            return 1e6
        return loss

    c = fit(spec, batch, std, 7, cfg, loss_hook=hook)
    restores = [r for r in c.log if r["event"] == "restore"]
    assert len(restores) == 1 and restores[0]["to_epoch"] == 10
    assert c.epochs == 25
    assert all(r["clipped_norm"] <= 1 + 1e-9 for r in c.log if r["event"] == "batch")


def test_persistent_divergence_raises_training_error():
    spec, batch, std = tiny_task()
    with pytest.raises(TrainingError) as exc:
        fit(spec, batch, std, 0, TrainConfig(max_epochs=30),
            loss_hook=lambda e, b, l: np.nan if e >= 3 else l)
    assert sum(r["event"] == "restore" for r in exc.value.log) == 4


def test_fit_learns_simple_signal():
    spec, batch, std = tiny_task()
    res = fit(spec, batch, std, 0, TrainConfig(max_epochs=40))
    losses = [r["loss"] for r in res.log if r["event"] == "epoch"]
    assert losses[-1] < losses[0] - 0.3
    assert res.model.params.all_finite()
