import numpy as np
import pytest
from scipy import integrate, stats

from cdrnn.data import EventStream
from cdrnn.exceptions import ConfigError
from cdrnn.synth import (KernelSpec, SynthConfig, convolve, equicorrelation, gen_events,
                         gen_predictors, generate, kernel_eval)


@pytest.mark.parametrize("family", ["exponential", "normal", "shifted_gamma"])
def test_kernels_are_unit_mass_densities(family):
    k = KernelSpec(family)
    lo = -np.inf if family == "normal" else (-0.5 if family == "shifted_gamma" else 0.0)
    mass, _ = integrate.quad(lambda d: float(kernel_eval(k, d)), lo, np.inf, limit=200)
    assert mass == pytest.approx(1.0, abs=1e-7)


def test_shifted_gamma_matches_scipy():
    k = KernelSpec("shifted_gamma", {"alpha": 2.0, "beta": 2.0, "delta": -0.5})
    d = np.linspace(-1, 4, 51)
    ref = stats.gamma.pdf(d + 0.5, a=2.0, scale=0.5)
    np.testing.assert_allclose(kernel_eval(k, d), ref, rtol=1e-12, atol=1e-300)


def test_exponential_closed_form():
    k = KernelSpec("exponential", {"beta": 1.5}, coefficient=2.0)
    d = np.array([-1.0, 0.0, 1.0])
    np.testing.assert_allclose(kernel_eval(k, d), [0.0, 3.0, 3.0 * np.exp(-1.5)])


def test_invalid_kernel_params():
    with pytest.raises(ConfigError):
        KernelSpec("normal", {"sd": -1})
    with pytest.raises(ConfigError):
        KernelSpec("weibull")


def test_equicorrelated_predictors(rng):
    X = gen_predictors(3, 0.5, 200000, rng)
    C = np.corrcoef(X.T)
    np.testing.assert_allclose(C, equicorrelation(3, 0.5), atol=0.01)
    np.testing.assert_allclose(X.std(axis=0), 1.0, atol=0.01)
    with pytest.raises(ConfigError):
        gen_predictors(3, -0.9, 10, rng)


@pytest.mark.parametrize("timing", ["fixed", "random"])
def test_event_intervals(timing):
    cfg = SynthConfig(timing=timing, n_events=20000, interval=0.2)
    ev, tau = gen_events(cfg, np.random.default_rng(0))
    gaps = np.diff(ev.time)
    assert gaps.mean() == pytest.approx(0.2, rel=0.03)
    if timing == "fixed":
        np.testing.assert_allclose(gaps, 0.2)
    np.testing.assert_array_equal(tau, ev.time)


def test_async_responses_are_off_grid():
    cfg = SynthConfig(timing="async", n_events=500, n_responses=200)
    ev, tau = gen_events(cfg, np.random.default_rng(0))
    assert tau.size == 200 and np.all(np.diff(tau) >= 0)
    assert not np.isin(tau, ev.time).any()


def test_convolution_matches_brute_force(rng):
    n = 60
    ev = EventStream(["0"] * n, np.sort(rng.uniform(0, 10, n)), rng.normal(size=(n, 2)), ["a", "b"])
    kernels = [KernelSpec("exponential"), KernelSpec("shifted_gamma")]
    tau = rng.uniform(0, 11, 25)
    got = convolve(ev, kernels, tau, chunk=7)
    for m, tm in enumerate(tau):
        for k, kern in enumerate(kernels):
            ref = sum(ev.X[i, k] * float(kernel_eval(kern, tm - ev.time[i]))
                      for i in range(n) if ev.time[i] <= tm)
            assert got[m, k] == pytest.approx(ref, abs=1e-12)


def test_noise_free_response_is_exact_convolution():
    cfg = SynthConfig(n_events=300, noise_sd=0.0, seed=4)
    ev, rs, truth = generate(cfg)
    np.testing.assert_allclose(rs.y, convolve(ev, cfg.kernels, rs.time).sum(axis=1))
    assert truth["predictors"] == ["x1", "x2", "x3"]


def test_heteroscedastic_noise_tracks_predictor():
    cfg = SynthConfig(n_events=4000, noise_sd=0.5, sigma_predictor=0, sigma_strength=1.0, seed=2)
    ev, rs, _ = generate(cfg)
    c = convolve(ev, cfg.kernels, rs.time)
    resid = rs.y - c.sum(axis=1)
    hi, lo = c[:, 0] > 0.5, c[:, 0] < -0.5
    assert resid[hi].std() > 2 * resid[lo].std()


def test_generate_is_seeded():
    a = generate(SynthConfig(n_events=100, seed=9))
    b = generate(SynthConfig(n_events=100, seed=9))
    np.testing.assert_array_equal(a[1].y, b[1].y)
