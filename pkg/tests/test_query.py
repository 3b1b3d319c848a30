import warnings

import numpy as np
import pytest

from cdrnn.exceptions import ConfigError
from cdrnn.model import FittedModel, Hyperparameters, IrfBlockSpec, ModelSpec, Standardization
from cdrnn.query import (effect_query, interaction_surface, irf_curve, irf_surface,
                         nonstationarity_slice, reference_config, uncertainty_band, point_draw,
                         effect_deltas)

from helpers import perturbed_params

NAMES = ("a", "b")


def make_model(rng, blocks=(IrfBlockSpec(),), n_layers=2, dropout=0.2, inference="mle"):
    spec = ModelSpec(NAMES, irf_blocks=blocks, history_length=8,
                     hyper=Hyperparameters(n_layers=n_layers, n_units=6, dropout=dropout,
                                           inference=inference))
    std = Standardization(np.array([1.5, 0.7]), np.array([0.2, -0.1]), 2.0, 0.3, 10.0, 20.0, 1.2,
                          100, np.array([-4.0, -3.0]), np.array([4.0, 3.0]), 0.0, 40.0, 3.0)
    return FittedModel(spec, perturbed_params(spec, rng, scale=0.5), std)


def test_curve_has_default_grid(rng):
    res = irf_curve(make_model(rng), "a")
    assert res.median.shape == (101,)
    assert len(res.rows()) == 101
    np.testing.assert_allclose(res.axes["delay"], np.linspace(0, 3.0, 101))


def test_linear_irf_matches_hand_computation(rng):
    m = make_model(rng, n_layers=0)
    p, std, spec = m.params, m.standardization, m.spec
    W, b = p["irf0/W0"], p["irf0/b0"]
    coef, s0 = p["coef"], p["s0"]
    r = spec.rescale

    def mu(x, t, d):
        inp = np.array([d / std.offset_sd, t / std.time_sd, x[0] / std.predictor_sd[0],
                        x[1] / std.predictor_sd[1]])
        G = (W @ inp + b).reshape(2, 3)  # (targets, columns)
        xc = np.array([1.0, x[0] / std.predictor_sd[0], x[1] / std.predictor_sd[1]])
        return (s0[0] + r * np.sum(G[0] * coef * xc)) * std.response_sd

    ref = reference_config(m, delays=np.array([0.0, 0.5, 2.0]))
    alt = ref.x.copy()
    alt[1] += 0.7
    got = irf_curve(m, "b", ref=ref).median
    want = [mu(alt, ref.t, d) - mu(ref.x, ref.t, d) for d in ref.delays]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_linearity_constraint(rng):
    # "a" is convolved but not an input of its own IRF: effect is linear in its value
    m = make_model(rng, blocks=(IrfBlockSpec(convolved=("rate", "a"), conditioning=()),
                                IrfBlockSpec(convolved=("b",), conditioning=("b",))))
    ref = reference_config(m)
    vals = np.array([-2.0, -1.0, 0.5, 1.0, 2.0])
    eff = np.array([effect_query(m, ref, np.array([ref.x[0] + v, ref.x[1]]), delay=0.4) for v in vals])
    slopes = eff / vals
    assert np.ptp(slopes) <= 1e-8


def test_dirac_block_ignores_delay(rng):
    m = make_model(rng, blocks=(IrfBlockSpec(convolved=("rate", "b"), conditioning=("b",)),
                                IrfBlockSpec(convolved=("a",), include_offset=False, dirac_delta=True)))
    res = irf_curve(m, "a")
    assert np.ptp(res.median) <= 1e-12


def test_stationarity_constraint_flat_slice(rng):
    m = make_model(rng, blocks=(IrfBlockSpec(include_timestamp=False),))
    res = nonstationarity_slice(m, "a", np.linspace(0, 40, 9), delay=0.3)
    assert np.ptp(res.median) <= 1e-8
    free = nonstationarity_slice(make_model(rng), "a", np.linspace(0, 40, 9), delay=0.3)
    assert np.ptp(free.median) > 1e-6


def test_surfaces_have_expected_shapes(rng):
    m = make_model(rng)
    s = irf_surface(m, 0, np.linspace(-1, 1, 4), ref=reference_config(m, n_delays=7))
    assert s.median.shape == (4, 7) and len(s.rows()) == 28
    i = interaction_surface(m, "a", "b", np.linspace(-1, 1, 3), np.linspace(-1, 1, 5), delay=0.2)
    assert i.median.shape == (3, 5)


def test_uncertainty_band_ordering_and_determinism(rng):
    m = make_model(rng, inference="variational")
    a = irf_curve(m, "a", n_samples=50, rng=3)
    b = irf_curve(m, "a", n_samples=50, rng=3)
    np.testing.assert_array_equal(a.median, b.median)
    assert np.all(a.lower <= a.median) and np.all(a.median <= a.upper)
    assert np.any(a.upper > a.lower)
    with pytest.raises(ConfigError):
        irf_curve(m, "a", n_samples=1)


def test_ensemble_point_estimate_is_median_of_components(rng):
    ms = [make_model(rng) for _ in range(3)]
    got = irf_curve(ms, "a").median
    each = np.stack([irf_curve(mm, "a").median for mm in ms])
    np.testing.assert_allclose(got, np.median(each, axis=0))


def test_sigma_statistic_and_errors(rng):
    m = make_model(rng)
    assert irf_curve(m, "a", statistic="sigma").statistic == "sigma"
    with pytest.raises(ConfigError):
        irf_curve(m, "a", statistic="nu")
    with pytest.raises(ConfigError):
        irf_curve(m, "zz")


def test_out_of_range_query_warns(rng):
    m = make_model(rng)
    with pytest.warns(UserWarning):
        res = irf_surface(m, "a", np.array([0.0, 50.0]))
    assert res.out_of_range
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not irf_curve(m, "a").out_of_range


def test_reference_delays_must_increase():
    with pytest.raises(ConfigError):
        reference_config(Standardization(np.ones(1), np.zeros(1), 1, 0, 1, 0, 1, 1),
                         delays=np.array([0.0, 0.0]))


def test_json_export_roundtrip(rng, tmp_path):
    res = irf_curve(make_model(rng), "a", ref=None)
    d = res.to_dict()
    assert set(d) >= {"axes", "median", "lower", "upper", "statistic"}
    res.to_csv(tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().strip().splitlines()) == 102
