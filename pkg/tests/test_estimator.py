import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cdrnn import CDRNNRegressor
from cdrnn.exceptions import ConfigError, DataError
from cdrnn.synth import SynthConfig, generate


@pytest.fixture(scope="module")
def data():
    ev, rs, _ = generate(SynthConfig(n_events=400, seed=1))
    return ev, rs


def test_params_roundtrip_and_clone():
    est = CDRNNRegressor(n_units=8, dropout=0.1, max_epochs=3)
    p = est.get_params()
    assert p["n_units"] == 8 and p["history_length"] == 32
    c = clone(est)
    assert c.get_params() == p
    c.set_params(n_units=4)
    assert c.n_units == 4 and est.n_units == 8


def test_fit_predict_score(data):
    ev, rs = data
    est = CDRNNRegressor(n_units=8, history_length=8, batch_size=128, max_epochs=10, random_state=0)
    assert est.fit(ev, rs) is est
    mu, sigma = est.predict_dist(ev, rs)
    assert mu.shape == (len(rs),) and np.all(sigma > 0)
    np.testing.assert_array_equal(est.predict(ev, rs), mu)
    assert est.score(ev, rs) == pytest.approx(np.mean(est.loglik(ev, rs)))
    assert est.n_epochs_ == 10 and est.n_features_in_ == 3
    again = clone(est).fit(ev, rs)
    np.testing.assert_array_equal(again.predict(ev, rs), mu)


def test_accepts_column_mappings(data):
    ev, rs = data
    events = {"series_id": ev.series, "time": ev.time, **{n: ev.column(n) for n in ev.predictor_names}}
    responses = {"series_id": rs.series, "time": rs.time, "y": rs.y}
    est = CDRNNRegressor(n_units=4, history_length=4, max_epochs=2, random_state=0,
                         predictors=["x1", "x2"]).fit(events, responses)
    assert est.spec_.predictor_names == ("x1", "x2")


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        CDRNNRegressor().predict(*data)


def test_invalid_configuration(data):
    with pytest.raises(ConfigError):
        CDRNNRegressor(dropout=1.5, max_epochs=1).fit(*data)
    with pytest.raises(ConfigError):
        CDRNNRegressor(random_factors=["subject"], max_epochs=1).fit(*data)
    with pytest.raises(DataError):
        CDRNNRegressor(max_epochs=1).fit({"time": [0.0]}, data[1])
