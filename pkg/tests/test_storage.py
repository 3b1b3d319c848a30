import numpy as np
import pytest

from cdrnn.data import EventStream, ResponseTable
from cdrnn.exceptions import ConfigError, DataError
from cdrnn.model import nll_loss
from cdrnn.storage import (load_checkpoint, read_events, read_responses, save_checkpoint,
                           write_events, write_responses)
from cdrnn.trainer import TrainConfig, fit

from test_trainer import tiny_task


def test_csv_roundtrip_is_exact(tmp_path, rng):
    ev = EventStream(["s1", "s1", "s2"], [0.0, 0.1, 0.3], rng.normal(size=(3, 2)), ["a", "b"])
    rs = ResponseTable(["s1", "s2"], [0.2, 0.4], rng.normal(size=2), {"subject": ["u", "v"]})
    write_events(tmp_path / "e.csv", ev)
    write_responses(tmp_path / "r.csv", rs)
    ev2 = read_events(tmp_path / "e.csv")
    rs2 = read_responses(tmp_path / "r.csv")
    np.testing.assert_array_equal(ev2.X, ev.X)
    np.testing.assert_array_equal(ev2.time, ev.time)
    assert ev2.predictor_names == ["a", "b"]
    np.testing.assert_array_equal(rs2.y, rs.y)
    np.testing.assert_array_equal(rs2.factors["subject"], ["u", "v"])


def test_malformed_value_names_file_line_column(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("series_id,time,a\n0,0.0,1.0\n0,0.5,oops\n")
    with pytest.raises(DataError, match=r"events\.csv:3: column 'a'"):
        read_events(p)


@pytest.mark.parametrize("text, fragment", [
    ("series_id,a\n0,1\n", "missing required column"),
    ("series_id,time,a\n0,0.0\n", ":2: expected 3 fields"),
    ("series_id,time,a\n0,1.0,1\n0,0.5,1\n", ":3: column 'time'"),
    ("series_id,time,a\n0,nan,1\n", "non-finite"),
    ("", "header row required"),
])
def test_csv_errors(tmp_path, text, fragment):
    p = tmp_path / "events.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=fragment):
        read_events(p)


def test_missing_predictor_selection(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("series_id,time,a\n0,0.0,1.0\n")
    with pytest.raises(DataError):
        read_events(p, predictors=["b"])


def test_checkpoint_reload_is_bit_exact(tmp_path):
    spec, batch, std = tiny_task()
    res = fit(spec, batch, std, 3, TrainConfig(max_epochs=3))
    path = tmp_path / "m.npz"
    save_checkpoint(path, res.model, res.state, {"seed": 3})
    model, state, meta = load_checkpoint(path, with_state=True)
    assert meta == {"seed": 3}
    assert model.spec == spec
    for k, v in res.model.params.items():
        np.testing.assert_array_equal(model.params[k], v)
    for k, v in res.state["adam"].m.items():
        np.testing.assert_array_equal(state["adam"].m[k], v)
    assert state["adam"].step == res.state["adam"].step
    assert state["guard"] == res.state["guard"]
    before = nll_loss(res.model.params, spec, batch, std).loss
    for v in model.params.values():  # mutate the in-memory copy, then reload
        v += 1.0
    after = nll_loss(load_checkpoint(path).params, spec, batch, std).loss
    assert after == before


def test_bad_checkpoint_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.npz")
    np.savez(tmp_path / "x.npz", a=np.zeros(1))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.npz")
