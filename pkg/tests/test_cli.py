import json

import numpy as np
import pytest

from cdrnn.cli import main


BASE = """
[data]
events = out/events.csv
responses = out/responses.csv
output = out

[synth]
n_events = 500
seed = 3

[model]
n_units = 6
history_length = 8
batch_size = 128

[train]
seed = 1
max_epochs = 3

[ensemble]
size = 2
root_seed = 5

[test]
n_iter = 300
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.ini").write_text(BASE)
    assert main(["synth", "-c", str(tmp_path / "run.ini")]) == 0
    return tmp_path


def test_end_to_end_pipeline(workdir, capsys):
    cfg = str(workdir / "run.ini")
    out = workdir / "out"
    assert main(["fit", "-c", cfg]) == 0
    log1 = (out / "train_log.jsonl").read_bytes()
    assert main(["fit", "-c", cfg]) == 0
    assert (out / "train_log.jsonl").read_bytes() == log1
    man = json.loads((out / "manifest.json").read_text())
    assert man["seeds"]["train"] == 1 and len(man["config_sha256"]) == 64

    assert main(["irf", "-c", cfg, "--model", str(out / "model.npz")]) == 0
    lines = (out / "irf_curve_x1.csv").read_text().strip().splitlines()
    assert len(lines) == 102 and lines[0].startswith("delay,")

    assert main(["eval", "-c", cfg, "--model", str(out / "model.npz"), "--partition", "test"]) == 0
    summary = json.loads((out / "eval_test.json").read_text())
    assert summary["n"] == 125

    assert main(["ensemble-fit", "-c", cfg, "--out", str(out / "ens")]) == 0
    capsys.readouterr()
    assert main(["test", "-c", cfg, "--a", str(out / "ens"), "--b", str(out / "ens")]) == 0
    report = json.loads((out / "test_report.json").read_text())
    assert report["p"] == 1.0 and report["observed"] == 0.0 and report["n_iter"] == 300
    assert report["manifest_sha256_a"] == report["manifest_sha256_b"]


def test_malformed_csv_exit_code(workdir, capsys):
    ev = workdir / "out" / "events.csv"
    rows = ev.read_text().splitlines()
    rows[5] = rows[5].rsplit(",", 1)[0] + ",abc"
    ev.write_text("\n".join(rows) + "\n")
    assert main(["fit", "-c", str(workdir / "run.ini")]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "DataError" and "events.csv:6: column 'x3'" in err["message"]


def test_spec_violation_exit_code(workdir, capsys):
    cfg = workdir / "run.ini"
    cfg.write_text(BASE + "\n[block.one]\nconvolved = rate, x1\n\n[block.two]\nconvolved = x1\n")
    assert main(["fit", "-c", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert "both convolve 'x1' for 'mu'" in err["message"]


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["fit", "-c", str(tmp_path / "nope.ini")]) == 2


def test_numerical_error_exit_code(workdir, capsys):
    cfg = workdir / "run.ini"
    cfg.write_text(BASE.replace("n_units = 6", "n_units = 6\nlearning_rate = 1e300"))
    assert main(["fit", "-c", str(cfg)]) == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "TrainingError"
