"""CLI contract: exit codes, help text, atomic outputs, byte determinism,
and a tiny end-to-end synth + train + loso smoke run."""

import dataclasses
import json
import os

import numpy as np
import pytest

from eeggate.cli import run
from eeggate.config import RunConfig

TINY = [
    "--n-subjects", "2", "--trials-per-class", "4",
    "--epochs", "1", "--batch-size", "8",
]


@pytest.fixture()
def tiny_data(tmp_path):
    path = tmp_path / "trials.bin"
    assert run(["synth", *TINY, "--out", str(path)]) == 0
    return path


def test_unknown_flag_exits_1_writes_nothing(tmp_path):
    out = tmp_path / "x.bin"
    code = run(["synth", "--bogus-flag", "1", "--out", str(out)])
    assert code == 1
    assert list(tmp_path.iterdir()) == []


def test_unknown_subcommand_exits_1():
    assert run(["frobnicate"]) == 1


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        run(["synth", "--help"])
    text = capsys.readouterr().out
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        assert flag in text, flag
        assert f"default {f.default}" in text, f.name


def test_synth_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run(["synth", *TINY, "--out", str(a)]) == 0
    assert run(["synth", *TINY, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_subjects": 2, "trials_per_class": 4}))
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    assert run(["synth", "--config", str(cfg), "--out", str(a)]) == 0
    # flag overrides the file: different trial count changes the payload
    assert run(["synth", "--config", str(cfg), "--trials-per-class", "3", "--out", str(b)]) == 0
    assert a.stat().st_size != b.stat().st_size


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "x.bin")]) == 2
    assert not (tmp_path / "x.bin").exists()


def test_filter_csv(tmp_path):
    out = tmp_path / "resp.csv"
    sections = tmp_path / "sections.csv"
    assert run(["filter", "--out", str(out), "--sections-out", str(sections)]) == 0
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "freq_hz,gain_db"
    assert len(rows) == 513
    assert len(sections.read_text().strip().splitlines()) == 5  # header + 4 biquads


def test_train_eval_roundtrip(tmp_path, tiny_data):
    model = tmp_path / "model.bin"
    code = run([
        "train", *TINY, "--data", str(tiny_data), "--no-gate",
        "--holdout-subject", "1", "--out", str(model),
    ])
    assert code == 0 and model.exists()
    assert run(["eval", *TINY, "--data", str(tiny_data), "--model", str(model), "--subject", "1"]) == 0


def test_train_deterministic_model_bytes(tmp_path, tiny_data):
    outs = []
    for name in ("m1.bin", "m2.bin"):
        p = tmp_path / name
        assert run(["train", *TINY, "--data", str(tiny_data), "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_eval_truncated_model_exits_2(tmp_path, tiny_data):
    model = tmp_path / "model.bin"
    assert run(["train", *TINY, "--data", str(tiny_data), "--no-gate", "--out", str(model)]) == 0
    raw = model.read_bytes()
    model.write_bytes(raw[: len(raw) // 2])
    assert run(["eval", *TINY, "--data", str(tiny_data), "--model", str(model)]) == 2


def test_eval_missing_data_exits_2(tmp_path):
    assert run(["eval", "--data", str(tmp_path / "nope.bin"), "--model", str(tmp_path / "m.bin")]) == 2


def test_loso_report(tmp_path, tiny_data):
    report = tmp_path / "report.txt"
    assert run(["loso", *TINY, "--data", str(tiny_data), "--report", str(report)]) == 0
    text = report.read_text()
    assert "w/o" in text and "w/" in text and "Diff." in text
    assert "avg" in text and "std" in text
    # one accuracy column per subject
    header = [ln for ln in text.splitlines() if ln.startswith("subject")][0]
    assert len(header.split()) == 1 + 2


def test_loso_report_deterministic(tmp_path, tiny_data):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run(["loso", *TINY, "--data", str(tiny_data), "--report", str(a)]) == 0
    assert run(["loso", *TINY, "--data", str(tiny_data), "--report", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gate_trace_outputs(tmp_path, tiny_data):
    model = tmp_path / "model.bin"
    assert run(["train", *TINY, "--data", str(tiny_data), "--out", str(model)]) == 0
    prefix = tmp_path / "trace"
    assert run([
        "gate", *TINY, "--data", str(tiny_data), "--model", str(model),
        "--trial", "0", "--out", str(prefix),
    ]) == 0
    csv = (tmp_path / "trace.csv").read_text().splitlines()
    assert csv[0].startswith("sample_index,gate_value")
    vals = np.array([float(ln.split(",")[1]) for ln in csv[1:]])
    assert ((vals >= 0.0) & (vals <= 1.0)).all()
    svg = (tmp_path / "trace.svg").read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")


def test_gate_trial_out_of_range_exits_2(tmp_path, tiny_data):
    model = tmp_path / "model.bin"
    assert run(["train", *TINY, "--data", str(tiny_data), "--out", str(model)]) == 0
    assert run([
        "gate", *TINY, "--data", str(tiny_data), "--model", str(model),
        "--trial", "99999", "--out", str(tmp_path / "t"),
    ]) == 2
    assert not (tmp_path / "t.csv").exists()


def test_tsne_csv(tmp_path, tiny_data):
    model = tmp_path / "model.bin"
    assert run(["train", *TINY, "--data", str(tiny_data), "--out", str(model)]) == 0
    out = tmp_path / "points.csv"
    assert run([
        "tsne", *TINY, "--data", str(tiny_data), "--model", str(model),
        "--perplexity", "5", "--tsne-iters", "50", "--out", str(out),
    ]) == 0
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "x,y,label"
    assert len(rows) == 1 + 32  # 2 subjects x 4 classes x 4 trials


def test_no_stray_temp_files_after_errors(tmp_path, tiny_data):
    # every failing command above must leave no *.tmp leftovers
    run(["synth", "--erd-depth", "2.0", "--out", str(tmp_path / "bad.bin")])
    leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
    assert leftovers == []
    assert not (tmp_path / "bad.bin").exists()
