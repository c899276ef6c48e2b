import json

import pytest

from ngat.cli import main

CONFIG = """embedding_dim=8
num_layers=2
max_neighbors_per_hop=6,6
learning_rate=0.01
batch_size=256
max_epochs=4
eval_every=2
rng_seed=3
"""


@pytest.fixture
def workdir(tmp_path, capsys):
    raw = tmp_path / "raw.txt"
    assert main(["synth", "--users", "30", "--items", "30", "--p-in", "0.5", "--p-cross", "0.05",
                 "--seed", "1", "--out", str(raw)]) == 0
    assert main(["preprocess", "--input", str(raw), "--k-core", "5", "--out", str(tmp_path / "data")]) == 0
    capsys.readouterr()
    (tmp_path / "run.cfg").write_text(CONFIG)
    return tmp_path


def test_preprocess_outputs(workdir):
    data = workdir / "data"
    assert (data / "graph.ngig").read_bytes()[:4] == b"NGIG"
    lines = (data / "user_ids.txt").read_text().splitlines()
    assert lines[0].split()[0] == "0"


def test_sample_stats(workdir, capsys):
    assert main(["sample-stats", "--graph", str(workdir / "data" / "graph.ngig"), "--max-neighbors", "3,5"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert [h["hop"] for h in report["hops"]] == [1, 2]


def test_train_then_eval(workdir, capsys):
    graph = str(workdir / "data" / "graph.ngig")
    out = workdir / "run"
    assert main(["train", "--graph", graph, "--config", str(workdir / "run.cfg"), "--out", str(out)]) == 0
    history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [2, 4]
    assert "num_layers=2" in (out / "resolved_config.txt").read_text()
    capsys.readouterr()
    report_path = workdir / "report.json"
    assert main(["eval", "--checkpoint", str(out / "best.ngat"), "--graph", graph, "--cutoffs", "10,20",
                 "--report", str(report_path), "--per-user"]) == 0
    report = json.loads(report_path.read_text())
    assert set(report["recall"]) == {"10", "20"}
    assert report["per_user"]
    assert json.loads(capsys.readouterr().out) == report


def test_vanished_graph_reports_error(tmp_path, capsys):
    raw = tmp_path / "tiny.txt"
    raw.write_text("0 0\n0 1\n")
    assert main(["preprocess", "--input", str(raw), "--out", str(tmp_path / "o")]) == 2
    assert "vanished" in capsys.readouterr().err
