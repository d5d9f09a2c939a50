import json

import numpy as np
import pytest
import yaml

from gfkd.cli import ConfigError, load_config, main
from gfkd.data import write_tu_dataset

from conftest import ring


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
    graphs = [ring(3 + k % 4, label=k % 2, seed=k) for k in range(20)]
    for g in graphs:
        g.node_labels = np.arange(g.node_count) % 3
    write_tu_dataset(graphs, tmp_path / "data" / "TOY", "TOY")
    monkeypatch.setenv("GFKD_DATA_ROOT", str(tmp_path / "data"))
    cfg = {
        "output_dir": str(tmp_path / "out"),
        "dataset": {"path": "TOY"},
        "teacher": {"arch": "GCN-2-8", "epochs": 5},
        "generation": {"iterations": 6, "lr_decay_period": 3, "graphs_per_batch": 4, "lambda_bn": 0.1},
        "distill": {"student_arch": "GIN-2-4", "epochs": 4, "seeds": [0, 1]},
        "verify": {"n_draws": 10_000, "instances": 2},
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return tmp_path, str(path)


def test_config_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("teacher:\n  epochs: 7\n  lr: 0.5\n")
    cfg = load_config(p, ["teacher.lr=0.25", "generation.lambda_bn=0"])
    assert cfg["teacher"]["epochs"] == 7
    assert cfg["teacher"]["lr"] == 0.25
    assert cfg["generation"]["lambda_bn"] == 0
    assert cfg["teacher"]["arch"] == "GCN-5-64"


def test_bad_config():
    with pytest.raises(ConfigError):
        load_config(None, ["teacher.arch=GCN-five"])
    with pytest.raises(ConfigError):
        load_config(None, ["noequals"])


def test_pipeline_end_to_end(run_dir, capsys):
    tmp, cfg = run_dir
    out = tmp / "out"
    assert main(["train-teacher", "--config", cfg]) == 0
    assert (out / "teacher" / "model.ckpt").exists()
    meta = json.loads((out / "teacher" / "meta.json").read_text())
    assert meta["train_size"] == 14
    assert main(["generate", "--config", cfg, "--set", "generation.ratio=0.5"]) == 0
    lines = (out / "fake" / "graphs.jsonl").read_text().splitlines()
    assert len(lines) == 7
    assert "sampled_label" in json.loads(lines[0])
    assert (out / "fake" / "generation_log.csv").read_text().startswith("batch,iteration,objective")
    assert main(["distill", "--config", cfg]) == 0
    res = json.loads((out / "student" / "results.json").read_text())
    assert len(res["accuracies"]) == 2
    assert (out / "student" / "metrics_seed1.csv").exists()
    for sub in ("teacher", "fake", "student"):
        assert (out / sub / "config.frozen").exists()
    assert main(["eval", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg, "--checkpoint", str(out / "student" / "student_seed0.ckpt")]) == 0


def test_generate_is_reproducible(run_dir):
    tmp, cfg = run_dir
    out = tmp / "out"
    main(["train-teacher", "--config", cfg])
    blobs = []
    for method in ("gfkd", "deepinvg", "randg"):
        for _ in range(2):
            main(["generate", "--config", cfg, "--set", f"generation.method={method}"])
            blobs.append((out / "fake" / "graphs.jsonl").read_bytes())
        assert blobs[-1] == blobs[-2]


def test_missing_teacher_is_clean_error(run_dir, capsys):
    _, cfg = run_dir
    assert main(["generate", "--config", cfg]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("gfkd generate: error:") and "\n" not in err


def test_missing_dataset(tmp_path, capsys):
    assert main(["train-teacher", "--set", "dataset.path=/nope/none", "--set", f"output_dir={tmp_path}"]) == 2
    assert "dataset directory not found" in capsys.readouterr().err


def test_verify_exit_codes(run_dir):
    tmp, cfg = run_dir
    assert main(["verify", "--config", cfg]) == 0
    rep = json.loads((tmp / "out" / "verify" / "report.json").read_text())
    assert rep["passed"] is True
    assert main(["verify", "--config", cfg, "--set", "verify.inject_fault=true"]) == 1
