import json
import os
import subprocess
import sys
import time

import pytest

from vecformer.cli import main

SMALL = ["--hidden-dim", "8", "--feature-codes", "4", "--structure-codes", "4", "--n-f", "2", "--n-s", "2"]


def _snapshot(root):
    return {os.path.join(d, f) for d, _, files in os.walk(root) for f in files}


@pytest.fixture
def work(tmp_path, monkeypatch):
    # run from an empty cwd so stray relative writes are caught
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    return tmp_path


def _run(argv):
    start = time.perf_counter()
    code = main([str(a) for a in argv])
    assert time.perf_counter() - start < 60
    return code


def test_full_pipeline(work):
    data, s1, s2 = work / "data", work / "s1", work / "s2"
    assert _run(["gen", "sbm", "--blocks", "20,20", "--p-in", "0.3", "--p-out", "0.02",
                 "--feat-dim", "6", "--seed", "1", "--out", data]) == 0
    assert (data / "graph.json").exists()
    assert _run(["train-codebook", "--data", data, "--stage1-epochs", "5", *SMALL, "--out", s1]) == 0
    assert (s1 / "stage1_loss.csv").read_text().splitlines()[0] == \
        "epoch,feature_term,structure_term,graph_term,total"
    assert _run(["finetune", "--data", data, "--stage1", s1, "--stage2-epochs", "5", *SMALL,
                 "--freeze", "encoder,codebooks", "--out", s2]) == 0
    assert (s2 / "stage2.ckpt").exists() and (s2 / "stage2_metrics.csv").exists()

    ev = work / "ev"
    assert _run(["eval", "--data", data, "--checkpoint", s2, "--out", ev]) == 0
    rows = (ev / "metrics.csv").read_text().splitlines()
    assert rows[0] == "name,split,value,n_evaluated" and len(rows) == 4
    assert (ev / "attn.csv").read_text().splitlines()[0] == "node,t0,t1,t2,t3"

    dg = work / "dg"
    assert _run(["diagnose", "--data", data, "--checkpoint", s2 / "stage2.ckpt", "--positive-qk", "--out", dg]) == 0
    diag = json.loads((dg / "diagnostics.json").read_text())
    assert diag["positive_qk"]["constrained_positive"] is True

    ab = work / "ab"
    assert _run(["ablate", "--data", data, "--sizes", "1,4", "--stage1-epochs", "2", "--stage2-epochs", "2",
                 *SMALL, "--out", ab]) == 0
    assert (ab / "ablation_tokens.csv").exists() and (ab / "ablation_medians.csv").exists()

    assert _snapshot(work / "cwd") == set()


def test_baseline_and_grid(work):
    data = work / "data"
    assert _run(["gen", "spurious", "--blocks", "20,20,20", "--p-in", "0.2", "--p-out", "0.02",
                 "--out", data]) == 0
    base = work / "base"
    assert _run(["finetune", "--data", data, "--baseline", "--stage2-epochs", "3", *SMALL, "--out", base]) == 0
    dg = work / "dg"
    assert _run(["diagnose", "--data", data, "--checkpoint", base, "--out", dg]) == 0
    diag = json.loads((dg / "diagnostics.json").read_text())
    assert diag["mechanism"] == "dense_node" and "ood_test" in diag

    space = work / "space.json"
    space.write_text(json.dumps({"lr": [0.001, 0.01]}))
    grid = work / "grid"
    assert _run(["finetune", "--data", data, "--grid", space, "--budget", "2", "--stage1-epochs", "2",
                 "--stage2-epochs", "2", *SMALL, "--out", grid]) == 0
    assert len((grid / "leaderboard.csv").read_text().splitlines()) == 3
    assert json.loads((grid / "best_config.json").read_text())["lr"] in (0.001, 0.01)


def test_knn_eval_reports_des(work):
    data, s1, s2, ev = (work / k for k in ("data", "s1", "s2", "ev"))
    assert _run(["gen", "knn", "--nodes", "40", "--samples", "30", "--k", "4", "--feat-dim", "6",
                 "--out", data]) == 0
    assert _run(["train-codebook", "--data", data, "--stage1-epochs", "2", *SMALL, "--out", s1]) == 0
    assert _run(["finetune", "--data", data, "--stage1", s1, "--stage2-epochs", "2", *SMALL, "--out", s2]) == 0
    assert _run(["eval", "--data", data, "--checkpoint", s2, "--out", ev]) == 0
    assert any(r.startswith("des,all,") for r in (ev / "metrics.csv").read_text().splitlines())


def test_bench(work):
    out = work / "bench"
    assert _run(["bench", "--n", "60,120", "--trials", "1", "--token-list-size", "4", *SMALL, "--out", out]) == 0
    assert len((out / "scaling.csv").read_text().splitlines()) == 5


def test_usage_errors_exit_two(work, capsys):
    assert main(["train-codebook", "--out", str(work / "x")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["bench", "--n", "a,b", "--out", str(work / "x")]) == 2


def test_runtime_errors_exit_one(work, capsys):
    assert main(["train-codebook", "--data", str(work / "missing"), "--out", str(work / "o")]) == 1
    assert capsys.readouterr().err.startswith("error: FormatError")
    cfg = work / "bad.json"
    cfg.write_text(json.dumps({"nope": 1}))
    assert main(["bench", "--n", "50", "--config", str(cfg), "--out", str(work / "o")]) == 1
    assert "nope" in capsys.readouterr().err
    assert main(["bench", "--n", "50", "--mechanisms", "linear", "--out", str(work / "o")]) == 1
    assert main(["finetune", "--data", str(work / "missing"), "--out", str(work / "o")]) == 1


def test_module_entry_point(work):
    proc = subprocess.run([sys.executable, "-m", "vecformer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-codebook" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "vecformer", "eval", "--out", str(work / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
