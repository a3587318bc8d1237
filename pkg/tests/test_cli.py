import json
import time
from pathlib import Path

import numpy as np
import pytest

from subsel.cli import main
from subsel.selector import SelectionTable

FIXTURES = Path(__file__).parent / "fixtures"
EDGES = str(FIXTURES / "two_block.edges")
FEATURES = str(FIXTURES / "two_block.features")

SMALL = """
K = 2
D = 8
hidden_dim = 8
search_predictor_width = 8
batch_size = 32
max_epochs = 4
patience = 4
finetune_epochs = 4
predictor_width = 8
"""


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def graph_args():
    return ["--edges", EDGES, "--features", FEATURES, "--fractions", "0.7,0.15,0.15"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, cfg):
    root = tmp_path_factory.mktemp("pipe")
    run("split", "--config", cfg, "--seed", 1, "--out", root / "split", *graph_args())
    run("search", "--config", cfg, "--seed", 1, "--split", root / "split", "--out", root / "search")
    run("apply", "--config", cfg, "--seed", 1, "--search", root / "search", "--out", root / "apply")
    run("eval", "--run", root / "apply", "--out", root / "eval")
    return root


def manifest(d: Path) -> dict:
    return json.loads((d / "manifest.json").read_text())


def test_pipeline_outputs(pipeline):
    search = pipeline / "search"
    for name in ("search.ckpt", "search_final.ckpt", "history.jsonl", "timing.jsonl", "selection.tsv"):
        assert (search / name).is_file()
    history = [json.loads(line) for line in (search / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == list(range(len(history)))
    assert all("elapsed_seconds" not in h for h in history)
    assert {"valid", "test"} <= json.loads((pipeline / "apply" / "metrics.json").read_text()).keys()


def test_manifest_fingerprints_agree(pipeline):
    dirs = [pipeline / "split", pipeline / "search", pipeline / "search" / "split", pipeline / "apply"]
    prints = {manifest(d)["dataset"]["fingerprint"] for d in dirs}
    assert len(prints) == 1
    m = manifest(pipeline / "apply")
    assert m["seeds"]["apply"] == 1 and m["version"]
    assert manifest(pipeline / "search")["config"]["train"]["K"] == 2


def test_split_reused_by_search(pipeline):
    for name in ("train_pos.tsv", "valid_pos.tsv", "valid_neg.tsv", "test_pos.tsv", "test_neg.tsv"):
        assert (pipeline / "split" / name).read_bytes() == (pipeline / "search" / "split" / name).read_bytes()


def test_eval_matches_training_metrics(pipeline):
    trained = json.loads((pipeline / "apply" / "metrics.json").read_text())
    again = json.loads((pipeline / "eval" / "eval_metrics.json").read_text())
    for name in ("valid", "test"):
        assert abs(trained[name]["auc"] - again[name]["auc"]) <= 1e-9
        assert abs(trained[name]["ap"] - again[name]["ap"]) <= 1e-9


def test_rerun_is_byte_identical(pipeline, cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("SUBSEL_THREADS", "1")
    run("search", "--config", cfg, "--seed", 1, "--split", pipeline / "split", "--out", tmp_path / "search")
    run("apply", "--config", cfg, "--seed", 1, "--search", tmp_path / "search", "--out", tmp_path / "apply")
    for rel in ("search/history.jsonl", "search/selection.tsv", "apply/history.jsonl", "apply/metrics.json"):
        assert (tmp_path / rel).read_bytes() == (pipeline / rel).read_bytes(), rel


def test_report_counts_sum_to_table(pipeline, capsys, tmp_path):
    table_path = pipeline / "search" / "selection.tsv"
    run("report", "--table", table_path, "--out", tmp_path)
    out = capsys.readouterr().out
    table = SelectionTable.load(table_path)
    assert f"total={len(table)} edges={len(table)}" in out
    rows = [line.split("\t") for line in (tmp_path / "distribution.tsv").read_text().splitlines()]
    counts = np.array([[int(x) for x in row[1:]] for row in rows[1:]])
    assert counts.shape == (2, 2) and counts.sum() == len(table)


@pytest.mark.parametrize("mode, extra", [("fixed-k", ["--k", "1"]), ("random", [])])
def test_baselines_and_eval(mode, extra, cfg, tmp_path):
    run("baseline", "--mode", mode, *extra, "--config", cfg, "--out", tmp_path / "b", *graph_args())
    run("eval", "--run", tmp_path / "b", "--out", tmp_path / "e")
    trained = json.loads((tmp_path / "b" / "metrics.json").read_text())
    again = json.loads((tmp_path / "e" / "eval_metrics.json").read_text())
    assert abs(trained["test"]["auc"] - again["test"]["auc"]) <= 1e-9
    assert (tmp_path / "b" / "selection.tsv").exists() == (mode == "random")


def test_joint_search(cfg, tmp_path):
    run("search", "--joint", "--config", cfg, "--out", tmp_path, *graph_args())
    assert manifest(tmp_path)["command"] == "search-joint"


def test_scratch_apply(pipeline, cfg, tmp_path):
    run("apply", "--config", cfg, "--search", pipeline / "search", "--init-mode", "scratch", "--out", tmp_path)
    assert manifest(tmp_path)["config"]["apply"]["init_mode"] == "scratch"


def test_gradcheck_passes_quickly(capsys):
    t0 = time.perf_counter()
    run("gradcheck")
    elapsed = time.perf_counter() - t0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("max_rel_err=") and float(last.split("=")[1]) < 1e-4
    assert elapsed < 10


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "missing.cfg"
    code = main(["search", "--config", str(missing), "--out", str(tmp_path / "o"), *graph_args()])
    assert code != 0
    assert "missing.cfg" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 0.1\n")
    assert main(["split", "--config", str(bad), "--out", str(tmp_path / "o"), *graph_args()]) != 0
    assert "learning_rate" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["apply", "--out", "x"],
    ["report"],
    ["search", "--out", "x"],
    ["eval", "--run", "nowhere", "--out", "x"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("SUBSEL_THREADS", "many")
    with pytest.raises(SystemExit):
        main(["gradcheck"])
