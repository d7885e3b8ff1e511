import csv
import json
import subprocess
import sys

import pytest

from bundleflow.cli import main
from bundleflow.valuations import load_jsonl

TINY = """run_id: tiny
auction: {m: 4, v_max: 100, count: 200}
stage1: {iterations: 40, num_samples: 500, save_interval: 20}
menu: {K: 4, D: 2, iterations: 30, eval_interval: 10, snapshot_interval: 10, save_interval: 10}
baseline: {K: 4, iterations: 30}
"""


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("BUNDLEFLOW_OUT", str(tmp_path / "out"))
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(TINY)
    return tmp_path, str(cfg)


@pytest.fixture
def trained(env):
    tmp, cfg = env
    assert main(["train-flow", "-c", cfg]) == 0
    assert main(["train-menu", "-c", cfg]) == 0
    return tmp / "out" / "tiny", cfg


def test_gen_data_split_files(env):
    tmp, cfg = env
    assert main(["gen-data", "-c", cfg]) == 0
    run = tmp / "out" / "tiny"
    assert len(load_jsonl(run / "data" / "train.jsonl")) == 190
    assert len(load_jsonl(run / "data" / "test.jsonl")) == 10
    assert (run / "config.yaml").is_file()


def test_gen_data_from_cats(env):
    tmp, cfg = env
    d = tmp / "cats"
    d.mkdir()
    for i in range(20):
        (d / f"{i}.txt").write_text(f"goods 4\nbids 2\ndummy 1\n0 {i + 1} 0 4 #\n1 3 1 4 #\n")
    assert main(["gen-data", "-c", cfg, "--set", f"auction.cats={d}",
                 "--set", "auction.m=4"]) == 0
    train = load_jsonl(tmp / "out" / "tiny" / "data" / "train.jsonl")
    assert train.source.startswith("cats:") and len(train) == 19


def test_invalid_distribution_exits_2(env, capsys):
    _, cfg = env
    assert main(["gen-data", "-c", cfg, "--set", "auction.distribution=pareto"]) == 2
    assert "auction.distribution" in capsys.readouterr().err


def test_parse_error_exits_3(env, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("menu: {K: [\n")
    assert main(["gen-data", "-c", str(bad)]) == 3
    cats = tmp_path / "broken"
    cats.mkdir()
    (cats / "x.txt").write_text("goods 4\nbids 1\ndummy 1\n0 5 1 4\n")
    assert main(["gen-data", "-c", env[1], "--set", f"auction.cats={cats}"]) == 3


def test_missing_config_exits_4(tmp_path):
    assert main(["gen-data", "-c", str(tmp_path / "nope.yaml")]) == 4


def test_train_menu_without_flow_exits_4(env):
    assert main(["train-menu", "-c", env[1]]) == 4


def test_divergence_exits_5(env):
    assert main(["train-flow", "-c", env[1], "--set", "stage1.lr=1e300"]) == 5


def test_resume_identical(env):
    tmp, cfg = env
    assert main(["train-flow", "-c", cfg]) == 0
    full = (tmp / "out" / "tiny" / "flow" / "checkpoint.json").read_bytes()
    args = ["-c", cfg, "--set", "run_id=split"]
    assert main(["train-flow", *args, "--max-steps", "20"]) == 0
    assert main(["train-flow", *args, "--resume"]) == 0
    assert (tmp / "out" / "split" / "flow" / "checkpoint.json").read_bytes() == full

    assert main(["train-menu", "-c", cfg]) == 0
    menu_full = (tmp / "out" / "tiny" / "menu" / "checkpoint.json").read_bytes()
    assert main(["train-menu", *args, "--max-steps", "10"]) == 0
    assert main(["train-menu", *args, "--resume"]) == 0
    assert (tmp / "out" / "split" / "menu" / "checkpoint.json").read_bytes() == menu_full


def test_evaluate_twice_identical(trained):
    run, cfg = trained
    assert main(["evaluate", "-c", cfg, "--name", "a"]) == 0
    assert main(["evaluate", "-c", cfg, "--name", "b"]) == 0
    a = json.loads((run / "reports" / "a.json").read_text())
    b = json.loads((run / "reports" / "b.json").read_text())
    a.pop("wall_time_s")
    b.pop("wall_time_s")
    assert a == b and a["ir_pass_rate"] == 1.0 and a["dsic_pass_rate"] == 1.0


def test_evaluate_missing_checkpoint(env, tmp_path):
    assert main(["evaluate", "-c", env[1], str(tmp_path / "none.json")]) == 4
    junk = tmp_path / "junk.json"
    junk.write_text("{not json")
    assert main(["evaluate", "-c", env[1], str(junk)]) == 3


@pytest.mark.parametrize("which", ["grand", "big", "small", "rochetnet"])
def test_train_baseline(env, which):
    tmp, cfg = env
    assert main(["train-baseline", "-c", cfg, which]) == 0
    run = tmp / "out" / "tiny"
    assert (run / "baseline" / f"{which}.json").is_file()
    assert json.loads((run / "reports" / f"{which}.json").read_text())["ir_pass_rate"] == 1.0


def test_sweep_rows(env):
    tmp, cfg = env
    assert main(["sweep", "D", "-c", cfg, "--values", "1,2", "--seeds", "0"]) == 0
    with open(tmp / "out" / "tiny" / "sweep" / "D.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["D", "median_revenue"] and len(rows) == 3
    assert main(["sweep", "D", "-c", cfg, "--values", "a,b"]) == 2


def test_export_snapshots_count(trained):
    run, cfg = trained
    assert main(["export-snapshots", "-c", cfg, "--interval", "20"]) == 0
    snaps = sorted(p.name for p in (run / "snapshots").glob("*.json"))
    assert snaps == ["20.json", "30.json"]      # ceil(30 / 20) = 2
    assert (run / "snapshots" / "flow_grid.csv").is_file()
    assert main(["export-snapshots", "-c", cfg, "--interval", "15"]) == 2


def test_module_entry_point(env):
    out = subprocess.run([sys.executable, "-m", "bundleflow", "show-config", "-c", env[1]],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "run_id: tiny" in out.stdout
