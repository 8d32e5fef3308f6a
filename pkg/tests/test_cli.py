import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from srlift.cli import main
from srlift.data import load_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "poses.tsv"
    assert main(["synth-data", "--seed", "3", "--out", str(data), "--n-subjects", "3", "--frames", "30",
                 "--cameras", "2"]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--model", "sr", "--groups", "5", "--H", "1",
                 "--recombine", "mult", "--protocol", "subject", "--seed", "1", "--out", str(run),
                 "--width", "32", "--epochs", "2", "--batch-size", "128"]) == 0
    return root, data, run


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_param_count_prints_exact_value(capsys):
    code, out, _ = run_cli(capsys, "param-count", "--model", "fc", "--joints", "17", "--width", "1024",
                           "--layers", "8")
    assert code == 0 and out.strip() == "6400051"


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "srlift.cli", "param-count", "--model", "sr"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "1390755"


def test_usage_errors_exit_2(capsys):
    assert run_cli(capsys, "train", "--bogus")[0] == 2
    assert run_cli(capsys, "frobnicate")[0] == 2
    code, _, err = run_cli(capsys, "synth-data", "--out", "x.tsv")
    assert code == 2 and "--seed" in err


def test_invalid_config_exits_1(capsys):
    code, _, err = run_cli(capsys, "param-count", "--model", "lf", "--l-fuse", "12")
    assert code == 1 and "l_fuse" in err


def test_synth_data_and_manifest(workspace):
    root, data, _ = workspace
    assert len(load_dataset(data)) == 3 * 4 * 2 * 30
    manifest = json.loads((root / "poses.tsv.manifest.json").read_text())
    assert manifest["command"] == "synth-data" and manifest["seeds"] == {"seed": 3}
    assert manifest["outputs"] == [str(data)] and manifest["started"] <= manifest["finished"]


def test_train_outputs(workspace):
    _, _, run = workspace
    assert {p.name for p in run.iterdir()} >= {"model.ckpt", "train_log.csv", "manifest.json"}
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["model"] == "sr" and manifest["seeds"]["seed"] == 1


def test_eval_writes_report(workspace, capsys):
    root, data, run = workspace
    code, out, _ = run_cli(capsys, "eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data),
                           "--protocol", "subject", "--flip-test", "--deciles", "--out", str(root / "ev"))
    assert code == 0 and "mpjpe" in out
    rows = list(csv.reader((root / "ev" / "report.csv").open()))
    assert rows[0] == ["metric", "slice", "value", "count"]
    assert any(r[1] == "decile=0" for r in rows[1:])
    assert (root / "ev" / "report.txt").exists() and (root / "ev" / "manifest.json").exists()


def test_eval_normalization_mismatch_exits_1(workspace, capsys):
    root, data, run = workspace
    code, _, err = run_cli(capsys, "eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data),
                           "--normalization", "pixel", "--out", str(root / "ev2"))
    assert code == 1 and "mismatch" in err


def test_rank_rare(workspace, capsys):
    root, data, _ = workspace
    m = len(load_dataset(data))
    assert run_cli(capsys, "rank-rare", "--data", str(data), "--R", "100", "--out", str(root / "r100"))[0] == 0
    rows = list(csv.reader((root / "r100" / "rare.csv").open()))
    assert rows[0] == ["index", "occurrence"] and len(rows) - 1 == m
    assert run_cli(capsys, "rank-rare", "--data", str(data), "--R", "10", "--out", str(root / "r10"))[0] == 0
    assert len(list(csv.reader((root / "r10" / "rare.csv").open()))) - 1 == int(np.ceil(0.1 * m))


def test_report_merges_without_dedup(workspace, capsys):
    root, data, run = workspace
    for name in ("a", "b"):
        main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data), "--out", str(root / name)])
    capsys.readouterr()
    out_csv = root / "merged.csv"
    assert main(["report", "--runs", str(root / "a"), str(root / "b"), "--out", str(out_csv)]) == 0
    merged = list(csv.reader(out_csv.open()))
    n_a = len((root / "a" / "report.csv").read_text().splitlines()) - 1
    assert merged[0] == ["run", "metric", "slice", "value", "count"]
    assert len(merged) - 1 == 2 * n_a


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "model.cfg"
    cfg.write_text("# dense baseline\nmodel = fc\nwidth = 1024\nlayers = 8\njoints = 17\n")
    code, out, _ = run_cli(capsys, "param-count", "--config", str(cfg))
    assert code == 0 and out.strip() == "6400051"
    code, out, _ = run_cli(capsys, "param-count", "--config", str(cfg), "--model", "sr")
    assert out.strip() == "1390755"
    cfg.write_text("colour = blue\n")
    code, _, err = run_cli(capsys, "param-count", "--config", str(cfg))
    assert code == 1 and "unknown key" in err
    cfg.write_text("model = cnn\n")
    assert run_cli(capsys, "param-count", "--config", str(cfg))[0] == 1


def test_replay_reproduces_artifacts(workspace, tmp_path, capsys):
    root, data, run = workspace
    assert main(["replay", "--manifest", str(run / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()
    strip = lambda p: [r[:3] for r in csv.reader(p.open())]
    assert strip(tmp_path / "again" / "train_log.csv") == strip(run / "train_log.csv")
    assert main(["replay", "--manifest", str(root / "poses.tsv.manifest.json"),
                 "--out", str(tmp_path / "poses.tsv")]) == 0
    assert (tmp_path / "poses.tsv").read_bytes() == data.read_bytes()
