import csv
import json
import subprocess
import sys

import pytest

from conftest import TINY
from partmatch.cli import run

TRAIN = {"epochs": 2, "batch_size": 8, "pretrain_epochs": 50}


def _config(tmp_path, **extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"synth": TINY, "train": {**TRAIN, **extra}}))
    return str(path)


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def _pipeline(root, cfg, seed=0):
    for cmd in ("synth", "pretrain", "train", "eval"):
        assert run([cmd, "--config", cfg, "--seed", str(seed), "--out", str(root)]) == 0, cmd


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    _pipeline(root / "run", cfg)
    return root / "run", cfg


def test_pipeline_outputs(trained):
    out, _ = trained
    for name in ("manifest.jsonl", "synth.json", "bank.pvtc", "checkpoint.pvtc", "metrics.csv", "eval.json",
                 "config.json"):
        assert (out / name).is_file(), name
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert list(rows[0]) == ["step", "epoch", "L_v", "L_m", "L_c", "L_total", "mean_selected", "lr"]
    r = rows[-1]
    assert float(r["L_total"]) == float(r["L_v"]) + float(r["L_m"]) + float(r["L_c"])
    ev = json.loads((out / "eval.json").read_text())
    assert ev["mode"] == "pvpm" and 0 <= ev["rank1"] <= 1 and len(ev["cmc"]) == 8
    echo = json.loads((out / "config.json").read_text())
    assert echo["command"] == "eval" and echo["eval"]["mode"] == "pvpm"


def test_config_echo_has_effective_values(tmp_path, trained):
    out, cfg = trained
    assert run(["train", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--lambda", "0.7",
                "--seed", "4"]) == 0
    echo = json.loads((tmp_path / "config.json").read_text())
    assert echo["train"]["lam"] == 0.7 and echo["train"]["seed"] == 4 and echo["train"]["epochs"] == 2


def test_same_seed_runs_byte_identical(tmp_path, trained):
    first, cfg = trained
    _pipeline(tmp_path / "again", cfg)
    names = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file())
    for name in names:
        assert (first / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


@pytest.mark.parametrize("mode", ["baseline", "pga-only", "pvp-only"])
def test_eval_modes(tmp_path, trained, mode):
    out, cfg = trained
    assert run(["eval", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--checkpoint",
                str(out / "checkpoint.pvtc"), "--mode", mode, "--per-query"]) == 0
    assert json.loads((tmp_path / "eval.json").read_text())["mode"] == mode
    assert (tmp_path / "eval_queries.csv").is_file()


def test_pseudo_label_and_match(trained, capsys):
    out, cfg = trained
    capsys.readouterr()
    args = ["--config", cfg, "--out", str(out), "--pair", "train_0000_0", "train_0000_1"]
    assert run(["pseudo-label", *args]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res) >= {"M", "lambda_bar", "v_star", "objective"}
    assert len(res["v_star"]) == 6 and all(v in (0, 1) for v in res["v_star"])
    assert run(["match", *args]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0 <= res["distance"] <= 2


def test_sweep_lambda_rows(tmp_path, trained):
    out, cfg = trained
    assert run(["sweep", "--config", cfg, "--out", str(tmp_path / "s1"), "--data", str(out), "--param", "lambda",
                "--grid", "0.6:1.0:0.1", "--workers", "1"]) == 0
    lines = (tmp_path / "s1" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "param,rank1,mAP" and len(lines) == 6
    assert run(["sweep", "--config", cfg, "--out", str(tmp_path / "s2"), "--data", str(out), "--param", "lambda",
                "--grid", "0.6:1.0:0.1", "--workers", "2"]) == 0
    assert (tmp_path / "s2" / "sweep.csv").read_bytes() == (tmp_path / "s1" / "sweep.csv").read_bytes()


def test_single_point_sweep_equals_eval(tmp_path, trained):
    out, cfg = trained
    assert run(["sweep", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--param", "lambda",
                "--grid", "0.9", "--workers", "1"]) == 0
    row = (tmp_path / "sweep.csv").read_text().splitlines()[1].split(",")
    ev = json.loads((out / "eval.json").read_text())
    assert float(row[1]) == pytest.approx(ev["rank1"], abs=1e-6)
    assert float(row[2]) == pytest.approx(ev["mAP"], abs=1e-6)


def test_thre_training_and_mode_conflicts(tmp_path, trained, capsys):
    out, cfg = trained
    assert run(["train", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--mode", "thre",
                "--tau", "0.5"]) == 0
    assert run(["eval", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--mode", "thre"]) == 0
    assert run(["eval", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--mode", "pvpm"]) == 2
    assert _error(capsys)["error"] == "usage"
    assert run(["train", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--tau", "0.5"]) == 2
    assert run(["train", "--config", cfg, "--out", str(tmp_path), "--data", str(out), "--mode", "thre"]) != 0


def test_gradcheck_command(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"gradcheck": {"trials": 2}}))
    assert run(["gradcheck", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and len(report["ops"]) == 7


def test_unknown_config_keys(tmp_path, capsys):
    for payload in ({"train": {"momentum": 0.9}}, {"model": {}}, {"synth": {"colour": 1}}):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps(payload))
        assert run(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        err = _error(capsys)
        assert err["error"] == "config" and "unknown" in err["message"]


def test_usage_errors(tmp_path, capsys):
    cases = [
        ["synth", "--out", str(tmp_path), "--lambda", "0.5"],
        ["sweep", "--out", str(tmp_path), "--param", "lambda", "--grid", "-1,0.5"],
        ["nosuch", "--out", str(tmp_path)],
        ["eval"],
        ["synth", "--out", str(tmp_path), "--workers", "0"],
    ]
    for argv in cases:
        assert run(argv) == 2, argv
        assert _error(capsys)["error"] == "usage"


def test_missing_data(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path / "empty")]) == 1
    assert _error(capsys)["error"] == "data"


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "partmatch.cli", "eval", "--out", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "data"
