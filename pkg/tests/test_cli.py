import json
import subprocess
import sys

import pytest

from cfwatermark import cli, extract

TINY = {
    "dataset": "blobs",
    "dataset_options": {"n": 160},
    "B": 1,
    "M": 16,
    "model": {"epochs": 10},
    "attacker": {"epochs": 10},
    "watermark": {"T": 2, "K": 1, "hidden": [4], "ensembles": 1},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_evaluate_writes_report(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["evaluate", "--config", str(cfg_path), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "report.json").exists() and (out / "tables.csv").exists()
    assert json.loads(capsys.readouterr().out)["failures"] == 0


def test_partial_failure_exit_code(cfg_path, tmp_path, monkeypatch):
    real = extract.run_attack
    monkeypatch.setattr(extract, "run_attack",
                        lambda kind, *a: (_ for _ in ()).throw(RuntimeError("x")) if kind == "mrce"
                        else real(kind, *a))
    assert cli.main(["evaluate", "--config", str(cfg_path), "--out", str(tmp_path / "r")]) == cli.EXIT_PARTIAL


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"attacks": ["nope"]}))
    assert cli.main(["evaluate", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    bad.write_text("{not json")
    assert cli.main(["evaluate", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_train_explain_watermark_attack_chain(cfg_path, tmp_path):
    out = tmp_path / "chain"
    common = ["--config", str(cfg_path), "--out", str(out)]
    assert cli.main(["train", *common]) == 0
    model = str(out / "model.json")
    assert cli.main(["explain", *common, "--model", model, "--rows", "6"]) == 0
    assert cli.main(["watermark", *common, "--model", model, "--cfs", str(out / "cfs.csv")]) == 0
    theta = json.loads((out / "theta.json").read_text())
    assert theta["shape"] == [6, 2]
    assert cli.main(["attack", *common, "--model", model, "--kind", "mrce"]) == 0
    assert (out / "transcript_mrce_000.json").exists()
    assert cli.main(["attack", *common, "--model", model, "--kind", "mrce", "--subset", "5"]) == cli.EXIT_CONFIG


def test_verify_command(tmp_path, capsys):
    wm_csv, un_csv = tmp_path / "a.csv", tmp_path / "b.csv"
    wm_csv.write_text("p\n" + "\n".join(str(0.6 + 0.01 * (i % 3)) for i in range(20)) + "\n")
    un_csv.write_text("p\n" + "\n".join("0.4" for _ in range(20)) + "\n")
    assert cli.main(["verify", str(wm_csv), str(un_csv)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["decision"] == "positive" and doc["n"] == 20
    assert not (tmp_path / "verification.json").exists()
    assert cli.main(["verify", str(wm_csv), str(un_csv), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "verification.json").exists()
    short = tmp_path / "c.csv"
    short.write_text("p\n0.5\n")
    assert cli.main(["verify", str(short), str(un_csv)]) == cli.EXIT_CONFIG


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "cfwatermark.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in cli.COMMANDS:
        assert cmd in res.stdout
