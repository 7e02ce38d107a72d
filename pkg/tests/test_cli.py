from __future__ import annotations

import csv
import hashlib
import json

import pytest
import yaml

from rbmlab.cli import ConfigError, env_overrides, load_config, main, validate

SMALL = {
    "domain": "square",
    "grid": {"h": 0.125},
    "times": [0.1, 0.3],
    "points": [[0.3, 0.3], [0.7, 0.6]],
    "kato": {"times": [0.001, 0.003, 0.01, 0.03, 0.1]},
    "mc": {"seed": 5, "paths": 500, "delta": 1e-4, "x0": [0.5, 0.5], "radii": [0.1, 0.2],
           "exit_times": [0.002, 0.005, 0.01, 0.02, 0.04], "eps_list": [0.05, 0.025],
           "checkpoint_times": [0.01, 0.02]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def test_overrides_precedence(cfg_path, monkeypatch):
    env = {"RBMLAB_GRID__H": "0.25", "RBMLAB_MC__PATHS": "7", "OTHER": "1"}
    assert env_overrides(env) == {"grid.h": 0.25, "mc.paths": 7}
    cfg = load_config(cfg_path, ["grid.h=0.5"], environ=env)
    assert cfg["grid"]["h"] == 0.5          # flag beats environment
    assert cfg["mc"]["paths"] == 7          # environment beats file
    assert cfg["mc"]["seed"] == 5
    with pytest.raises(ConfigError):
        load_config(cfg_path, ["nokey"])


def test_validation_collects_errors(cfg_path):
    cfg = load_config(cfg_path, ["grid.h=-1", "mc.seed=null", "domain=nowhere"], environ={})
    errs = validate(cfg, ["simulate", "bogus"])
    text = "\n".join(errs)
    assert "grid.h" in text and "mc.seed" in text and "bogus" in text and "domain" in text


def test_inline_and_file_domains(tmp_path):
    (tmp_path / "tri.yaml").write_text(yaml.safe_dump(
        {"kind": "polygon", "params": {"vertices": [[0, 0], [1, 0], [0, 1]]}}))
    cfg = dict(SMALL, domain="tri.yaml", points=[[0.2, 0.2]])
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["--config", str(tmp_path / "a.yaml"), "--out", str(tmp_path / "o"), "grid"]) == 0
    g = json.loads((tmp_path / "o" / "grid" / "grid.json").read_text())
    assert g["total_measure"] == pytest.approx(0.5)
    cfg["domain"] = {"kind": "rectangle", "params": {"width": 2, "height": 1}}
    (tmp_path / "b.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["--config", str(tmp_path / "b.yaml"), "--out", str(tmp_path / "o"), "grid"]) == 0
    g = json.loads((tmp_path / "o" / "grid" / "grid.json").read_text())
    assert g["total_measure"] == pytest.approx(2.0)


def test_outputs_and_summary(cfg_path, tmp_path):
    out = tmp_path / "out"
    rc = main(["--config", str(cfg_path), "--out", str(out), "grid", "eig", "kernel", "verify-kato"])
    assert rc == 0
    summ = json.loads((out / "eig" / "summary.json").read_text())
    assert summ["status"] == "ok"
    for f in summ["files"]:
        data = (out / "eig" / f["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == f["sha256"]
    with open(out / "kernel" / "kernel.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "i", "j", "value", "tail"] and len(rows) == 1 + 2 * 4
    fit = json.loads((out / "verify-kato" / "kato_fit.json").read_text())
    assert fit["kind"] == "kato" and "alpha" in fit["constants"]
    assert "time" not in json.dumps(summ).lower().replace("times", "")


def test_mc_requires_seed(cfg_path, tmp_path, capsys):
    rc = main(["--config", str(cfg_path), "--out", str(tmp_path / "x"), "--set", "mc.seed=null",
               "simulate"])
    assert rc == 2
    assert "mc.seed" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_failed_check_sets_exit_status(cfg_path, tmp_path):
    rc = main(["--config", str(cfg_path), "--out", str(tmp_path / "o"),
               "--set", "kato.times=[0.01, 0.02]", "verify-kato"])
    assert rc == 1
    summ = json.loads((tmp_path / "o" / "verify-kato" / "summary.json").read_text())
    assert summ["status"] == "error" and "FitError" in summ["error"]


def test_threads_do_not_change_bytes(cfg_path, tmp_path):
    cmds = ["simulate", "local-time"]
    for th in ("1", "3"):
        assert main(["--config", str(cfg_path), "--out", str(tmp_path / th), "--threads", th,
                     "--seed", "11"] + cmds) == 0
    for c in cmds:
        a = json.loads((tmp_path / "1" / c / "summary.json").read_text())
        b = json.loads((tmp_path / "3" / c / "summary.json").read_text())
        assert a == b
