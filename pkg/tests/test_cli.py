import json

import numpy as np
import pytest

from tabmtr import harness
from tabmtr import tensor as tn
from tabmtr.cli import main
from tabmtr.config import ExperimentConfig, load_config
from tabmtr.data import DatasetBundle
from tabmtr.training import ConfigError

TINY = {
    "name": "tiny",
    "dataset": {"kind": "two_gaussians_binary", "n": 300},
    "methods": ["w/o DA", {"label": "mtr", "grid": [0.1, 0.5]}],
    "seeds": [0, 1],
    "workers": 1,
    "model": {"d_token": 8, "n_blocks": 1, "n_heads": 2},
    "train": {"max_epochs": 2, "patience": 2},
}


@pytest.fixture(autouse=True)
def _cache(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.CACHE_ENV, str(tmp_path / "cache"))


def _config(tmp_path, **over):
    body = {**TINY, "output_dir": str(tmp_path / "out"), **over}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(body))
    return path


def test_config_round_trip(tmp_path):
    cfg = load_config(_config(tmp_path))
    assert ExperimentConfig.from_dict(json.loads(cfg.dumps())) == cfg
    assert [m.values for m in cfg.methods] == [[None], [0.1, 0.5]]
    assert cfg.with_seed_offset(10).seeds == [10, 11]


@pytest.mark.parametrize("over,match", [
    ({"experiment": "ssl", "methods": [{"label": "cutmix", "grid": [1.0]}]}, "utmix"),
    ({"seeds": [1, 1]}, "distinct"),
    ({"seeds": []}, "seed"),
    ({"bogus": 1}, "bogus"),
    ({"train": {"lrr": 0.1}}, "lrr"),
])
def test_config_errors(tmp_path, over, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_config(tmp_path, **over))


def test_exit_code_for_bad_config(tmp_path, capsys):
    assert main(["run", "--config", str(_config(tmp_path, seeds=[]))]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_for_bad_data(tmp_path):
    (tmp_path / "d.csv").write_text("x,y\n1,0\nfoo,1\n")
    (tmp_path / "d.json").write_text(json.dumps(
        {"columns": [{"name": "x", "kind": "numeric"}], "target": "y", "task": "binary"}))
    ds = {"path": str(tmp_path / "d.csv"), "descriptor": str(tmp_path / "d.json")}
    assert main(["prepare", "--config", str(_config(tmp_path, dataset=ds))]) == 3


def test_exit_code_for_failed_runs(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")
    monkeypatch.setattr(harness, "execute_run", boom)
    cfg = _config(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 4
    failures = (tmp_path / "out" / "failures.jsonl").read_text().splitlines()
    assert len(failures) == 6 and "synthetic failure" in failures[0]


def test_prepare_hits_cache_second_time(tmp_path, capsys):
    cfg = str(_config(tmp_path))
    assert main(["prepare", "--config", cfg]) == 0
    assert capsys.readouterr().out.count("prepared") == 2
    assert main(["prepare", "--config", cfg]) == 0
    assert capsys.readouterr().out.count("cached") == 2


def test_interrupted_sweep_resumes_to_identical_results(tmp_path):
    cfg = str(_config(tmp_path))
    assert main(["run", "--config", cfg, "--output-dir", str(tmp_path / "full")]) == 0
    full = (tmp_path / "full" / "results.jsonl").read_bytes()

    part = str(tmp_path / "part")
    assert main(["run", "--config", cfg, "--output-dir", part, "--max-runs", "2"]) == 0
    assert main(["run", "--config", cfg, "--output-dir", part]) == 2  # needs --resume
    assert main(["run", "--config", cfg, "--output-dir", part, "--resume"]) == 0
    assert (tmp_path / "part" / "results.jsonl").read_bytes() == full
    assert len(full.splitlines()) == 12  # 3 cells x 2 seeds x {val, test}


def test_resume_with_changed_config_is_refused(tmp_path):
    cfg = _config(tmp_path)
    assert main(["run", "--config", str(cfg), "--max-runs", "1"]) == 0
    cfg2 = _config(tmp_path, train={"max_epochs": 3, "patience": 2})
    assert main(["run", "--config", str(cfg2), "--resume"]) == 2


def test_seed_offset_changes_run_ids(tmp_path):
    cfg = load_config(_config(tmp_path)).with_seed_offset(5)
    ids = [r.run_id for r in harness.plan(cfg)]
    assert all(i.endswith(("__s5", "__s6")) for i in ids)


def test_report_writes_tables_curves_and_figures(tmp_path):
    cfg = str(_config(tmp_path))
    assert main(["run", "--config", cfg]) == 0
    rep = tmp_path / "rep"
    assert main(["report", "--in", str(tmp_path / "out"), "--out", str(rep)]) == 0
    for name in ("report.csv", "report.md", "summary.csv", "missing.csv"):
        assert (rep / name).exists(), name
    assert list((rep / "curves").glob("*.csv"))
    assert list((rep / "figures").glob("*.png")) and list((rep / "figures").glob("*.svg"))


def test_report_on_empty_input_is_a_data_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--in", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 3


def test_selfcheck_passes():
    assert main(["selfcheck"]) == 0


def test_selfcheck_catches_a_wrong_gradient(monkeypatch):
    def bad_relu(a):
        # right forward, backward passes negative inputs through
        return tn._make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g,))
    monkeypatch.setattr(tn, "relu", bad_relu)
    assert main(["selfcheck"]) == 1


def test_execute_run_marker_shape(tmp_path):
    cfg = load_config(_config(tmp_path))
    path, _ = harness.prepare(cfg)[0]
    run = harness.plan(cfg)[1]
    (tmp_path / "r").mkdir()
    marker = harness.execute_run(cfg, run, DatasetBundle.load(path), tmp_path / "r")
    assert {json.loads(r)["split"] for r in marker["records"]} == {"val", "test"}
    assert marker["epochs"] <= 2 and np.isfinite(json.loads(marker["records"][0])["value"])


def test_ssl_pretrain_keeps_its_own_stopping_budget(tmp_path, monkeypatch):
    seen = {}

    def fake_pretrain(model, bundle, cfg):
        seen["cfg"] = cfg
        raise RuntimeError("stop here")
    monkeypatch.setattr(harness, "ssl_pretrain", fake_pretrain)
    cfg = load_config(_config(tmp_path, experiment="ssl", methods=[{"label": "mtr", "grid": [0.3]}],
                              train={"max_epochs": 7, "patience": 3, "lr": 0.01},
                              pretrain={"temperature": 0.5}))
    path, _ = harness.prepare(cfg)[0]
    with pytest.raises(RuntimeError):
        harness.execute_run(cfg, harness.plan(cfg)[0], DatasetBundle.load(path), tmp_path)
    pre = seen["cfg"]
    assert (pre.max_epochs, pre.patience, pre.lr, pre.temperature) == (200, 10, 0.01, 0.5)
    assert pre.augmentation.apply_probability == 1.0
