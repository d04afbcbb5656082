import csv
import json
import time

import numpy as np
import pytest

from shapegnn import experiment
from shapegnn.cli import main
from shapegnn.dataset import SyntheticSpec, generate_synthetic, write_csv
from shapegnn.errors import ConfigError, NumericalError
from shapegnn.experiment import GridConfig, TrialConfig, run_grid, run_trial

SMALL = {"synthetic": {"n_time_steps": 4, "points_per_step": 25, "label_ratio": 0.1}}
QUICK_GCN = {"max_epochs": 40}


def _cfg(tmp_path, **kw):
    doc = dict(dataset=SMALL, gcn=QUICK_GCN, out=str(tmp_path / "runs"))
    doc.update(kw)
    return TrialConfig.from_dict(doc)


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_run_trial_smoke(tmp_path):
    cfg = _cfg(tmp_path)
    rep = run_trial(cfg)
    d = tmp_path / "runs" / cfg.config_hash
    assert {p.name for p in d.iterdir()} >= {"report.json", "residuals.csv", "model.ckpt", "manifest.json"}
    assert np.isfinite(rep.mae_mm) and rep.n_eval > 0
    doc = json.loads((d / "report.json").read_text())
    assert doc["metadata"]["config_hash"] == cfg.config_hash
    assert (d / "residuals.csv").read_text().startswith(f"# config_hash={cfg.config_hash}\n")
    assert json.loads((d / "model.ckpt").read_text())["config_hash"] == cfg.config_hash
    man = json.loads((d / "manifest.json").read_text())
    assert man["config_hash"] == cfg.config_hash and "numpy" in man["versions"]


def test_rerun_is_byte_identical(tmp_path):
    cfg = _cfg(tmp_path)
    d = tmp_path / "runs" / cfg.config_hash
    run_trial(cfg)
    first = {n: (d / n).read_bytes() for n in ("report.json", "residuals.csv", "model.ckpt")}
    run_trial(cfg)
    assert first == {n: (d / n).read_bytes() for n in first}


def test_manifest_rerun_reproduces(tmp_path):
    cfg = _cfg(tmp_path, model="svr", svr_grid={"C": [1.0], "gamma": [1.0], "epsilon": [0.001], "folds": 3})
    run_trial(cfg)
    d = tmp_path / "runs" / cfg.config_hash
    report = (d / "report.json").read_bytes()
    again = TrialConfig.from_dict(json.loads((d / "manifest.json").read_text()))
    assert again.config_hash == cfg.config_hash
    run_trial(again)
    assert (d / "report.json").read_bytes() == report
    assert (d / "cv.csv").read_text().startswith("C,gamma,epsilon,fold,mae_mm\n")


def test_config_hash_ignores_out(tmp_path):
    assert _cfg(tmp_path, out="a").config_hash == _cfg(tmp_path, out="b").config_hash
    assert _cfg(tmp_path, seed=1).config_hash != _cfg(tmp_path, seed=2).config_hash


def test_kfold_mode_on_csv_dataset(tmp_path):
    t = generate_synthetic(SyntheticSpec(n_time_steps=4, points_per_step=25, label_ratio=0.2))
    write_csv(t.with_labels(t.labels), tmp_path / "data.csv")
    (tmp_path / "data.truth.csv").unlink(missing_ok=True)
    cfg = _cfg(tmp_path, dataset={"path": str(tmp_path / "data.csv")})
    rep = run_trial(cfg)
    assert rep.metadata["eval_mode"] == "kfold" and rep.n_eval == t.n_labeled
    man = json.loads((tmp_path / "runs" / cfg.config_hash / "manifest.json").read_text())
    assert man["label_ratio"] == pytest.approx(t.n_labeled / (t.n - t.n_labeled))


def test_failure_removes_partial_outputs(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)

    def boom(*a, **k):
        raise NumericalError("training diverged at epoch 3")

    monkeypatch.setattr(experiment.gcn, "train", boom)
    with pytest.raises(NumericalError, match=r"\[train\].*epoch 3"):
        run_trial(cfg)
    assert not any((tmp_path / "runs").iterdir())


def test_config_validation():
    for bad in (
        {},
        {"dataset": {"path": "a", "synthetic": {}}},
        {"dataset": SMALL, "model": "rf"},
        {"dataset": SMALL, "strategy": "knn:0"},
        {"dataset": SMALL, "filter_pct": 120},
        {"dataset": SMALL, "gcn": {"hidden": 0}},
        {"dataset": SMALL, "bogus": 1},
        {"dataset": {"synthetic": {"d": 1}}},
    ):
        with pytest.raises(ConfigError):
            TrialConfig.from_dict(bad)


def test_grid_one_cell_matches_trial(tmp_path):
    base = dict(dataset=SMALL, gcn=QUICK_GCN)
    grid = GridConfig.from_dict({"base": base, "out": str(tmp_path / "g")})
    res = run_grid(grid)
    assert not res.failures and len(res.reports) == 1
    solo = run_trial(TrialConfig.from_dict({**base, "out": str(tmp_path / "solo")}))
    assert res.reports[0].to_json() == solo.to_json()
    for table in res.trends.values():
        assert len(table.rows) == 1 and table.rows[0].mean_mae_mm == solo.mae_mm
    assert (tmp_path / "g" / "trend_filter_pct.csv").exists()
    assert (tmp_path / "g" / "trend_knn_k.svg").exists()


def test_grid_k_sweep_row_count(tmp_path):
    grid = GridConfig.from_dict({
        "base": dict(dataset=SMALL, gcn={"max_epochs": 5}),
        "strategies": [f"knn:{k}" for k in range(3, 9)],
        "seeds": [0, 1],
        "out": str(tmp_path / "g"),
    })
    res = run_grid(grid)
    assert len(res.trends["knn_k"].rows) == 6
    assert all(r.n_seeds == 2 for r in res.trends["knn_k"].rows)
    rows = list(csv.reader((tmp_path / "g" / "trend_knn_k.csv").open()))
    assert len(rows) == 7
    assert len(list(csv.reader((tmp_path / "g" / "cells.csv").open()))) == 13


def test_grid_cell_failure_is_isolated(tmp_path):
    out = tmp_path / "g"
    # 99 % filter with no floor drops whole steps; knn:50 then exceeds the node count
    doc = {
        "base": dict(dataset=SMALL, gcn={"max_epochs": 5}, min_per_step=0),
        "filter_pct": [0, 99],
        "strategies": ["knn:50"],
        "out": str(out),
    }
    code = main(["grid", "--config", _write(tmp_path / "g.json", doc)])
    assert code == 5
    failures = json.loads((out / "failures.json").read_text())
    assert len(failures) == 1
    ok = [p for p in out.iterdir() if p.is_dir()]
    assert len(ok) == 1 and (ok[0] / "report.json").exists()


def test_grid_parallel_matches_serial(tmp_path):
    doc = {"base": dict(dataset=SMALL, gcn={"max_epochs": 5}), "seeds": [0, 1]}
    a = run_grid(GridConfig.from_dict({**doc, "out": str(tmp_path / "a")}), jobs=1)
    b = run_grid(GridConfig.from_dict({**doc, "out": str(tmp_path / "b")}), jobs=2)
    assert [r.to_json() for r in a.reports] == [r.to_json() for r in b.reports]


def test_exit_codes(tmp_path, capsys):
    assert main(["trial", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["trial", "--config", _write(tmp_path / "c.json", {"dataset": SMALL, "model": "x"})]) == 2
    assert main(["trial", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "r")]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("id,t,x,y,z,f0,label,group\n0,0,0,0,0,1,0.01,0\n1,0,1,0,0,abc,,0\n")
    assert main(["trial", "--data", str(bad), "--out", str(tmp_path / "r")]) == 3
    assert "row" in capsys.readouterr().err


def test_exit_code_numerical(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("training diverged at epoch 0")

    monkeypatch.setattr(experiment.gcn, "train", boom)
    cfg = _write(tmp_path / "c.json", {"dataset": SMALL, "out": str(tmp_path / "r")})
    assert main(["trial", "--config", cfg]) == 4


def test_cli_generate_trial_report_transfer(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert main(["generate", "--out", str(data), "--steps", "4", "--points", "20", "--seed", "3"]) == 0
    assert data.exists() and (tmp_path / "d.meta.json").exists()
    runs = tmp_path / "runs"
    cfg = _write(tmp_path / "c.json", {"gcn": QUICK_GCN})
    assert main(["trial", "--config", cfg, "--data", str(data), "--out", str(runs), "--strategy", "knn:4"]) == 0
    assert "MAE" in capsys.readouterr().out
    (trial,) = [p for p in runs.iterdir() if p.is_dir()]
    assert json.loads((trial / "manifest.json").read_text())["config"]["strategy"] == "knn:4"
    assert main(["report", str(runs)]) == 0
    assert (runs / "trend_knn_k.csv").exists()
    assert main(["transfer", "--target", str(data), "--checkpoint", str(trial / "model.ckpt")]) == 0
    (tdir,) = runs.glob("transfer-*")
    table = (tdir / "table.csv").read_text().splitlines()
    assert table[0].startswith("model,target_group") and table[1].startswith("GCN,")
    # self-transfer equals in-sample evaluation of the checkpoint over the same nodes
    rep = json.loads((tdir / "report.json").read_text())
    assert rep["n_eval"] == 80


def test_cli_transfer_trains_source(tmp_path):
    target = tmp_path / "target.csv"
    write_csv(generate_synthetic(SyntheticSpec(n_time_steps=3, points_per_step=20, seed=9)), target)
    cfg = _write(tmp_path / "c.json", {"dataset": SMALL, "gcn": QUICK_GCN, "out": str(tmp_path / "r")})
    assert main(["transfer", "--config", cfg, "--target", str(target)]) == 0
    (tdir,) = (tmp_path / "r").glob("transfer-*")
    assert json.loads((tdir / "report.json").read_text())["metadata"]["training_overall_mae_mm"] > 0


def test_cli_transfer_dimension_mismatch(tmp_path):
    cfg = _cfg(tmp_path)
    run_trial(cfg)
    target = tmp_path / "t.csv"
    write_csv(generate_synthetic(SyntheticSpec(n_time_steps=3, points_per_step=20, d=4)), target)
    ckpt = tmp_path / "runs" / cfg.config_hash / "model.ckpt"
    assert main(["transfer", "--target", str(target), "--checkpoint", str(ckpt)]) == 3


@pytest.mark.slow
def test_table1_knn_grid_runtime(tmp_path):
    base = {"dataset": {"synthetic": {}}}
    start = time.perf_counter()
    code = main(["grid", "--config", _write(tmp_path / "b.json", base), "--table1", "knn", "--out", str(tmp_path / "g")])
    elapsed = time.perf_counter() - start
    assert code == 0
    assert len(list(csv.reader((tmp_path / "g" / "trend_knn_k.csv").open()))) == 7
    assert len(list(csv.reader((tmp_path / "g" / "trend_filter_pct.csv").open()))) == 6
    assert elapsed < 30 * 60
