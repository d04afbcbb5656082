"""Trial, grid and transfer runners behind the CLI.

One trial goes dataset -> filter -> connect -> normalize -> train -> predict ->
evaluate and writes ``<out>/<config-hash>/{report.json, residuals.csv,
model.ckpt, manifest.json}``. Wall-clock timings go to ``timing.json`` so the
other files are byte-reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import platform
import shutil
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__, gcn, svr
from .dataset import (
    NodeTable,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    row_normalize_features,
)
from .errors import ConfigError, DataError, ShapeGnnError
from .evaluation import (
    EvalReport,
    TrendTable,
    aggregate_trials,
    residual_report,
    transfer_eval,
    write_residuals_csv,
)
from .graphbuild import Knn, Temporal, build_graph, filter_nodes, parse_strategy
from .svr import GridSpec, fold_assignment, grid_search_cv

log = logging.getLogger(__name__)

FILTER_STREAM = 11
FOLD_STREAM = 12
SVR_STREAM = 13


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


@dataclass
class TrialConfig:
    dataset: dict
    filter_pct: float = 0.0
    min_per_step: int = 5
    strategy: str = "knn:8"
    model: str = "gcn"
    gcn: dict = field(default_factory=dict)
    svr_grid: dict = field(default_factory=dict)
    eval_folds: int = 5
    bins: int = 21
    seed: int = 0
    out: str = "runs"

    def __post_init__(self) -> None:
        if not isinstance(self.dataset, dict) or len(self.dataset) != 1 or not (
            {"path", "synthetic"} & set(self.dataset)
        ):
            raise ConfigError("dataset must be exactly one of {'path': ...} or {'synthetic': {...}}")
        if "synthetic" in self.dataset:
            try:
                SyntheticSpec(**self.dataset["synthetic"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad synthetic spec: {exc}") from None
        if self.model not in ("gcn", "svr"):
            raise ConfigError(f"model must be 'gcn' or 'svr', got {self.model!r}")
        parse_strategy(self.strategy)
        if not 0 <= self.filter_pct <= 100:
            raise ConfigError("filter_pct must lie in [0, 100]")
        try:
            gcn.GcnConfig(**self.gcn)
            self.grid_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad hyperparameters: {exc}") from None
        if self.eval_folds < 2 or self.bins < 1:
            raise ConfigError("eval_folds must be >= 2 and bins >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> TrialConfig:
        if "config" in doc and "config_hash" in doc:
            doc = doc["config"]
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown trial config keys: {sorted(unknown)}")
        if "dataset" not in doc:
            raise ConfigError("trial config needs a 'dataset' entry")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def identity(self) -> dict:
        doc = self.to_dict()
        doc.pop("out")
        return doc

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def gcn_config(self) -> gcn.GcnConfig:
        return gcn.GcnConfig(**self.gcn)

    def grid_spec(self) -> GridSpec:
        g = dict(self.svr_grid)
        for key in ("C", "gamma", "epsilon"):
            if key in g:
                g[key] = tuple(float(v) for v in g[key])
        g.setdefault("seed", derive_seed(self.seed, SVR_STREAM))
        return GridSpec(**g)


@contextmanager
def stage(name: str):
    try:
        yield
    except ShapeGnnError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def load_dataset(source: dict, seed: int = 0) -> NodeTable:
    """Read ``{"path": ...}`` or generate ``{"synthetic": {...}}``.

    A synthetic spec without its own seed takes the trial seed, so seed sweeps
    also resample the workpiece.
    """
    if "path" in source:
        return load_csv(source["path"])
    spec = dict(source["synthetic"])
    spec.setdefault("seed", seed)
    return generate_synthetic(SyntheticSpec(**spec))


def _strategy_axes(strategy: str) -> dict:
    s = parse_strategy(strategy)
    if isinstance(s, Knn):
        return {"k": s.k, "t": None}
    if isinstance(s, Temporal):
        return {"k": None, "t": s.t}
    return {"k": s.k, "t": s.t}


@dataclass
class TrialResult:
    report: EvalReport
    checkpoint: dict
    extra_files: dict[str, str] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


def _fit_predict_gcn(cfg: TrialConfig, table: NodeTable, graph, train_mask):
    model = gcn.init(table.d, cfg.seed, cfg.gcn_config())
    rep = gcn.train(model, graph, table, train_mask=train_mask)
    return model, gcn.predict(model, graph, table.features), rep


def _fit_predict_svr(cfg: TrialConfig, table: NodeTable, train_mask):
    x_l, y_l = table.features[train_mask], table.labels[train_mask]
    cv = grid_search_cv(x_l, y_l, cfg.grid_spec())
    model = svr.fit(x_l, y_l, **cv.best)
    return model, svr.predict(model, table.features), cv


def execute_trial(cfg: TrialConfig) -> TrialResult:
    """Run one trial in memory (no files written)."""
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    with stage("dataset"):
        raw = load_dataset(cfg.dataset, cfg.seed)
        raw.require_labels()
    with stage("filter"):
        table = filter_nodes(raw, cfg.filter_pct, cfg.min_per_step, derive_seed(cfg.seed, FILTER_STREAM))
        table = row_normalize_features(table)
    graph = None
    if cfg.model == "gcn":
        with stage("connect"):
            graph = build_graph(table, parse_strategy(cfg.strategy))
    timing["prepare_s"] = time.perf_counter() - t0

    labeled = table.labeled_mask
    extra: dict[str, str] = {}
    meta = {
        "config_hash": cfg.config_hash,
        "model": cfg.model,
        "strategy": cfg.strategy,
        "filter_pct": cfg.filter_pct,
        "min_per_step": cfg.min_per_step,
        "seed": cfg.seed,
        "n_nodes": table.n,
        "n_labeled": table.n_labeled,
        "label_ratio": table.label_ratio,
        "n_edges": None if graph is None else graph.n_edges,
        **_strategy_axes(cfg.strategy),
    }
    t1 = time.perf_counter()
    with stage("train"):
        if table.truth is not None:
            # Hidden ground truth: train on every label, score the unlabeled nodes.
            meta["eval_mode"] = "hidden_truth"
            eval_mask = ~labeled
            if not eval_mask.any():
                raise DataError("every node is labeled; nothing left to evaluate")
            if cfg.model == "gcn":
                model, z, rep = _fit_predict_gcn(cfg, table, graph, labeled)
                meta["final_loss"] = rep.losses[-1]
                meta["epochs"] = rep.epochs
            else:
                model, z, cv = _fit_predict_svr(cfg, table, labeled)
                meta["svr_best"] = cv.best
                meta["svr_cv_mae_mm"] = cv.best_mae
                extra["cv.csv"] = _cv_csv(cv)
            measured = table.truth
        else:
            # Published-style data: k-fold over the labeled nodes.
            meta["eval_mode"] = "kfold"
            lab_rows = np.flatnonzero(labeled)
            if len(lab_rows) < cfg.eval_folds:
                raise DataError(f"{len(lab_rows)} labels cannot fill {cfg.eval_folds} folds")
            z = np.full(table.n, np.nan)
            for k, part in enumerate(fold_assignment(len(lab_rows), cfg.eval_folds, derive_seed(cfg.seed, FOLD_STREAM))):
                held = lab_rows[part]
                train_mask = labeled.copy()
                train_mask[held] = False
                if cfg.model == "gcn":
                    _, zk, _ = _fit_predict_gcn(cfg, table, graph, train_mask)
                else:
                    _, zk, _ = _fit_predict_svr(cfg, table, train_mask)
                z[held] = zk[held]
            eval_mask = labeled
            measured = table.labels
            if cfg.model == "gcn":
                model, _, rep = _fit_predict_gcn(cfg, table, graph, labeled)
                meta["final_loss"] = rep.losses[-1]
                meta["epochs"] = rep.epochs
            else:
                model, _, cv = _fit_predict_svr(cfg, table, labeled)
                meta["svr_best"] = cv.best
                meta["svr_cv_mae_mm"] = cv.best_mae
                extra["cv.csv"] = _cv_csv(cv)
    timing["train_s"] = time.perf_counter() - t1
    with stage("evaluate"):
        report = residual_report(z, table, eval_mask, bins=cfg.bins, metadata=meta, measured=measured)
    checkpoint = gcn.to_dict(model) if cfg.model == "gcn" else model.to_dict()
    checkpoint["config_hash"] = cfg.config_hash
    checkpoint["strategy"] = cfg.strategy
    timing["total_s"] = time.perf_counter() - t0
    return TrialResult(report=report, checkpoint=checkpoint, extra_files=extra, timing=timing)


def _cv_csv(cv) -> str:
    lines = ["C,gamma,epsilon,fold,mae_mm"]
    lines += [f"{r.C!r},{r.gamma!r},{r.epsilon!r},{r.fold},{r.mae_mm!r}" for r in cv.rows]
    return "\n".join(lines) + "\n"


def manifest(cfg: TrialConfig, report: EvalReport | None = None) -> dict:
    doc = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "versions": {
            "shapegnn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if report is not None:
        doc["label_ratio"] = report.metadata.get("label_ratio")
        doc["n_nodes"] = report.metadata.get("n_nodes")
        doc["n_labeled"] = report.metadata.get("n_labeled")
    return doc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def trial_dir(cfg: TrialConfig) -> Path:
    return Path(cfg.out) / cfg.config_hash


def run_trial(cfg: TrialConfig) -> EvalReport:
    """Execute a trial and write its artifacts; partial outputs never survive a failure."""
    final = trial_dir(cfg)
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        result = execute_trial(cfg)
        h = cfg.config_hash
        (tmp / "report.json").write_text(result.report.to_json())
        write_residuals_csv(result.report, tmp / "residuals.csv", header_comment=f"config_hash={h}")
        (tmp / "model.ckpt").write_text(json.dumps(result.checkpoint, sort_keys=True) + "\n")
        (tmp / "manifest.json").write_text(_dump(manifest(cfg, result.report)))
        (tmp / "timing.json").write_text(_dump({"config_hash": h, **result.timing}))
        for name, text in result.extra_files.items():
            (tmp / name).write_text(text)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)
    log.info("trial %s: MAE %.5f mm", cfg.config_hash, result.report.mae_mm)
    return result.report


# --------------------------------------------------------------------------
# Grids


@dataclass
class GridConfig:
    base: dict
    filter_pct: list[float] = field(default_factory=lambda: [0.0])
    strategies: list[str] = field(default_factory=lambda: ["knn:8"])
    seeds: list[int] = field(default_factory=lambda: [0])
    min_per_step: dict[str, int] = field(default_factory=dict)
    out: str = "runs"

    @classmethod
    def from_dict(cls, doc: dict) -> GridConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown grid config keys: {sorted(unknown)}")
        if "base" not in doc:
            raise ConfigError("grid config needs a 'base' trial config")
        grid = cls(**doc)
        if not (grid.filter_pct and grid.strategies and grid.seeds):
            raise ConfigError("grid axes must be nonempty")
        for s in grid.strategies:
            parse_strategy(s)
        return grid

    def cells(self) -> list[TrialConfig]:
        out = []
        for pct, strat, seed in itertools.product(self.filter_pct, self.strategies, self.seeds):
            doc = dict(self.base)
            doc.update(filter_pct=float(pct), strategy=strat, seed=int(seed), out=self.out)
            key = _num_key(pct)
            if key in self.min_per_step:
                doc["min_per_step"] = int(self.min_per_step[key])
            out.append(TrialConfig.from_dict(doc))
        return out


def _num_key(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# Per-filter node floors from the trial plan.
TABLE1_MIN_PER_STEP = {"0": 5, "10": 5, "50": 5, "90": 5, "99": 1}
TABLE1_FILTERS = [0.0, 10.0, 50.0, 90.0, 99.0]
TABLE1_KNN = [f"knn:{k}" for k in range(3, 9)]
TABLE1_TEMPORAL = [f"temporal:{t}" for t in range(1, 9)]


def _run_cell(cfg_doc: dict) -> tuple[dict, str | None]:
    cfg = TrialConfig.from_dict(cfg_doc)
    try:
        return run_trial(cfg).to_dict(), None
    except Exception as exc:  # a failed cell must not stop the grid
        return {}, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


@dataclass
class GridResult:
    reports: list[EvalReport]
    trends: dict[str, TrendTable]
    failures: dict[str, str]


def trend_tables(reports: list[EvalReport]) -> dict[str, TrendTable]:
    """Trend tables keyed ``filter_pct`` and ``<kind>_<axis>`` (e.g. ``knn_k``)."""
    out: dict[str, TrendTable] = {}
    if not reports:
        return out
    out["filter_pct"] = aggregate_trials(reports, "filter_pct")
    by_kind: dict[str, list[EvalReport]] = {}
    for rep in reports:
        by_kind.setdefault(rep.metadata["strategy"].split(":")[0], []).append(rep)
    for kind, reps in by_kind.items():
        for axis in ("k", "t"):
            if all(r.metadata.get(axis) is not None for r in reps):
                out[f"{kind}_{axis}"] = aggregate_trials(reps, axis)
    return out


def write_trends(trends: dict[str, TrendTable], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, table in trends.items():
        table.to_csv(out / f"trend_{name}.csv")
        table.to_svg(out / f"trend_{name}.svg", title=f"MAE vs {name}")


def run_grid(grid: GridConfig, jobs: int = 1) -> GridResult:
    cells = grid.cells()
    docs = [c.to_dict() for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, docs))
    else:
        results = [_run_cell(d) for d in docs]
    reports, failures = [], {}
    rows = []
    for cfg, (rep_doc, err) in zip(cells, results):
        if err is not None:
            failures[cfg.config_hash] = err
            log.error("cell %s (%s, filter %s, seed %s) failed: %s", cfg.config_hash, cfg.strategy, cfg.filter_pct, cfg.seed, err.splitlines()[0])
            continue
        rep = EvalReport.from_dict(rep_doc)
        reports.append(rep)
        rows.append([cfg.config_hash, _num_key(cfg.filter_pct), cfg.strategy, cfg.seed, repr(rep.mae_mm)])
    out = Path(grid.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "cells.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "filter_pct", "strategy", "seed", "mae_mm"])
        w.writerows(rows)
    (out / "failures.json").write_text(_dump(failures))
    trends = trend_tables(reports)
    write_trends(trends, out)
    return GridResult(reports=reports, trends=trends, failures=failures)


def collect_reports(root: str | Path) -> list[EvalReport]:
    root = Path(root)
    paths = sorted(p for p in root.glob("*/report.json") if not p.parent.name.endswith(".partial"))
    return [EvalReport.from_dict(json.loads(p.read_text())) for p in paths]


# --------------------------------------------------------------------------
# Transfer


@dataclass
class TransferResult:
    source: EvalReport | None
    target: EvalReport
    checkpoint: dict


def run_transfer(
    cfg: TrialConfig | None,
    target_path: str | Path,
    strategy: str = "knn:8",
    checkpoint: str | Path | None = None,
) -> TransferResult:
    """Train on the source config (or load ``checkpoint``) and score the target geometry."""
    with stage("dataset"):
        target = load_csv(target_path)
    source_report = None
    if checkpoint is not None:
        ckpt = json.loads(Path(checkpoint).read_text())
        ckpt_path = Path(checkpoint)
    else:
        if cfg is None:
            raise ConfigError("transfer needs a train config or a checkpoint")
        source_report = run_trial(cfg)
        ckpt_path = trial_dir(cfg) / "model.ckpt"
        ckpt = json.loads(ckpt_path.read_text())
    with stage("transfer"):
        report = transfer_eval(ckpt, target, parse_strategy(strategy))
    report.metadata["source_checkpoint"] = str(ckpt_path)
    report.metadata["source_config_hash"] = ckpt.get("config_hash")
    if source_report is not None:
        report.metadata["training_overall_mae_mm"] = source_report.mae_mm
    out_root = Path(cfg.out if cfg is not None else ckpt_path.parent.parent)
    out = out_root / f"transfer-{ckpt.get('config_hash', 'ckpt')}-{Path(target_path).stem}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    write_residuals_csv(report, out / "residuals.csv")
    (out / "table.csv").write_text(transfer_table_csv(ckpt, report))
    return TransferResult(source=source_report, target=report, checkpoint=ckpt)


def transfer_table_csv(ckpt: dict, report: EvalReport) -> str:
    """One row in the layout: model, per-group target MAE, target overall, training overall."""
    groups = sorted(report.group_mae_mm)
    label = ckpt["kind"].upper()
    header = ["model", *[f"target_group{g}_mm" for g in groups], "target_overall_mm", "training_overall_mm"]
    train_mae = report.metadata.get("training_overall_mae_mm")
    row = [
        label,
        *[repr(report.group_mae_mm[g]) for g in groups],
        repr(report.mae_mm),
        "" if train_mae is None else repr(train_mae),
    ]
    return ",".join(header) + "\n" + ",".join(row) + "\n"
