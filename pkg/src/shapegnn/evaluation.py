"""MAE / residual reports, trend aggregation across trials, and transfer evaluation.

Residuals are ``measured - predicted``: a positive residual means the model
under-predicted the shape error.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import NO_GROUP, NodeTable, row_normalize_features
from .errors import ConfigError, DimensionError
from .graphbuild import ConnectionStrategy, build_graph

DEFAULT_BINS = 21


def mae(predictions: np.ndarray, labels: np.ndarray, eval_mask: np.ndarray) -> float:
    """Mean absolute error (label units) over ``eval_mask``."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    eval_mask = np.asarray(eval_mask, dtype=bool).reshape(-1)
    if not (predictions.shape == labels.shape == eval_mask.shape):
        raise DimensionError("predictions, labels and mask must have equal length")
    if not eval_mask.any():
        raise ValueError("empty evaluation mask")
    return float(np.mean(np.abs(labels[eval_mask] - predictions[eval_mask])))


@dataclass
class EvalReport:
    mae_mm: float
    mae_um: float
    group_mae_mm: dict[int, float]
    group_mae_um: dict[int, float]
    residuals: list[float]
    residual_ids: list[int]
    hist_edges: list[float]
    hist_counts: list[int]
    n_eval: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["group_mae_mm"] = {str(k): v for k, v in self.group_mae_mm.items()}
        doc["group_mae_um"] = {str(k): v for k, v in self.group_mae_um.items()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        doc = dict(doc)
        doc["group_mae_mm"] = {int(k): v for k, v in doc["group_mae_mm"].items()}
        doc["group_mae_um"] = {int(k): v for k, v in doc["group_mae_um"].items()}
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def residual_histogram(residuals: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins on ``[-r, r]`` with ``r = max |residual|`` (so 0 is centred)."""
    r = float(np.max(np.abs(residuals))) if len(residuals) else 0.0
    if r == 0.0:
        r = 0.5
    counts, edges = np.histogram(residuals, bins=bins, range=(-r, r))
    return counts, edges


def residual_report(
    predictions: np.ndarray,
    table: NodeTable,
    eval_mask: np.ndarray,
    bins: int = DEFAULT_BINS,
    metadata: dict | None = None,
    measured: np.ndarray | None = None,
) -> EvalReport:
    """Residuals, histogram and per-group MAE over ``eval_mask``.

    ``measured`` defaults to the table's hidden truth when present, else its labels.
    """
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    measured = table.measured if measured is None else np.asarray(measured, dtype=np.float64)
    eval_mask = np.asarray(eval_mask, dtype=bool)
    overall = mae(predictions, measured, eval_mask)
    resid = measured[eval_mask] - predictions[eval_mask]
    groups = table.groups[eval_mask]
    group_mae = {}
    for g in np.unique(groups):
        if g == NO_GROUP:
            continue
        group_mae[int(g)] = float(np.mean(np.abs(resid[groups == g])))
    counts, edges = residual_histogram(resid, bins)
    return EvalReport(
        mae_mm=overall,
        mae_um=1000.0 * overall,
        group_mae_mm=group_mae,
        group_mae_um={g: 1000.0 * v for g, v in group_mae.items()},
        residuals=[float(v) for v in resid],
        residual_ids=[int(i) for i in table.ids[eval_mask]],
        hist_edges=[float(v) for v in edges],
        hist_counts=[int(c) for c in counts],
        n_eval=int(eval_mask.sum()),
        metadata=dict(metadata or {}),
    )


def write_residuals_csv(report: EvalReport, path: str | Path, header_comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "residual_mm"])
        for i, r in zip(report.residual_ids, report.residuals):
            w.writerow([i, repr(r)])


# --------------------------------------------------------------------------
# Transfer


def default_eval_mask(table: NodeTable) -> np.ndarray:
    """All nodes when the hidden truth is known, otherwise the labeled nodes."""
    if table.truth is not None:
        return np.ones(table.n, dtype=bool)
    return table.labeled_mask


def predict_checkpoint(checkpoint: dict, table: NodeTable, strategy: ConnectionStrategy) -> np.ndarray:
    """Predictions of a saved GCN or SVR on ``table`` (features row-normalized here)."""
    from . import gcn, svr

    if int(checkpoint["d"]) != table.d:
        raise DimensionError(
            f"checkpoint expects {checkpoint['d']} features, target table has {table.d}"
        )
    normed = row_normalize_features(table)
    if checkpoint["kind"] == "gcn":
        model = gcn.from_dict(checkpoint)
        return gcn.predict(model, build_graph(normed, strategy), normed.features)
    if checkpoint["kind"] == "svr":
        return svr.predict(svr.SvrModel.from_dict(checkpoint), normed.features)
    raise ConfigError(f"unknown checkpoint kind {checkpoint['kind']!r}")


def transfer_eval(
    checkpoint: dict | str | Path,
    target_table: NodeTable,
    strategy: ConnectionStrategy,
    bins: int = DEFAULT_BINS,
) -> EvalReport:
    """Apply a frozen model to an unfiltered target geometry and score it per group."""
    if not isinstance(checkpoint, dict):
        checkpoint = json.loads(Path(checkpoint).read_text())
    z = predict_checkpoint(checkpoint, target_table, strategy)
    meta = {"kind": checkpoint["kind"], "strategy": str(strategy), "filter_pct": 0}
    return residual_report(z, target_table, default_eval_mask(target_table), bins=bins, metadata=meta)


# --------------------------------------------------------------------------
# Trend tables


AXES = ("k", "t", "filter_pct")


@dataclass
class TrendRow:
    axis_value: float
    mean_mae_mm: float
    std_mae_mm: float
    n_seeds: int


@dataclass
class TrendTable:
    axis: str
    rows: list[TrendRow]

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis_value", "mean_mae_mm", "std_mae_mm", "n_seeds"])
            for r in self.rows:
                w.writerow([_num(r.axis_value), repr(r.mean_mae_mm), repr(r.std_mae_mm), r.n_seeds])

    def to_svg(self, path: str | Path, title: str | None = None) -> None:
        Path(path).write_text(trend_svg(self, title))


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def axis_value(report: EvalReport, axis: str) -> float:
    value = report.metadata.get(axis)
    if value is None:
        raise ConfigError(f"report has no value for axis {axis!r}")
    return float(value)


def aggregate_trials(reports: list[EvalReport], axis: str) -> TrendTable:
    """Mean and sample standard deviation of MAE per value of ``axis``."""
    if axis not in AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {AXES}")
    if not reports:
        raise ValueError("no reports to aggregate")
    by_value: dict[float, list[float]] = {}
    for rep in reports:
        by_value.setdefault(axis_value(rep, axis), []).append(rep.mae_mm)
    rows = []
    for v in sorted(by_value):
        vals = np.array(by_value[v])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(TrendRow(v, float(vals.sum() / len(vals)), std, len(vals)))
    return TrendTable(axis=axis, rows=rows)


def trend_svg(table: TrendTable, title: str | None = None, width: int = 480, height: int = 320) -> str:
    """Minimal standalone SVG: mean MAE (um) per axis value with +-1 std bars."""
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 45
    xs = [r.axis_value for r in table.rows]
    lo = [1000 * (r.mean_mae_mm - r.std_mae_mm) for r in table.rows]
    hi = [1000 * (r.mean_mae_mm + r.std_mae_mm) for r in table.rows]
    y_min, y_max = min(lo), max(hi)
    if y_max - y_min < 1e-12:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    x_min, x_max = min(xs), max(xs)
    if x_max == x_min:
        x_min, x_max = x_min - 1, x_max + 1

    def px(x):
        return pad_l + (x - x_min) / (x_max - x_min) * (width - pad_l - pad_r)

    def py(y):
        return height - pad_b - (y - y_min) / (y_max - y_min) * (height - pad_t - pad_b)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">'
        f"{title or 'MAE vs ' + table.axis}</text>",
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle">{table.axis}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.1f})">MAE [um]</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = y_min + frac * (y_max - y_min)
        parts.append(f'<text x="{pad_l - 4}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    points = []
    for r, l, h in zip(table.rows, lo, hi):
        x, y = px(r.axis_value), py(1000 * r.mean_mae_mm)
        points.append(f"{x:.1f},{y:.1f}")
        parts.append(f'<line x1="{x:.1f}" y1="{py(l):.1f}" x2="{x:.1f}" y2="{py(h):.1f}" stroke="#888"/>')
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="#1f5fa8"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - pad_b + 14}" text-anchor="middle">{_num(r.axis_value)}</text>')
    parts.append(f'<polyline points="{" ".join(points)}" fill="none" stroke="#1f5fa8"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
