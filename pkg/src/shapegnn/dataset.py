"""Node tables: CSV ingest/export, synthetic look-alike data, feature normalization.

A :class:`NodeTable` holds one row per Dixel start/end point on the finished
surface. Missing labels are stored as ``NaN`` and missing group tags as ``-1``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError

NO_GROUP = -1
FIELDS = ("constant", "linear", "smooth")

# Sweep geometry of the synthetic workpiece (mm): three flank faces of a
# U-shaped contour, each FACE_LENGTH long, WALL_HEIGHT tall.
FACE_LENGTH = 20.0
WALL_HEIGHT = 10.0
SWEEP_LENGTH = 3 * FACE_LENGTH


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NodeTable:
    """Per-node positions, time steps, features, optional labels and groups.

    ``truth`` is only set for synthetic data: the measured value at every node,
    including nodes whose label is hidden.
    """

    ids: np.ndarray
    time_steps: np.ndarray
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        n = ids.shape[0]
        steps = np.asarray(self.time_steps, dtype=np.int64)
        pos = np.asarray(self.positions, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        groups = np.asarray(self.groups, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise DataError("features must be an n x d matrix with d >= 1")
        if pos.shape != (n, 3):
            raise DataError(f"positions must be {n} x 3, got {pos.shape}")
        for name, arr in (("time_steps", steps), ("labels", labels), ("groups", groups)):
            if arr.shape != (n,):
                raise DataError(f"{name} must have length {n}, got {arr.shape}")
        if feats.shape[0] != n:
            raise DataError(f"features must have {n} rows, got {feats.shape[0]}")
        if np.any(steps < 0):
            raise DataError("time steps must be non-negative")
        if not np.all(np.isfinite(pos)):
            raise DataError("positions must be finite")
        if not np.all(np.isfinite(feats)):
            raise DataError("features must be finite")
        if np.any(np.isinf(labels)):
            raise DataError("labels must be finite or missing")
        if len(np.unique(ids)) != n:
            raise DataError("node ids must be unique")
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "time_steps", _frozen(steps))
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "groups", _frozen(groups))
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=np.float64)
            if truth.shape != (n,) or not np.all(np.isfinite(truth)):
                raise DataError("truth must be a finite vector of length n")
            object.__setattr__(self, "truth", _frozen(truth))

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def labeled_mask(self) -> np.ndarray:
        return ~np.isnan(self.labels)

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def has_labels(self) -> bool:
        return self.n_labeled > 0

    @property
    def label_ratio(self) -> float:
        """Labeled / unlabeled node ratio, the quantity listed in the trial plan."""
        n_unlabeled = self.n - self.n_labeled
        return math.inf if n_unlabeled == 0 else self.n_labeled / n_unlabeled

    @property
    def measured(self) -> np.ndarray:
        """Measured shape error per node: hidden truth when known, else labels."""
        return self.truth if self.truth is not None else self.labels

    def require_labels(self) -> None:
        if not self.has_labels:
            raise DataError("table has no labeled nodes; cannot train")

    def subset(self, rows: np.ndarray) -> NodeTable:
        rows = np.asarray(rows)
        return NodeTable(
            ids=self.ids[rows],
            time_steps=self.time_steps[rows],
            positions=self.positions[rows],
            features=self.features[rows],
            labels=self.labels[rows],
            groups=self.groups[rows],
            truth=None if self.truth is None else self.truth[rows],
        )

    def with_labels(self, labels: np.ndarray) -> NodeTable:
        return replace(self, labels=labels)

    def equals(self, other: NodeTable) -> bool:
        same = (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.time_steps, other.time_steps)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels, equal_nan=True)
            and np.array_equal(self.groups, other.groups)
        )
        if not same or (self.truth is None) != (other.truth is None):
            return False
        return self.truth is None or np.array_equal(self.truth, other.truth)


# --------------------------------------------------------------------------
# CSV ingest / export


def _companion(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _header(d: int) -> list[str]:
    return ["id", "time_step", "x", "y", "z", *[f"f{i}" for i in range(d)], "label", "group"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(table: NodeTable, path: str | Path, provenance: str = "") -> None:
    """Write ``table`` as CSV plus a ``<stem>.meta.json`` companion.

    Synthetic hidden truth, if any, goes to ``<stem>.truth.csv`` so that
    :func:`load_csv` can restore the table exactly.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_header(table.d))
        for i in range(table.n):
            label = table.labels[i]
            group = table.groups[i]
            writer.writerow(
                [
                    str(int(table.ids[i])),
                    str(int(table.time_steps[i])),
                    *[_fmt(v) for v in table.positions[i]],
                    *[_fmt(v) for v in table.features[i]],
                    "" if np.isnan(label) else _fmt(label),
                    "" if group == NO_GROUP else str(int(group)),
                ]
            )
    truth_path = _companion(path, ".truth.csv")
    if table.truth is not None:
        with truth_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "truth"])
            for i in range(table.n):
                writer.writerow([str(int(table.ids[i])), _fmt(table.truth[i])])
    elif truth_path.exists():
        truth_path.unlink()
    meta = {
        "d": table.d,
        "n": table.n,
        "n_labeled": table.n_labeled,
        "units": {"position": "mm", "label": "mm"},
        "provenance": provenance,
        "has_truth": table.truth is not None,
    }
    _companion(path, ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _parse_float(cell: str, row_no: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise SchemaError(f"row {row_no}: non-numeric value {cell!r} in column {col}") from None


def _parse_int(cell: str, row_no: int, col: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise SchemaError(f"row {row_no}: non-integer value {cell!r} in column {col}") from None


def load_csv(path: str | Path) -> NodeTable:
    """Read a Dixel-export CSV (``id,time_step,x,y,z,f0..f{d-1},label,group``).

    The header line is optional. Row numbers in error messages are 1-based
    file line numbers. A table without labels loads with a warning; training
    on it raises later.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    ids, steps, pos, feats, labels, groups = [], [], [], [], [], []
    n_cols = None
    with path.open(newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row_no == 1 and row[0].strip() == "id":
                n_cols = len(row)
                if n_cols < 8:
                    raise SchemaError(f"row 1: header needs at least one feature column, got {row}")
                continue
            if n_cols is None:
                n_cols = len(row)
                if n_cols < 8:
                    raise SchemaError(f"row {row_no}: expected at least 8 columns, got {n_cols}")
            if len(row) != n_cols:
                raise SchemaError(
                    f"row {row_no}: expected {n_cols} columns (d={n_cols - 7}), got {len(row)}"
                )
            d = n_cols - 7
            ids.append(_parse_int(row[0], row_no, "id"))
            steps.append(_parse_int(row[1], row_no, "time_step"))
            pos.append([_parse_float(c, row_no, name) for c, name in zip(row[2:5], "xyz")])
            feats.append([_parse_float(c, row_no, f"f{i}") for i, c in enumerate(row[5 : 5 + d])])
            lab, grp = row[5 + d].strip(), row[6 + d].strip()
            labels.append(_parse_float(lab, row_no, "label") if lab else math.nan)
            groups.append(_parse_int(grp, row_no, "group") if grp else NO_GROUP)
    if not ids:
        raise DataError(f"{path}: no data rows")
    truth = None
    truth_path = _companion(path, ".truth.csv")
    if truth_path.exists():
        by_id = {}
        with truth_path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row_no, row in enumerate(reader, start=2):
                by_id[_parse_int(row[0], row_no, "id")] = _parse_float(row[1], row_no, "truth")
        try:
            truth = np.array([by_id[i] for i in ids])
        except KeyError as exc:
            raise DataError(f"{truth_path}: missing truth for node id {exc.args[0]}") from None
    table = NodeTable(
        ids=np.array(ids, dtype=np.int64),
        time_steps=np.array(steps, dtype=np.int64),
        positions=np.array(pos, dtype=np.float64),
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labels, dtype=np.float64),
        groups=np.array(groups, dtype=np.int64),
        truth=truth,
    )
    if not table.has_labels:
        warnings.warn(f"{path}: no labeled nodes", stacklevel=2)
    return table


# --------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_time_steps: int = 40
    points_per_step: int = 25
    d: int = 8
    # Fraction of nodes labeled; 0.061 gives labeled/unlabeled = 0.065.
    label_ratio: float = 0.061
    field: str = "smooth"
    constant: float = 0.01
    noise_sd: float = 0.0005
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_time_steps < 1 or self.points_per_step < 1:
            raise ValueError("n_time_steps and points_per_step must be >= 1")
        if self.d < 2:
            raise ValueError("synthetic data needs d >= 2 (one informative, one noise feature)")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ValueError("label_ratio must lie in (0, 1]")
        if self.field not in FIELDS:
            raise ValueError(f"unknown field {self.field!r}; expected one of {FIELDS}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _contour(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map sweep length ``u`` to (x, y, face) along the U-shaped wall."""
    face = np.minimum((u // FACE_LENGTH).astype(np.int64), 2)
    local = u - face * FACE_LENGTH
    x = np.select([face == 0, face == 1], [local, np.full_like(u, FACE_LENGTH)], FACE_LENGTH - local)
    y = np.select([face == 0, face == 1], [np.zeros_like(u), local], np.full_like(u, FACE_LENGTH))
    return x, y, face


def _sweep_signal(u: np.ndarray) -> np.ndarray:
    return np.sin(2 * np.pi * u / (SWEEP_LENGTH / 2))


def _height_signal(z: np.ndarray) -> np.ndarray:
    return np.sin(2 * np.pi * z / WALL_HEIGHT)


def _field_values(spec: SyntheticSpec, u, pos, feats) -> np.ndarray:
    if spec.field == "constant":
        return np.full(pos.shape[0], spec.constant)
    if spec.field == "linear":
        return 0.005 + 2e-4 * pos[:, 0] - 1e-4 * pos[:, 1] + 5e-4 * pos[:, 2]
    return 0.004 * _sweep_signal(u) + 0.004 * _height_signal(pos[:, 2]) + 0.3 * feats[:, 0]


def generate_synthetic(spec: SyntheticSpec) -> NodeTable:
    """Swept-surface look-alike of a Dixel export with a known shape-error field.

    Time step ``i`` is one vertical strip of the flank-milled wall. Feature 0
    is an engagement-depth proxy in mm; the middle columns are noisy process
    channels (removal rate, spindle current, axis positions, feed); the last
    column is pure noise.
    """
    rng = np.random.default_rng(spec.seed)
    n_steps, per_step = spec.n_time_steps, spec.points_per_step
    n = n_steps * per_step
    steps = np.repeat(np.arange(n_steps, dtype=np.int64), per_step)
    du = SWEEP_LENGTH / n_steps
    dz = WALL_HEIGHT / per_step
    u = (steps + 0.5) * du
    z = (np.tile(np.arange(per_step), n_steps) + 0.5) * dz
    u = u + rng.uniform(-0.05, 0.05, n) * du
    z = z + rng.uniform(-0.05, 0.05, n) * dz
    x, y, face = _contour(np.clip(u, 0.0, SWEEP_LENGTH - 1e-9))
    pos = np.column_stack([x, y, z])

    su, sz = _sweep_signal(u), _height_signal(z)
    channels = [
        0.02 * (1 + 0.5 * su) + rng.normal(0, 0.004, n),
        1 + 0.5 * su + rng.normal(0, 0.3, n),
        1 + 0.5 * sz + rng.normal(0, 0.3, n),
        x / FACE_LENGTH + rng.normal(0, 0.05, n),
        y / FACE_LENGTH + rng.normal(0, 0.05, n),
        z / WALL_HEIGHT + rng.normal(0, 0.05, n),
        1 + rng.normal(0, 0.05, n),
    ]
    while len(channels) < spec.d - 1:
        channels.append(1 + rng.normal(0, 0.1, n))
    feats = np.column_stack(channels[: spec.d - 1] + [rng.normal(0, 1, n)])

    truth = _field_values(spec, u, pos, feats)
    if spec.noise_sd > 0:
        truth = truth + rng.normal(0, spec.noise_sd, n)
    n_labeled = round_half_away(spec.label_ratio * n)
    labeled = rng.choice(n, size=n_labeled, replace=False)
    labels = np.full(n, np.nan)
    labels[labeled] = truth[labeled]
    return NodeTable(
        ids=np.arange(n, dtype=np.int64),
        time_steps=steps,
        positions=pos,
        features=feats,
        labels=labels,
        groups=face,
        truth=truth,
    )


def row_normalize_features(table: NodeTable) -> NodeTable:
    """Divide each feature row by its L1 norm; all-zero rows pass through."""
    feats = np.array(table.features)
    norms = np.abs(feats).sum(axis=1)
    nz = norms > 0
    feats[nz] /= norms[nz, None]
    return replace(table, features=feats)
