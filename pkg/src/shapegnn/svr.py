"""Epsilon-insensitive support vector regression with an RBF kernel.

The dual is solved with SMO over the stacked variables ``beta = [alpha, alpha*]``
(minimize ``0.5 beta'Q beta + p'beta`` s.t. ``y'beta = 0``, ``0 <= beta <= C``),
choosing working pairs by maximal violation with second-order selection.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, NumericalError

TAU = 1e-12


def rbf_kernel(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    diff = x - y
    return float(np.exp(-gamma * np.dot(diff, diff)))


def rbf_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class SvrModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    gamma: float
    C: float
    epsilon: float
    objective: float = 0.0
    kkt_violation: float = 0.0
    n_iter: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": "svr",
            "d": int(self.support_vectors.shape[1]),
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "bias": self.bias,
            "gamma": self.gamma,
            "C": self.C,
            "epsilon": self.epsilon,
            "objective": self.objective,
            "kkt_violation": self.kkt_violation,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SvrModel:
        if doc.get("kind") != "svr":
            raise DataError(f"not an SVR checkpoint (kind={doc.get('kind')!r})")
        d = int(doc["d"])
        return cls(
            support_vectors=np.array(doc["support_vectors"], dtype=np.float64).reshape(-1, d),
            dual_coef=np.array(doc["dual_coef"], dtype=np.float64),
            bias=float(doc["bias"]),
            gamma=float(doc["gamma"]),
            C=float(doc["C"]),
            epsilon=float(doc["epsilon"]),
            objective=float(doc["objective"]),
            kkt_violation=float(doc["kkt_violation"]),
            n_iter=int(doc["n_iter"]),
        )

    @property
    def d(self) -> int:
        return int(self.support_vectors.shape[1])


@dataclass
class DualSolution:
    """Raw SMO output, kept for KKT / objective checks."""

    beta: np.ndarray
    grad: np.ndarray
    rho: float
    objective: float
    violation: float
    n_iter: int


def _violation(beta, grad, y, C):
    up = ((y > 0) & (beta < C)) | ((y < 0) & (beta > 0))
    low = ((y > 0) & (beta > 0)) | ((y < 0) & (beta < C))
    minus_yg = -y * grad
    g_max = minus_yg[up].max() if up.any() else -np.inf
    g_max2 = (-minus_yg[low]).max() if low.any() else -np.inf
    return up, low, minus_yg, g_max, g_max2


def solve_dual(
    kernel: np.ndarray, targets: np.ndarray, C: float, epsilon: float, tol: float = 1e-3, max_iter: int = 100_000
) -> DualSolution:
    n = len(targets)
    y = np.concatenate([np.ones(n), -np.ones(n)])
    p = np.concatenate([epsilon - targets, epsilon + targets])
    idx = np.concatenate([np.arange(n), np.arange(n)])
    qd = np.diag(kernel)[idx]
    beta = np.zeros(2 * n)
    grad = p.copy()

    def q_col(t):
        return y * y[t] * kernel[idx, idx[t]]

    it = 0
    while True:
        up, low, minus_yg, g_max, g_max2 = _violation(beta, grad, y, C)
        violation = g_max + g_max2
        if violation < tol:
            break
        if it >= max_iter:
            raise NumericalError(f"SMO did not converge in {max_iter} iterations (violation {violation:.3g})")
        it += 1
        i = int(np.flatnonzero(up)[np.argmax(minus_yg[up])])
        qi = q_col(i)
        cand = np.flatnonzero(low)
        b = g_max - minus_yg[cand]
        a = qd[i] + qd[cand] - 2.0 * y[i] * y[cand] * qi[cand]
        a = np.where(a > 0, a, TAU)
        score = np.where(b > 0, -(b * b) / a, np.inf)
        j = int(cand[np.argmin(score)])
        qj = q_col(j)
        ai, aj = beta[i], beta[j]
        if y[i] != y[j]:
            quad = qd[i] + qd[j] + 2.0 * qi[j]
            quad = quad if quad > 0 else TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            bi, bj = ai + delta, aj + delta
            if diff > 0:
                if bj < 0:
                    bj, bi = 0.0, diff
            elif bi < 0:
                bi, bj = 0.0, -diff
            if diff > 0:
                if bi > C:
                    bi, bj = C, C - diff
            elif bj > C:
                bj, bi = C, C + diff
        else:
            quad = qd[i] + qd[j] - 2.0 * qi[j]
            quad = quad if quad > 0 else TAU
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            bi, bj = ai - delta, aj + delta
            if total > C:
                if bi > C:
                    bi, bj = C, total - C
            elif bj < 0:
                bj, bi = 0.0, total
            if total > C:
                if bj > C:
                    bj, bi = C, total - C
            elif bi < 0:
                bi, bj = 0.0, total
        beta[i], beta[j] = bi, bj
        grad += qi * (bi - ai) + qj * (bj - aj)

    yg = y * grad
    at_upper = beta >= C
    at_lower = beta <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        rho = float(yg[free].mean())
    else:
        ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2)
    objective = float(0.5 * beta @ (grad + p))
    return DualSolution(beta=beta, grad=grad, rho=rho, objective=objective, violation=float(violation), n_iter=it)


def fit(
    x: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    gamma: float = 1.0,
    epsilon: float = 0.01,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> SvrModel:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"x {x.shape} and y {y.shape} disagree")
    if len(y) < 2:
        raise DataError("SVR needs at least 2 labeled samples")
    if C <= 0 or epsilon < 0 or gamma <= 0:
        raise ValueError("require C > 0, gamma > 0, epsilon >= 0")
    n = len(y)
    sol = solve_dual(rbf_matrix(x, x, gamma), y, C, epsilon, tol=tol, max_iter=max_iter)
    coef = sol.beta[:n] - sol.beta[n:]
    sv = coef != 0
    return SvrModel(
        support_vectors=x[sv],
        dual_coef=coef[sv],
        bias=-sol.rho,
        gamma=gamma,
        C=C,
        epsilon=epsilon,
        objective=sol.objective,
        kkt_violation=sol.violation,
        n_iter=sol.n_iter,
    )


def predict(model: SvrModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d:
        raise DimensionError(f"model expects {model.d} feature columns, got shape {x.shape}")
    if len(model.dual_coef) == 0:
        return np.full(x.shape[0], model.bias)
    return rbf_matrix(x, model.support_vectors, model.gamma) @ model.dual_coef + model.bias


# --------------------------------------------------------------------------
# Grid search with k-fold cross-validation


@dataclass(frozen=True)
class GridSpec:
    C: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    gamma: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    epsilon: tuple[float, ...] = (0.001, 0.01, 0.1)
    folds: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.C and self.gamma and self.epsilon):
            raise ValueError("grid lists must be nonempty")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")


@dataclass
class CvRow:
    C: float
    gamma: float
    epsilon: float
    fold: int
    mae_mm: float


@dataclass
class CvResult:
    best: dict
    best_mae: float
    rows: list[CvRow] = field(default_factory=list)

    def cell_means(self) -> list[tuple[tuple[float, float, float], float]]:
        cells: dict[tuple, list[float]] = {}
        for r in self.rows:
            cells.setdefault((r.C, r.gamma, r.epsilon), []).append(r.mae_mm)
        return [(k, float(np.mean(v))) for k, v in cells.items()]


def fold_assignment(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``folds`` near-equal parts."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def grid_search_cv(x: np.ndarray, y: np.ndarray, spec: GridSpec | None = None, tol: float = 1e-3) -> CvResult:
    """Mean validation MAE per (C, gamma, epsilon); ties keep the first cell in grid order."""
    spec = spec or GridSpec()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(y)
    parts = fold_assignment(n, spec.folds, spec.seed)
    for k, part in enumerate(parts):
        if n - len(part) < 2 or len(part) == 0:
            raise DataError(f"fold {k}: {n} labeled samples cannot fill {spec.folds} folds")
    rows: list[CvRow] = []
    best_cell, best_mae = None, np.inf
    for C, gamma, eps in itertools.product(spec.C, spec.gamma, spec.epsilon):
        maes = []
        for k, held in enumerate(parts):
            train = np.setdiff1d(np.arange(n), held)
            model = fit(x[train], y[train], C=C, gamma=gamma, epsilon=eps, tol=tol)
            mae = float(np.mean(np.abs(y[held] - predict(model, x[held]))))
            rows.append(CvRow(C, gamma, eps, k, mae))
            maes.append(mae)
        cell_mae = float(np.mean(maes))
        if cell_mae < best_mae:
            best_cell, best_mae = (C, gamma, eps), cell_mae
    return CvResult(best=dict(zip(("C", "gamma", "epsilon"), best_cell)), best_mae=best_mae, rows=rows)


def write_cv_table(result: CvResult, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["C", "gamma", "epsilon", "fold", "mae_mm"])
        for r in result.rows:
            w.writerow([repr(r.C), repr(r.gamma), repr(r.epsilon), r.fold, repr(r.mae_mm)])
