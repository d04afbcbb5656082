"""Graph construction from node tables.

Edges are binary and undirected. Self-loops never live in ``adjacency``;
they are added when the propagation matrix is built by :func:`normalize`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .dataset import NodeTable, round_half_away
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class Knn:
    k: int

    def __str__(self) -> str:
        return f"knn:{self.k}"


@dataclass(frozen=True)
class Temporal:
    t: int

    def __str__(self) -> str:
        return f"temporal:{self.t}"


@dataclass(frozen=True)
class Hybrid:
    k: int
    t: int

    def __str__(self) -> str:
        return f"hybrid:{self.k},{self.t}"


ConnectionStrategy = Union[Knn, Temporal, Hybrid]


def parse_strategy(text: str) -> ConnectionStrategy:
    """Parse ``knn:K``, ``temporal:T`` or ``hybrid:K,T``."""
    kind, _, arg = text.strip().partition(":")
    try:
        values = [int(v) for v in arg.split(",")] if arg else []
    except ValueError:
        raise ConfigError(f"bad strategy {text!r}") from None
    if any(v < 1 for v in values):
        raise ConfigError(f"strategy parameters must be positive: {text!r}")
    if kind == "knn" and len(values) == 1:
        return Knn(values[0])
    if kind == "temporal" and len(values) == 1:
        return Temporal(values[0])
    if kind == "hybrid" and len(values) == 2:
        return Hybrid(*values)
    raise ConfigError(f"bad strategy {text!r}; expected knn:K, temporal:T or hybrid:K,T")


@dataclass(frozen=True, eq=False)
class Graph:
    """Node set plus symmetric binary CSR adjacency.

    Row ``i`` of every matrix corresponds to ``node_ids[i]`` of the table the
    graph was built from.
    """

    node_ids: np.ndarray
    adjacency: sp.csr_matrix
    norm_adjacency: sp.csr_matrix | None = None
    strategy: str = ""

    @property
    def n(self) -> int:
        return int(self.node_ids.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    def edges(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array of row indices with i < j, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        pairs = np.column_stack([coo.row, coo.col]).astype(np.int64)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else pairs.reshape(0, 2)

    def edge_set(self) -> set[tuple[int, int]]:
        """Edges in node-id space, each as ``(min_id, max_id)``."""
        out = set()
        for i, j in self.edges():
            a, b = int(self.node_ids[i]), int(self.node_ids[j])
            out.add((a, b) if a < b else (b, a))
        return out


def _adjacency_from_pairs(n: int, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    a = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def _k_nearest(
    ref: np.ndarray,
    ref_ids: np.ndarray,
    queries: np.ndarray,
    k: int,
    self_rows: np.ndarray | None = None,
) -> np.ndarray:
    """Row indices (into ``ref``) of the k nearest points to each query.

    Ties in squared distance go to the lower id. ``self_rows[i]`` is excluded
    from the candidates of query ``i`` when given. The kd-tree only proposes
    a candidate ball; ranking uses exact squared distances.
    """
    tree = cKDTree(ref)
    kq = k + (1 if self_rows is not None else 0)
    dist, _ = tree.query(queries, k=kq)
    dist = dist.reshape(len(queries), kq)
    radius = dist[:, -1] * (1 + 1e-9) + 1e-12
    balls = tree.query_ball_point(queries, radius)
    out = np.empty((len(queries), k), dtype=np.int64)
    for i, cand in enumerate(balls):
        cand = np.asarray(cand, dtype=np.int64)
        if self_rows is not None:
            cand = cand[cand != self_rows[i]]
        d2 = ((ref[cand] - queries[i]) ** 2).sum(axis=1)
        order = np.lexsort((ref_ids[cand], d2))
        out[i] = cand[order[:k]]
    return out


def connect_knn(table: NodeTable, k: int) -> Graph:
    """Link every node to its ``k`` geometrically nearest nodes, then symmetrize."""
    n = table.n
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ConfigError(f"k={k} needs at least k+1 nodes, table has {n}")
    rows = np.arange(n)
    nbrs = _k_nearest(table.positions, table.ids, table.positions, k, self_rows=rows)
    adj = _adjacency_from_pairs(n, np.repeat(rows, k), nbrs.ravel())
    return Graph(node_ids=table.ids, adjacency=adj, strategy=str(Knn(k)))


def temporal_back_edges(table: NodeTable, t: int) -> np.ndarray:
    """Directed (node, partner) pairs before symmetrization.

    Each node at step ``s`` gets one partner from every nonempty step
    ``s - o`` for ``o`` in ``1..t``: the nearest node of that step in space.
    """
    if t < 1:
        raise ConfigError(f"t must be >= 1, got {t}")
    steps = table.time_steps
    by_step = {int(s): np.flatnonzero(steps == s) for s in np.unique(steps)}
    pairs = []
    for s, rows in by_step.items():
        for o in range(1, t + 1):
            prev = by_step.get(s - o)
            if prev is None:
                continue
            nearest = _k_nearest(table.positions[prev], table.ids[prev], table.positions[rows], 1)
            pairs.append(np.column_stack([rows, prev[nearest[:, 0]]]))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(pairs).astype(np.int64)


def connect_temporal(table: NodeTable, t: int) -> Graph:
    pairs = temporal_back_edges(table, t)
    adj = _adjacency_from_pairs(table.n, pairs[:, 0], pairs[:, 1])
    return Graph(node_ids=table.ids, adjacency=adj, strategy=str(Temporal(t)))


def connect_hybrid(table: NodeTable, k: int, t: int) -> Graph:
    a = connect_knn(table, k).adjacency + connect_temporal(table, t).adjacency
    a = sp.csr_matrix(a)
    a.data[:] = 1.0
    a.sort_indices()
    return Graph(node_ids=table.ids, adjacency=a, strategy=str(Hybrid(k, t)))


def connect(table: NodeTable, strategy: ConnectionStrategy) -> Graph:
    if isinstance(strategy, Knn):
        return connect_knn(table, strategy.k)
    if isinstance(strategy, Temporal):
        return connect_temporal(table, strategy.t)
    if isinstance(strategy, Hybrid):
        return connect_hybrid(table, strategy.k, strategy.t)
    raise ConfigError(f"unknown strategy {strategy!r}")


def normalize(graph: Graph) -> Graph:
    """Attach D^-1/2 (A + I) D^-1/2, with D the degree matrix of A + I."""
    n = graph.n
    a_tilde = (graph.adjacency + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    coo = a_tilde.tocoo()
    vals = 1.0 / np.sqrt(deg[coo.row] * deg[coo.col])
    norm = sp.csr_matrix((vals, (coo.row, coo.col)), shape=(n, n))
    norm.sort_indices()
    return replace(graph, norm_adjacency=norm)


def build_graph(table: NodeTable, strategy: ConnectionStrategy) -> Graph:
    return normalize(connect(table, strategy))


def filter_nodes(table: NodeTable, filter_pct: float, min_per_step: int, seed: int) -> NodeTable:
    """Randomly thin each time step while keeping every labeled node.

    Per step, ``round(size * pct / 100)`` unlabeled nodes are dropped, capped so
    that the step keeps at least ``min(min_per_step, size)`` nodes.
    """
    if not 0 <= filter_pct <= 100:
        raise ConfigError(f"filter_pct must lie in [0, 100], got {filter_pct}")
    if min_per_step < 0:
        raise ConfigError("min_per_step must be >= 0")
    if filter_pct == 0:
        return table
    rng = np.random.default_rng(seed)
    labeled = table.labeled_mask
    keep = np.ones(table.n, dtype=bool)
    for s in np.unique(table.time_steps):
        rows = np.flatnonzero(table.time_steps == s)
        size = len(rows)
        target = round_half_away(size * filter_pct / 100.0)
        unlabeled = rows[~labeled[rows]]
        cap = min(len(unlabeled), size - min(min_per_step, size))
        n_drop = max(0, min(target, cap))
        if n_drop:
            keep[rng.choice(unlabeled, size=n_drop, replace=False)] = False
    return table.subset(np.flatnonzero(keep))


def write_edge_list(graph: Graph, path: str | Path, seed: int | None = None) -> None:
    """Dump ``i j`` node-id pairs, one per line, plus a ``<stem>.json`` sidecar."""
    path = Path(path)
    lines = [f"{graph.node_ids[i]} {graph.node_ids[j]}" for i, j in graph.edges()]
    path.write_text("".join(line + "\n" for line in lines))
    sidecar = {"n": graph.n, "n_edges": graph.n_edges, "strategy": graph.strategy, "seed": seed}
    path.with_name(path.stem + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def check_graph_matches(graph: Graph, n_rows: int) -> None:
    if graph.norm_adjacency is None:
        raise DimensionError("graph is not normalized; call normalize() first")
    if graph.n != n_rows:
        raise DimensionError(f"graph has {graph.n} nodes but features have {n_rows} rows")
