"""Three-layer GCN with a linear regression head, trained full-batch with Adam.

Each propagation layer computes ``relu(N @ dropout(H) @ W)`` where ``N`` is the
normalized adjacency; the head maps the last hidden layer to one value per node.
Gradients are derived by hand for this fixed computation.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import NodeTable
from .errors import DataError, DimensionError, NumericalError
from .graphbuild import Graph, check_graph_matches
from .numerics import AdamState, adam_step, dropout, masked_mse, matmul, relu, spmm

INIT_STREAM = 0
DROPOUT_STREAM = 1


@dataclass(frozen=True)
class GcnConfig:
    hidden: int = 20
    n_layers: int = 3
    dropout: float = 0.6
    lr: float = 0.005
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int | None = None

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.n_layers < 1 or self.max_epochs < 1:
            raise ValueError("hidden, n_layers and max_epochs must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class GcnModel:
    d: int
    config: GcnConfig
    seed: int
    params: dict[str, np.ndarray]
    # Network outputs live in standardized target units; predict() maps back
    # with ``z * target_scale + target_shift``.
    target_shift: float = 0.0
    target_scale: float = 1.0

    @property
    def layer_names(self) -> list[str]:
        return [f"W{i}" for i in range(self.config.n_layers)]

    def copy(self) -> GcnModel:
        return GcnModel(
            self.d,
            self.config,
            self.seed,
            {k: v.copy() for k, v in self.params.items()},
            self.target_shift,
            self.target_scale,
        )


@dataclass
class TrainReport:
    losses: list[float]
    epochs: int
    seconds: float
    seed: int
    stopped_early: bool = False


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    drop_masks: list[np.ndarray | None] = field(default_factory=list)
    propagated: list[np.ndarray] = field(default_factory=list)
    relu_masks: list[np.ndarray] = field(default_factory=list)
    hidden: np.ndarray | None = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init(d: int, seed: int, config: GcnConfig | None = None) -> GcnModel:
    """Glorot-uniform weights for every layer and the head; zero head bias."""
    if d < 1:
        raise ValueError("input dimension must be >= 1")
    config = config or GcnConfig()
    rng = np.random.default_rng([seed, INIT_STREAM])
    widths = [d] + [config.hidden] * config.n_layers
    params = {f"W{i}": glorot(rng, widths[i], widths[i + 1]) for i in range(config.n_layers)}
    params["W_mlp"] = glorot(rng, config.hidden, 1)
    params["b_mlp"] = np.zeros(1)
    return GcnModel(d=d, config=config, seed=seed, params=params)


def forward(
    model: GcnModel,
    graph: Graph,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Predictions ``Z`` (n x 1) and the intermediates needed by :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d:
        raise DimensionError(f"model expects {model.d} feature columns, got shape {x.shape}")
    check_graph_matches(graph, x.shape[0])
    norm = graph.norm_adjacency
    cache = ForwardCache()
    h = x
    for name in model.layer_names:
        cache.inputs.append(h)
        h_drop, drop_mask = dropout(h, model.config.dropout, training, rng)
        cache.drop_masks.append(drop_mask)
        p = spmm(norm, h_drop)
        cache.propagated.append(p)
        h, mask = relu(matmul(p, model.params[name]))
        cache.relu_masks.append(mask)
    cache.hidden = h
    z = matmul(h, model.params["W_mlp"]) + model.params["b_mlp"]
    return z, cache


def backward(model: GcnModel, graph: Graph, cache: ForwardCache, dz: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. all parameters, given ``dL/dZ``."""
    grads = {
        "W_mlp": cache.hidden.T @ dz,
        "b_mlp": dz.sum(axis=0),
    }
    dh = dz @ model.params["W_mlp"].T
    norm_t = graph.norm_adjacency.T
    for i in reversed(range(model.config.n_layers)):
        name = model.layer_names[i]
        du = dh * cache.relu_masks[i]
        grads[name] = cache.propagated[i].T @ du
        if i == 0:
            break
        dh = norm_t @ (du @ model.params[name].T)
        if cache.drop_masks[i] is not None:
            dh = dh * cache.drop_masks[i]
    return grads


def _loss_and_grads(model, graph, x, y, mask, training, rng):
    z, cache = forward(model, graph, x, training=training, rng=rng)
    loss, dz = masked_mse(z, y, mask)
    return loss, backward(model, graph, cache, dz)


def train(
    model: GcnModel,
    graph: Graph,
    table: NodeTable,
    train_mask: np.ndarray | None = None,
) -> TrainReport:
    """Full-batch training on the labeled nodes (or ``train_mask``). Mutates ``model``.

    Targets are standardized with the mean and standard deviation of the
    training labels (scale 1 when they are constant), so weight decay acts the
    same whatever the label units.
    """
    mask = table.labeled_mask if train_mask is None else np.asarray(train_mask, dtype=bool)
    if train_mask is not None and np.any(mask & ~table.labeled_mask):
        raise DataError("train_mask selects unlabeled nodes")
    if not mask.any():
        table.require_labels()
        raise DataError("train_mask selects no labeled nodes")
    cfg = model.config
    y_l = table.labels[mask]
    model.target_shift = float(y_l.mean())
    sd = float(y_l.std())
    model.target_scale = sd if sd > 0 else 1.0
    y = np.where(mask, (table.labels - model.target_shift) / model.target_scale, 0.0)
    x = table.features
    rng = np.random.default_rng([model.seed, DROPOUT_STREAM])
    state = AdamState(
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        decay=frozenset(n for n in model.params if n.startswith("W")),
    )
    losses: list[float] = []
    best, since_best = np.inf, 0
    stopped = False
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        try:
            loss, grads = _loss_and_grads(model, graph, x, y, mask, True, rng)
            model.params = adam_step(model.params, grads, state)
        except NumericalError as exc:
            raise NumericalError(f"training diverged at epoch {epoch}: {exc}") from exc
        losses.append(loss)
        if cfg.patience is not None:
            if loss < best:
                best, since_best = loss, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    stopped = True
                    break
    return TrainReport(
        losses=losses,
        epochs=len(losses),
        seconds=time.perf_counter() - start,
        seed=model.seed,
        stopped_early=stopped,
    )


def predict(model: GcnModel, graph: Graph, x: np.ndarray) -> np.ndarray:
    """Eval-mode predictions for every node in label units, as a length-n vector."""
    z, _ = forward(model, graph, x, training=False)
    return z.reshape(-1) * model.target_scale + model.target_shift


# --------------------------------------------------------------------------
# Checkpoints


def to_dict(model: GcnModel) -> dict:
    return {
        "kind": "gcn",
        "d": model.d,
        "seed": model.seed,
        "config": asdict(model.config),
        "target_shift": model.target_shift,
        "target_scale": model.target_scale,
        "params": {
            name: {"shape": list(p.shape), "data": [float(v) for v in p.ravel()]}
            for name, p in model.params.items()
        },
    }


def from_dict(doc: dict) -> GcnModel:
    if doc.get("kind") != "gcn":
        raise DataError(f"not a GCN checkpoint (kind={doc.get('kind')!r})")
    params = {
        name: np.array(p["data"], dtype=np.float64).reshape(p["shape"])
        for name, p in doc["params"].items()
    }
    return GcnModel(
        d=int(doc["d"]),
        config=GcnConfig(**doc["config"]),
        seed=int(doc["seed"]),
        params=params,
        target_shift=float(doc.get("target_shift", 0.0)),
        target_scale=float(doc.get("target_scale", 1.0)),
    )


def save(model: GcnModel, path: str | Path, extra: dict | None = None) -> None:
    doc = to_dict(model)
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load(path: str | Path) -> GcnModel:
    return from_dict(json.loads(Path(path).read_text()))
