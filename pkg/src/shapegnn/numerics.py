"""Numerical substrate for the GCN: products, activations, loss and Adam.

Dense matrices are float64 ``numpy`` arrays; sparse operands are SciPy CSR
matrices. Every operation that could produce NaN/Inf checks its output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericalError


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def spmm(s: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``S @ X``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"dense operand must be 2-D, got shape {x.shape}")
    if s.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot multiply {s.shape} by {x.shape}")
    return check_finite(np.asarray(s @ x), "spmm result")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``max(0, x)`` and the 0/1 mask used by the backward pass.

    The mask is 0 where ``x == 0``, so the subgradient at the kink is 0.
    """
    mask = (x > 0).astype(np.float64)
    return x * mask, mask


def dropout(
    x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the scaled keep-mask (None if identity)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def masked_mse(z: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over labeled rows and its gradient w.r.t. ``z`` (n x 1)."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if z.shape != y.shape or z.shape != mask.shape:
        raise DimensionError(f"shape mismatch: z {z.shape}, y {y.shape}, mask {mask.shape}")
    n_l = int(mask.sum())
    if n_l == 0:
        raise ValueError("masked_mse needs at least one labeled node")
    diff = np.where(mask, z - np.where(mask, y, 0.0), 0.0)
    loss = float(np.dot(diff, diff) / n_l)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, (2.0 / n_l * diff).reshape(-1, 1)


@dataclass
class AdamState:
    """Adam moments for a dict of named parameters.

    Weight decay is added to the gradient (``g + wd * theta``) for every
    parameter named in ``decay``; by default that is all of them.
    """

    lr: float = 0.005
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: frozenset[str] | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; advances ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient {name}: shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = theta
            continue
        if state.weight_decay and (state.decay is None or name in state.decay):
            g = g + state.weight_decay * theta
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = theta - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return out
