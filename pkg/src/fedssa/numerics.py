"""Dense float64 kernels with hand-written backward passes.

A network here is a list of ``(W, b)`` pairs with ``W`` stored out x in.
ReLU follows every layer except the last; the activation feeding the last
layer is the representation. Everything is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError

Layer = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise DimensionError(f"batch inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or len(self.labels) != self.inputs.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    return m


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``x @ W.T + b`` with ``b`` broadcast over rows."""
    x = as_matrix(x)
    W = as_matrix(W)
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} columns, weight expects {W.shape[1]}")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match {W.shape[0]} outputs")
    return x @ W.T + b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but {labels.shape} labels")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    probs = np.exp(z - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return max(loss, 0.0), probs / n


def network_forward(layers: Sequence[Layer], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the full network; returns ``(representation, logits)``."""
    h = as_matrix(x)
    for W, b in layers[:-1]:
        h = relu_forward(linear_forward(h, W, b))
    W, b = layers[-1]
    return h, linear_forward(h, W, b)


def _prototype_penalty(rep, labels, prototypes, lam):
    """Squared-L2 pull of each representation toward its class prototype.

    Samples whose class has no prototype contribute zero. Returns the
    penalty (already scaled by ``lam``) and its gradient w.r.t. ``rep``.
    """
    n = rep.shape[0]
    diff = np.zeros_like(rep)
    for s, proto in sorted(prototypes.items()):
        mask = labels == s
        if mask.any():
            diff[mask] = rep[mask] - proto
    penalty = lam * float(np.sum(diff * diff)) / n
    return penalty, (2.0 * lam / n) * diff


def backward(
    layers: Sequence[Layer],
    batch: Batch,
    prototypes: dict[int, np.ndarray] | None = None,
    lam: float = 0.0,
) -> tuple[float, list[Layer]]:
    """Mean batch loss and exact gradients for every ``(W, b)``.

    With ``prototypes`` and ``lam > 0`` the loss gains
    ``lam * mean_i ||rep_i - prototypes[y_i]||^2``.
    """
    x = as_matrix(batch.inputs)
    if x.shape[1] != layers[0][0].shape[1]:
        raise DimensionError(
            f"batch has {x.shape[1]} features, model expects {layers[0][0].shape[1]}"
        )
    labels = np.asarray(batch.labels, dtype=np.int64)

    acts = [x]
    pre = []
    h = x
    for W, b in layers[:-1]:
        z = linear_forward(h, W, b)
        pre.append(z)
        h = relu_forward(z)
        acts.append(h)
    W_last, b_last = layers[-1]
    logits = linear_forward(h, W_last, b_last)
    loss, delta = softmax_xent(logits, labels)

    grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
    grads[-1] = (delta.T @ acts[-1], delta.sum(axis=0))
    d_h = delta @ W_last

    if prototypes and lam > 0.0:
        penalty, d_rep = _prototype_penalty(acts[-1], labels, prototypes, lam)
        loss += penalty
        d_h = d_h + d_rep

    for i in range(len(layers) - 2, -1, -1):
        d_z = d_h * (pre[i] > 0.0)
        grads[i] = (d_z.T @ acts[i], d_z.sum(axis=0))
        if i:
            d_h = d_z @ layers[i][0]
    return loss, grads


def batch_loss(layers, batch, prototypes=None, lam=0.0) -> float:
    rep, logits = network_forward(layers, batch.inputs)
    loss, _ = softmax_xent(logits, batch.labels)
    if prototypes and lam > 0.0:
        loss += _prototype_penalty(rep, np.asarray(batch.labels), prototypes, lam)[0]
    return loss


def sgd_step(layers: Sequence[Layer], grads: Sequence[Layer], eta: float) -> list[Layer]:
    """Plain SGD: ``p <- p - eta * g``. Returns new arrays."""
    if len(layers) != len(grads):
        raise DimensionError(f"{len(layers)} layers but {len(grads)} gradients")
    out = []
    for (W, b), (gW, gb) in zip(layers, grads):
        if W.shape != gW.shape or b.shape != gb.shape:
            raise DimensionError(f"gradient shapes {gW.shape}/{gb.shape} vs {W.shape}/{b.shape}")
        out.append((W - eta * gW, b - eta * gb))
    return out


@dataclass
class GradCheckReport:
    # (layer index, "W" or "b", flat index, analytic, numeric, relative error)
    entries: list[tuple[int, str, int, float, float, float]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((e[-1] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    layers: Sequence[Layer],
    batch: Batch,
    n_coords: int = 20,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    grads: Sequence[Layer] | None = None,
    coords: Sequence[tuple[int, str, int]] | None = None,
    prototypes: dict[int, np.ndarray] | None = None,
    lam: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``grads`` overrides the analytic gradients (used for fault injection);
    ``coords`` overrides the random choice of coordinates.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    layers = [(W.copy(), b.copy()) for W, b in layers]
    if grads is None:
        _, grads = backward(layers, batch, prototypes, lam)

    if coords is None:
        pool = [(i, name, j) for i, (W, b) in enumerate(layers)
                for name, arr in (("W", W), ("b", b)) for j in range(arr.size)]
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(pool), size=min(n_coords, len(pool)), replace=False)
        coords = [pool[p] for p in sorted(pick)]

    report = GradCheckReport(tolerance=tolerance)
    for i, name, j in coords:
        arr = layers[i][0] if name == "W" else layers[i][1]
        flat = arr.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        plus = batch_loss(layers, batch, prototypes, lam)
        flat[j] = orig - epsilon
        minus = batch_loss(layers, batch, prototypes, lam)
        flat[j] = orig
        numeric = (plus - minus) / (2.0 * epsilon)
        g = grads[i][0] if name == "W" else grads[i][1]
        analytic = float(np.asarray(g).reshape(-1)[j])
        report.entries.append((i, name, j, analytic, numeric, relative_error(analytic, numeric)))
    return report
