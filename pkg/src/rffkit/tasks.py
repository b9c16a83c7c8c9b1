"""Task losses, the EDA distance head and open-set scoring.

Class labels are 1-based (``1..V``) throughout, matching the dataset labels.
All losses are averaged over the batch and return their gradient with
respect to the model output they consume.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, SpecError
from .nn import softmax

SEI, EDA, RFEC = "SEI", "EDA", "RFEC"
LOSS_FOR_KIND = {SEI: "cross_entropy", EDA: "contrastive", RFEC: "mse"}
DEFAULT_BATCH = {SEI: 512, EDA: 128, RFEC: 128}


@dataclass
class TaskSpec:
    kind: str
    loss: str | None = None
    margin: float = 1.0
    distance: str = "euclidean"
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int | None = None
    weight_decay: float = 5e-4
    weight: float = 1.0  # alpha_t in a multi-task objective
    name: str | None = None

    def __post_init__(self):
        if self.kind not in LOSS_FOR_KIND:
            raise SpecError(f"unknown task kind {self.kind!r}")
        if self.loss is None:
            self.loss = LOSS_FOR_KIND[self.kind]
        if self.loss != LOSS_FOR_KIND[self.kind]:
            raise SpecError(f"{self.kind} uses the {LOSS_FOR_KIND[self.kind]} loss, not {self.loss}")
        if self.margin <= 0:
            raise SpecError("margin must be > 0")
        if self.distance not in ("euclidean", "cosine"):
            raise SpecError("distance must be 'euclidean' or 'cosine'")
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[self.kind]
        if self.name is None:
            self.name = self.kind


def check_task_weights(tasks) -> None:
    total = sum(t.weight for t in tasks)
    if abs(total - 1.0) > 1e-12:
        raise SpecError(f"task weights must sum to 1, got {total!r}")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite values reached a loss function")


def loss_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]``; labels are 1-based."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    _finite(logits)
    B, V = logits.shape
    if labels.shape != (B,):
        raise SpecError("one label per logit row required")
    if labels.min() < 1 or labels.max() > V:
        raise SpecError(f"labels must lie in 1..{V}")
    idx = labels.astype(np.int64) - 1
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(B), idx]))
    grad = softmax(logits, axis=1)
    grad[np.arange(B), idx] -= 1.0
    return loss, grad / B


def loss_contrastive(z1, z2, y, margin: float = 1.0):
    """Pair loss on squared Euclidean distance.

    Matched pairs (y=1) pay ``d^2``; unmatched pairs (y=0) pay
    ``max(0, margin - d^2)``. The hinge uses subgradient 0 at its kink.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if margin <= 0:
        raise SpecError("margin must be > 0")
    if z1.shape != z2.shape or z1.ndim != 2 or y.shape != (z1.shape[0],):
        raise SpecError("z1, z2 must be (B, d) and y must be (B,)")
    _finite(z1, z2)
    B = z1.shape[0]
    diff = z1 - z2
    d2 = np.sum(diff * diff, axis=1)
    active = (margin - d2) > 0
    per = y * d2 + (1 - y) * np.where(active, margin - d2, 0.0)
    coef = y - (1 - y) * active  # d(per)/d(d2)
    g1 = (2.0 / B) * coef[:, None] * diff
    return float(per.mean()), g1, -g1


def loss_mse(x_hat, x):
    """Batch mean of the per-sample squared L2 error (summed over features)."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise SpecError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    _finite(x_hat, x)
    B = x.shape[0] if x.ndim else 1
    r = x_hat - x
    return float(np.sum(r * r) / B), 2.0 * r / B


def eda_distance(z1, z2, metric: str = "euclidean"):
    """Row-wise distance between embeddings (scalar for 1-D inputs)."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise SpecError("embedding shapes differ")
    if metric == "euclidean":
        return np.sqrt(np.sum((z1 - z2) ** 2, axis=-1))
    if metric == "cosine":
        n1 = np.linalg.norm(z1, axis=-1)
        n2 = np.linalg.norm(z2, axis=-1)
        if np.any(n1 == 0) or np.any(n2 == 0):
            raise SpecError("cosine distance is undefined for a zero vector")
        return 1.0 - np.sum(z1 * z2, axis=-1) / (n1 * n2)
    raise SpecError(f"unknown metric {metric!r}")


def eda_predict(z1, z2, threshold: float, metric: str = "euclidean"):
    """1 (match) iff the distance is strictly below ``threshold``."""
    if threshold <= 0:
        raise SpecError("threshold must be > 0")
    return (eda_distance(z1, z2, metric) < threshold).astype(np.int64)


def osr_score_msp(logits, threshold: float):
    """Open-set score: 0 (known) when the max softmax probability >= threshold, else 1."""
    if not 0 < threshold < 1:
        raise SpecError("threshold must lie in (0, 1)")
    p = softmax(logits, axis=-1)
    return (p.max(axis=-1) < threshold).astype(np.int64)
