"""Balanced pair datasets for emitter data association.

Pairs are drawn from a labelled burst set per class cell: the diagonal cells
(same emitter) share ``alpha * gamma`` pairs equally and the ``V(V-1)/2``
off-diagonal cells share the rest. Cells are unordered (``j <= k``) so the
total is exactly ``gamma``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError, SpecError


def pair_label(y_i: int, y_j: int) -> int:
    return int(y_i == y_j)


def matched_ratio(V: int) -> float:
    """Matched-to-unmatched class pairing ratio, ``2 / (V - 1)``."""
    if V < 2:
        raise SpecError("need at least two classes")
    return 2.0 / (V - 1)


@dataclass
class PairCountPlan:
    V: int
    alpha: float
    gamma: int
    counts: np.ndarray  # (V, V) upper-triangular; index i is the i-th class in sorted order

    @property
    def matched(self) -> int:
        return int(np.trace(self.counts))

    @property
    def unmatched(self) -> int:
        return int(self.counts.sum()) - self.matched

    def cells(self):
        for i in range(self.V):
            for j in range(i, self.V):
                yield i, j, int(self.counts[i, j])


def plan_counts(V: int, alpha: float, gamma: int) -> PairCountPlan:
    """Integer pair counts per unordered class cell summing to ``gamma``.

    Targets are floored, then the remainder goes one pair at a time to the
    cells with the largest fractional parts (ties by (i, j) order).
    """
    if V < 2:
        raise SpecError("need at least two classes")
    if not 0 < alpha <= 1:
        raise SpecError("alpha must lie in (0, 1]")
    if int(gamma) != gamma or gamma < 1:
        raise SpecError("gamma must be a positive integer")
    gamma = int(gamma)
    a = Fraction(alpha)
    diag = a * gamma / V
    off = 2 * (1 - a) * gamma / (V * (V - 1))
    targets = {(i, j): (diag if i == j else off) for i in range(V) for j in range(i, V)}
    counts = np.zeros((V, V), dtype=np.int64)
    for (i, j), t in targets.items():
        counts[i, j] = math.floor(t)
    remainder = gamma - int(counts.sum())
    order = sorted(targets, key=lambda c: (-(targets[c] - math.floor(targets[c])), c))
    for c in order[:remainder]:
        counts[c] += 1
    return PairCountPlan(V, float(alpha), gamma, counts)


@dataclass
class PairDataset:
    entries: np.ndarray  # (n, 3) int64 rows [i1, i2, y]; indices into the source dataset
    source: str = ""
    alpha: float | None = None
    gamma: int | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.entries.shape[0]

    @property
    def i1(self):
        return self.entries[:, 0]

    @property
    def i2(self):
        return self.entries[:, 1]

    @property
    def y(self):
        return self.entries[:, 2]

    def to_json(self) -> dict:
        return {"source": self.source, "alpha": self.alpha, "gamma": self.gamma, "seed": self.seed,
                "entries": self.entries.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "PairDataset":
        try:
            d = json.loads(Path(path).read_text())
            entries = np.asarray(d["entries"], dtype=np.int64).reshape(-1, 3)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read pair file {path}: {exc}") from exc
        return cls(entries, d.get("source", ""), d.get("alpha"), d.get("gamma"), d.get("seed"))


def labels_hash(labels) -> str:
    return hashlib.sha256(np.asarray(labels, dtype=np.int64).tobytes()).hexdigest()[:16]


def build_pair_dataset(labels, alpha: float, gamma: int, seed: int, source: str = "") -> PairDataset:
    """Sample pairs of burst indices according to :func:`plan_counts`.

    ``labels`` are the per-burst emitter labels of the source dataset (a
    ``LabeledDataset`` is accepted too). Each pair draws its first burst from
    class j and its second from class k with the first excluded; pairs are
    drawn independently, so a pair may repeat.
    """
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise SpecError("pair sampling needs at least two classes")
    members = [np.flatnonzero(labels == c) for c in classes]
    plan = plan_counts(classes.size, alpha, gamma)
    rng = np.random.default_rng(seed)
    rows = []
    for j, k, n in plan.cells():
        if n == 0:
            continue
        a, b = members[j], members[k]
        if j == k and a.size < 2:
            raise SpecError(f"class {int(classes[j])} needs at least 2 bursts for matched pairs")
        first = a[rng.integers(0, a.size, size=n)]
        if j == k:
            # draw from the class minus the first pick
            off = rng.integers(0, a.size - 1, size=n)
            pos = np.searchsorted(a, first)
            second = a[off + (off >= pos)]
        else:
            second = b[rng.integers(0, b.size, size=n)]
        y = np.full(n, pair_label(classes[j], classes[k]))
        rows.append(np.stack([first, second, y], axis=1))
    entries = np.concatenate(rows).astype(np.int64)
    return PairDataset(entries, source or labels_hash(labels), float(alpha), int(gamma), seed)
