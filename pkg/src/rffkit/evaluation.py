"""Metrics and analyses over frozen models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .errors import SpecError
from .models import Model
from .pairs import PairDataset, build_pair_dataset
from .synth import LabeledDataset, derive_seed, noisy_copy
from .tasks import eda_distance, osr_score_msp

EMBED_CHUNK = 512


# -- classification -------------------------------------------------------------

@dataclass
class MetricsReport:
    classes: np.ndarray
    confusion: np.ndarray  # rows = truth, cols = prediction
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    absent: list = field(default_factory=list)  # classes never seen in the truth

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    def row(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.macro_f1,
                "precision": self.macro_precision, "recall": self.macro_recall}


def classification_metrics(preds, labels, classes=None) -> MetricsReport:
    """Accuracy, macro precision/recall/F1 and the confusion matrix.

    Undefined ratios (no predictions, or a class absent from the truth) count
    as 0; absent classes are listed in ``report.absent``.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise SpecError("preds and labels must be 1-D and of equal length")
    if preds.size == 0:
        raise SpecError("cannot score an empty prediction set")
    classes = np.unique(np.concatenate([labels, preds]) if classes is None else classes)
    pos = {int(c): i for i, c in enumerate(classes)}
    V = len(classes)
    cm = np.zeros((V, V), dtype=np.int64)
    try:
        np.add.at(cm, ([pos[int(t)] for t in labels], [pos[int(p)] for p in preds]), 1)
    except KeyError as exc:
        raise SpecError(f"label {exc} outside the class list") from None
    tp = np.diag(cm).astype(np.float64)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros(V), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros(V), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(V), where=denom > 0)
    absent = [int(c) for c, r in zip(classes, row) if r == 0]
    return MetricsReport(classes, cm, float(tp.sum() / cm.sum()), precision, recall, f1, absent)


# -- clustering -----------------------------------------------------------------

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: list[float]


def _kmeans_pp(x, K, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = np.sum((x - x[centers[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(free))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[centers].copy()


def _lloyd(x, centers, max_iter):
    K = len(centers)
    trace = []
    assign = None
    for _ in range(max_iter):
        d2 = cdist(x, centers, "sqeuclidean")
        new = d2.argmin(axis=1)
        # repair empty clusters with the point farthest from its centre
        for k in range(K):
            if not np.any(new == k):
                own = d2[np.arange(len(x)), new]
                counts = np.bincount(new, minlength=K)
                own[counts[new] <= 1] = -1.0  # never strip a singleton
                far = int(own.argmax())
                new[far] = k
                centers[k] = x[far]
                d2[:, k] = np.sum((x - centers[k]) ** 2, axis=1)
        trace.append(float(d2[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            centers[k] = x[assign == k].mean(axis=0)
    inertia = float(np.sum((x - centers[assign]) ** 2))
    trace.append(inertia)
    return assign, centers, inertia, trace


def kmeans(points, K: int, seed: int = 0, max_iter: int = 300, n_init: int = 4) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    x = np.asarray(points, dtype=np.float64)
    if K < 1:
        raise SpecError("K must be >= 1")
    if K > len(x):
        raise SpecError("K cannot exceed the number of points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        assign, centers, inertia, trace = _lloyd(x, _kmeans_pp(x, K, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansResult(assign, centers, inertia, trace)
    return best


def silhouette(points, assignments):
    """Mean and per-point silhouette scores (Euclidean).

    Singleton clusters score 0, as do points whose intra- and nearest
    inter-cluster mean distances are both 0.
    """
    x = np.asarray(points, dtype=np.float64)
    a_in = np.asarray(assignments)
    labels, inv = np.unique(a_in, return_inverse=True)
    if len(labels) < 2:
        raise SpecError("silhouette needs at least two clusters")
    n, K = len(x), len(labels)
    D = cdist(x, x)
    onehot = np.zeros((n, K))
    onehot[np.arange(n), inv] = 1.0
    sums = D @ onehot
    sizes = onehot.sum(axis=0)
    own = inv
    a = np.zeros(n)
    mult = sizes[own] > 1
    a[mult] = sums[mult, own[mult]] / (sizes[own[mult]] - 1)
    means = sums / sizes
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    top = np.maximum(a, b)
    s = np.divide(b - a, top, out=np.zeros(n), where=top > 0)
    s[~mult] = 0.0
    return float(s.mean()), s


@dataclass
class ClusterReport:
    K: int
    assignments: np.ndarray
    silhouette_mean: float


def silhouette_curve(points, ks: Sequence[int] = range(2, 10), seed: int = 0) -> list[ClusterReport]:
    x = np.asarray(points, dtype=np.float64)
    out = []
    for K in ks:
        if K > len(x):
            break
        res = kmeans(x, K, seed)
        if len(np.unique(res.assignments)) < 2:
            out.append(ClusterReport(K, res.assignments, 0.0))
            continue
        out.append(ClusterReport(K, res.assignments, silhouette(x, res.assignments)[0]))
    return out


# -- projection -----------------------------------------------------------------

@dataclass
class PCAProjection:
    coords: np.ndarray
    components: np.ndarray  # (out_dim, d)
    variances: np.ndarray
    rank_deficient: bool


def pca_project(embeddings, out_dim: int = 2) -> PCAProjection:
    """Project onto the leading principal directions.

    Each direction's sign makes its largest-magnitude coordinate positive.
    Directions beyond the data rank are returned as zeros and flagged.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n, d = x.shape
    if n <= out_dim:
        raise SpecError("need more points than output dimensions")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = max(n, d) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    comps = np.zeros((out_dim, d))
    var = np.zeros(out_dim)
    for k in range(min(out_dim, rank)):
        v = vt[k]
        comps[k] = v if v[np.argmax(np.abs(v))] > 0 else -v
        var[k] = s[k] ** 2 / (n - 1)
    return PCAProjection(xc @ comps.T, comps, var, rank < out_dim)


# -- model helpers ----------------------------------------------------------------

def embed_all(model: Model, x_native) -> np.ndarray:
    return np.concatenate([model.embed(x_native[s:s + EMBED_CHUNK])
                           for s in range(0, len(x_native), EMBED_CHUNK)])


def logits_all(model: Model, x_native) -> np.ndarray:
    return np.concatenate([model.predict_logits(x_native[s:s + EMBED_CHUNK])
                           for s in range(0, len(x_native), EMBED_CHUNK)])


def model_classes(model: Model) -> np.ndarray:
    """Emitter labels in classifier column order."""
    classes = model.meta.get("classes")
    if classes is None:
        return np.arange(1, model.spec.n_classes + 1)
    return np.asarray(classes)


def predict_labels(model: Model, x_native) -> np.ndarray:
    return model_classes(model)[logits_all(model, x_native).argmax(axis=1)]


# -- pair distances -----------------------------------------------------------------

def roc_auc(matched, unmatched) -> float:
    """P(matched distance < unmatched distance), ties counted half."""
    matched = np.asarray(matched, dtype=np.float64)
    unmatched = np.asarray(unmatched, dtype=np.float64)
    if matched.size == 0 or unmatched.size == 0:
        raise SpecError("AUC needs both matched and unmatched pairs")
    ranks = rankdata(np.concatenate([unmatched, matched]))
    r_unmatched = ranks[:unmatched.size].sum()
    n0, n1 = unmatched.size, matched.size
    return float((r_unmatched - n0 * (n0 + 1) / 2) / (n0 * n1))


def threshold_sweep(matched, unmatched):
    """Accuracy of the rule ``match iff d < t`` over every distinct cut.

    Returns ``(thresholds, accuracies)``. Candidate thresholds sit midway
    between consecutive distinct distances, plus one below and one above.
    """
    d = np.concatenate([matched, unmatched])
    y = np.concatenate([np.ones(len(matched)), np.zeros(len(unmatched))])
    u = np.unique(d)
    mids = (u[:-1] + u[1:]) / 2 if u.size > 1 else np.empty(0)
    thr = np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])
    order = np.argsort(d, kind="stable")
    ds, ys = d[order], y[order]
    below = np.searchsorted(ds, thr, side="left")  # count of d < t
    cum_match = np.concatenate([[0.0], np.cumsum(ys)])
    tp = cum_match[below]
    tn = (len(unmatched)) - (below - tp)
    return thr, (tp + tn) / len(d)


@dataclass
class DistanceReport:
    matched: np.ndarray
    unmatched: np.ndarray
    thresholds: np.ndarray
    accuracies: np.ndarray
    auc: float
    best_threshold: float
    best_accuracy: float


def distance_report(distances, y) -> DistanceReport:
    distances = np.asarray(distances, dtype=np.float64)
    y = np.asarray(y)
    matched, unmatched = distances[y == 1], distances[y == 0]
    if matched.size == 0 or unmatched.size == 0:
        raise SpecError("pair set must contain both matched and unmatched pairs")
    thr, acc = threshold_sweep(matched, unmatched)
    k = int(np.argmax(acc))
    return DistanceReport(matched, unmatched, thr, acc, roc_auc(matched, unmatched),
                          float(thr[k]), float(acc[k]))


def pair_distances(model: Model, x_native, pairs: PairDataset, metric: str = "euclidean",
                   embeddings=None) -> np.ndarray:
    z = embed_all(model, x_native) if embeddings is None else embeddings
    return eda_distance(z[pairs.i1], z[pairs.i2], metric)


def pair_distance_histograms(model: Model, x_native, pairs: PairDataset,
                             metric: str = "euclidean") -> DistanceReport:
    """Matched/unmatched distance distributions, AUC and best-threshold accuracy."""
    return distance_report(pair_distances(model, x_native, pairs, metric), pairs.y)


def eda_accuracy(model: Model, x_native, pairs: PairDataset, metric="euclidean",
                 threshold: float | None = None) -> float:
    d = pair_distances(model, x_native, pairs, metric)
    if threshold is None:
        return distance_report(d, pairs.y).best_accuracy
    return float(np.mean((d < threshold).astype(int) == pairs.y))


def msp_table(logits, is_unknown, thresholds: Sequence[float]) -> list[dict]:
    """Known/unknown detection rates of the MSP rule at each threshold."""
    is_unknown = np.asarray(is_unknown, dtype=bool)
    rows = []
    for t in thresholds:
        s = osr_score_msp(logits, t).astype(bool)
        rows.append({
            "threshold": float(t),
            "known_accepted": float(np.mean(~s[~is_unknown])) if np.any(~is_unknown) else float("nan"),
            "unknown_rejected": float(np.mean(s[is_unknown])) if np.any(is_unknown) else float("nan"),
        })
    return rows


# -- SNR sweep --------------------------------------------------------------------

def snr_sweep(model: Model, kind: str, clean: LabeledDataset, snr_list: Sequence[float], seed: int = 0,
              pairs: PairDataset | None = None, metric: str = "euclidean",
              threshold: float | None = None) -> list[tuple[float, float]]:
    """Accuracy of a frozen model on ``clean`` re-noised at each SNR.

    Noise seeds derive from ``seed`` and the SNR value, so a point's result
    does not depend on the other points in the list. EDA accuracy is the
    best-threshold accuracy unless a fixed ``threshold`` is given.
    """
    if not len(snr_list):
        raise SpecError("snr list is empty")
    if not np.all(np.isnan(clean.snr_db)):
        raise SpecError("snr_sweep needs the clean evaluation set")
    if kind == "EDA" and pairs is None:
        raise SpecError("EDA sweep needs a pair set")
    out = []
    for snr in snr_list:
        snr = float(snr)
        if not np.isfinite(snr):
            raise SpecError(f"invalid SNR {snr}")
        ds = noisy_copy(clean, snr, derive_seed(seed, int(round(snr * 1000))))
        x = model.prepare(ds.x)
        if kind == "SEI":
            acc = float(np.mean(predict_labels(model, x) == ds.labels))
        elif kind == "EDA":
            acc = eda_accuracy(model, x, pairs, metric, threshold)
        else:
            raise SpecError(f"SNR sweep is defined for SEI and EDA, not {kind}")
        out.append((snr, acc))
    return out


# -- open-set EDA on held-out emitters ---------------------------------------------------

@dataclass
class OSRReport:
    labels: np.ndarray
    heldout_mask: np.ndarray
    pca: PCAProjection
    pairs: PairDataset
    distances: DistanceReport
    heldout_distances: DistanceReport | None
    silhouette: list[ClusterReport]


def osr_heldout_eval(model: Model, heldout: LabeledDataset, known_labels, gamma: int,
                     alpha: float = 0.5, seed: int = 0, reference: LabeledDataset | None = None,
                     ks: Sequence[int] = range(2, 10), metric: str = "euclidean") -> OSRReport:
    """Evaluate a frozen EDA model on emitters it never saw.

    Pairs are drawn among the held-out bursts, plus the ``reference`` bursts
    of known emitters when given. ``heldout_distances`` restricts the
    distance analysis to pairs touching at least one held-out burst.
    """
    known = set(int(k) for k in known_labels)
    overlap = known & set(int(c) for c in heldout.classes)
    if overlap:
        raise SpecError(f"held-out emitters overlap the training emitters: {sorted(overlap)}")
    if reference is not None:
        x = np.concatenate([heldout.x, reference.x])
        labels = np.concatenate([heldout.labels, reference.labels])
    else:
        x, labels = heldout.x, heldout.labels
    mask = np.zeros(len(labels), dtype=bool)
    mask[:len(heldout)] = True
    pairs = build_pair_dataset(labels, alpha, gamma, seed)
    z = embed_all(model, model.prepare(x))
    d = eda_distance(z[pairs.i1], z[pairs.i2], metric)
    touch = mask[pairs.i1] | mask[pairs.i2]
    held = None
    if reference is not None and np.any(pairs.y[touch] == 1) and np.any(pairs.y[touch] == 0):
        held = distance_report(d[touch], pairs.y[touch])
    return OSRReport(labels, mask, pca_project(z), pairs, distance_report(d, pairs.y), held,
                     silhouette_curve(z, ks, seed))
