"""End-to-end experiment plumbing shared by the CLI and the acceptance suite.

Everything here is a pure function of (config, dataset): splits, pair sets
and model initialisation all derive their seeds from ``config.seed``.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import evaluation as ev
from . import plots
from .config import ExperimentConfig
from .errors import DataError, SpecError
from .models import Model, build_model
from .pairs import PairDataset, build_pair_dataset
from .synth import EmitterSpec, LabeledDataset, derive_seed, split_dataset, synth_dataset
from .training import (ClassificationObjective, PairObjective, ReconstructionObjective, TrainConfig,
                       TrainResult, subsample_indices, train_single_task)

# sub-seed tags
_SPLIT, _SUBSAMPLE, _PAIRS, _MODEL, _EVAL = 1, 2, 3, 4, 5

ARTIFACTS = {
    "SEI": ("metrics", "confusion", "embeddings", "silhouette", "msp"),
    "EDA": ("metrics", "confusion", "embeddings", "silhouette", "distances"),
    "RFEC": ("reconstruction", "embeddings", "silhouette"),
}


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_dataset(cfg: ExperimentConfig, clean: bool = False) -> LabeledDataset:
    pop = cfg.population
    return synth_dataset(pop.specs(), pop.bursts_per_emitter, None if clean else pop.snr_db, cfg.seed,
                         pop.payload_symbols, pop.oversample)


def regenerate_clean(meta: dict) -> LabeledDataset:
    """Rebuild the noise-free version of a synthesised dataset from its metadata."""
    try:
        specs = [EmitterSpec.from_dict(d) for d in meta["emitters"]]
        return synth_dataset(specs, int(meta["bursts_per_emitter"]), None, int(meta["seed"]),
                             int(meta["payload_symbols"]), int(meta["oversample"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"dataset metadata cannot regenerate the population: missing {exc}") from None


# -- splits and pairs ------------------------------------------------------------------

@dataclass
class Splits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def items(self):
        return (("train", self.train), ("valid", self.valid), ("test", self.test))


def make_splits(labels, seed: int, p_v: float, p_t: float, proportion: float = 1.0) -> Splits:
    """Stratified train/valid/test indices; the training part is then thinned to ``proportion``."""
    probe = LabeledDataset(np.zeros((len(labels), 1), complex), labels, np.full(len(labels), np.nan))
    tr, va, te = split_dataset(probe, p_v, p_t, derive_seed(seed, _SPLIT))
    tr = subsample_indices(labels, tr, proportion, derive_seed(seed, _SUBSAMPLE))
    return Splits(tr, va, te)


def pair_budgets(gamma: int, p_v: float, p_t: float, proportion: float = 1.0) -> dict[str, int]:
    """Pair counts per split. The training budget shrinks with ``proportion``."""
    g_v = int(math.floor(gamma * p_v + 0.5))
    g_t = int(math.floor(gamma * p_t + 0.5))
    g_tr = gamma - g_v - g_t
    return {"train": max(1, int(math.floor(g_tr * proportion + 0.5))), "valid": g_v, "test": g_t}


def split_pairs(labels, splits: Splits, alpha: float, budgets: dict[str, int], seed: int) -> dict[str, PairDataset]:
    """Pairs drawn inside each split; entries hold indices into the full dataset."""
    labels = np.asarray(labels)
    out = {}
    for k, (name, idx) in enumerate(splits.items()):
        if budgets.get(name, 0) < 1 or idx.size == 0:
            continue
        local = build_pair_dataset(labels[idx], alpha, budgets[name], derive_seed(seed, _PAIRS, k))
        entries = local.entries.copy()
        entries[:, :2] = idx[entries[:, :2]]
        out[name] = PairDataset(entries, name, alpha, budgets[name], local.seed)
    return out


def pairs_from_file(pairs: PairDataset, splits: Splits) -> dict[str, PairDataset]:
    """Assign externally built pairs to the split holding both members; cross-split pairs are dropped."""
    n = int(max(s.max(initial=-1) for _, s in splits.items())) + 1
    if len(pairs) and int(pairs.entries[:, :2].max()) >= n:
        raise DataError("pair file references bursts outside the dataset")
    where = np.full(n, -1)
    for k, (_, idx) in enumerate(splits.items()):
        where[idx] = k
    out = {}
    for k, (name, _) in enumerate(splits.items()):
        keep = (where[pairs.i1] == k) & (where[pairs.i2] == k)
        if np.any(keep):
            out[name] = PairDataset(pairs.entries[keep], name, pairs.alpha, int(keep.sum()), pairs.seed)
    for name in ("train", "valid"):
        if name not in out:
            raise SpecError(f"pair file leaves the {name} split without pairs")
    return out


# -- training ----------------------------------------------------------------------------

@dataclass
class Outcome:
    model: Model
    result: TrainResult
    splits: Splits
    pairs: dict[str, PairDataset] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def class_index(labels, classes) -> np.ndarray:
    """Emitter labels to 1-based positions in ``classes``."""
    pos = np.searchsorted(classes, labels)
    if np.any(pos >= len(classes)) or np.any(classes[np.minimum(pos, len(classes) - 1)] != labels):
        raise DataError("labels outside the model's class list")
    return pos + 1


def train_experiment(cfg: ExperimentConfig, ds: LabeledDataset, pairs: PairDataset | None = None,
                     log: Callable[[str], None] | None = None) -> Outcome:
    """Split, (pair,) train and score one task on ``ds`` as described by ``cfg``."""
    kind, t = cfg.task.kind, cfg.train
    classes = ds.classes
    if kind != "RFEC" and len(classes) < 2:
        raise DataError(f"{kind} needs at least two emitters in the data")
    splits = make_splits(ds.labels, cfg.seed, t.p_v, t.p_t, cfg.task.proportion)
    spec = cfg.model_spec(len(classes) if kind == "SEI" else None)
    if spec.input_len != ds.burst_len:
        raise DataError(f"data bursts have {ds.burst_len} samples, model expects {spec.input_len}")
    model = build_model(spec, derive_seed(cfg.seed, _MODEL))
    x = model.prepare(ds.x)
    tc = TrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, weight_decay=t.weight_decay,
                     seed=cfg.seed, patience=t.patience, log=log)
    pair_sets: dict[str, PairDataset] = {}
    if kind == "SEI":
        y = class_index(ds.labels, classes)
        obj = ClassificationObjective(model, x[splits.train], y[splits.train], x[splits.valid], y[splits.valid])
    elif kind == "EDA":
        if pairs is not None:
            pair_sets = pairs_from_file(pairs, splits)
        else:
            budgets = pair_budgets(cfg.task.gamma, t.p_v, t.p_t, cfg.task.proportion)
            pair_sets = split_pairs(ds.labels, splits, cfg.task.alpha, budgets, cfg.seed)
        obj = PairObjective(model, x, pair_sets["train"], pair_sets["valid"], cfg.task.margin)
    else:
        obj = ReconstructionObjective(model, x[splits.train], x[splits.valid])
    result = train_single_task(obj, tc)
    h = result.history
    model.meta = {
        "task": kind,
        "classes": [int(c) for c in classes],
        "split": {"seed": cfg.seed, "p_v": t.p_v, "p_t": t.p_t, "proportion": cfg.task.proportion},
        "eda": {"alpha": cfg.task.alpha, "gamma": cfg.task.gamma, "margin": cfg.task.margin,
                "distance": cfg.task.distance},
        "population": {k: v for k, v in ds.meta.items()},
        "best_epoch": h.best_epoch,
    }
    if ds.specs and "emitters" not in model.meta["population"]:
        model.meta["population"]["emitters"] = [s.to_dict() for s in ds.specs]
    out = Outcome(model, result, splits, pair_sets)
    out.metrics = score(model, ds, splits, pair_sets, cfg)
    out.metrics["best_epoch"] = h.best_epoch
    out.metrics["initial_valid_loss"] = h.initial_valid_loss
    out.metrics["best_valid_loss"] = h.best_valid_loss
    if kind == "EDA":
        model.meta["eda"]["threshold"] = out.metrics["threshold"]
    return out


def score(model: Model, ds: LabeledDataset, splits: Splits, pair_sets: dict, cfg: ExperimentConfig) -> dict:
    """Headline test-split metrics for the trained model."""
    kind = model.meta["task"]
    x = model.prepare(ds.x)
    test = splits.test if splits.test.size else splits.valid
    if kind == "SEI":
        return ev.classification_metrics(ev.predict_labels(model, x[test]), ds.labels[test],
                                         ev.model_classes(model)).row()
    if kind == "EDA":
        pairs = pair_sets.get("test", pair_sets["valid"])
        rep = ev.pair_distance_histograms(model, x, pairs, cfg.task.distance)
        return {"accuracy": rep.best_accuracy, "auc": rep.auc, "threshold": rep.best_threshold}
    return {"reconstruction": reconstruction_loss(model, x[test])}


def reconstruction_loss(model: Model, x) -> float:
    from .tasks import loss_mse
    total = 0.0
    for s in range(0, len(x), ev.EMBED_CHUNK):
        xb = x[s:s + ev.EMBED_CHUNK]
        total += loss_mse(model.autoencode(xb), xb)[0] * len(xb)
    return total / len(x)


# -- report writing --------------------------------------------------------------------------

def write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


class Reporter:
    """Writes ``<run_id>.<artifact>.{csv,svg}`` into one directory and remembers what it wrote."""

    def __init__(self, out_dir, run_id: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.written: list[str] = []

    def path(self, artifact: str, ext: str) -> Path:
        p = self.dir / f"{self.run_id}.{artifact}.{ext}"
        self.written.append(p.name)
        return p

    def csv(self, artifact, header, rows):
        write_rows(self.path(artifact, "csv"), header, rows)

    def embeddings(self, z, labels, title="embeddings (PCA)"):
        proj = ev.pca_project(z, 2)
        self.csv("embeddings", ["label", "pc1", "pc2"],
                 [(int(l), float(a), float(b)) for l, (a, b) in zip(labels, proj.coords)])
        plots.scatter(self.path("embeddings", "svg"), proj.coords, labels, title)
        return proj

    def silhouette(self, z, ks, seed):
        curve = ev.silhouette_curve(z, ks, seed)
        self.csv("silhouette", ["K", "silhouette"], [(c.K, float(c.silhouette_mean)) for c in curve])
        plots.lines(self.path("silhouette", "svg"), [c.K for c in curve],
                    {"silhouette": [c.silhouette_mean for c in curve]}, "K-means silhouette", "K", "score")
        return curve

    def distances(self, rep: ev.DistanceReport, pairs: PairDataset | None, d=None, artifact="distances"):
        if pairs is not None and d is not None:
            self.csv(artifact, ["i1", "i2", "label", "distance"],
                     [(int(a), int(b), int(y), float(v)) for (a, b, y), v in zip(pairs.entries, d)])
        self.csv(artifact + "-threshold", ["threshold", "accuracy"],
                 [(float(t), float(a)) for t, a in zip(rep.thresholds, rep.accuracies)])
        plots.histograms(self.path(artifact, "svg"), {"matched": rep.matched, "unmatched": rep.unmatched},
                         title=f"pair distances (AUC {rep.auc:.3f})")

    def confusion(self, rep: ev.MetricsReport, names=None):
        names = [str(c) for c in (names or rep.classes)]
        self.csv("confusion", ["true\\pred", *names],
                 [(n, *map(int, row)) for n, row in zip(names, rep.confusion)])
        plots.heatmap(self.path("confusion", "svg"), rep.confusion, names, names, "confusion")


def resolve_artifacts(kind: str, requested: Sequence[str] | None) -> list[str]:
    allowed = ARTIFACTS[kind]
    if not requested:
        return list(allowed)
    bad = [a for a in requested if a not in allowed]
    if bad:
        raise SpecError(f"artifacts {bad} are not available for {kind}; choose from {list(allowed)}")
    return list(requested)


def eval_view(model: Model, ds: LabeledDataset, data_hash: str | None):
    """Bursts to evaluate: the training run's test split when ``ds`` is its dataset, else all of it."""
    sp = model.meta.get("split")
    if sp and data_hash is not None and data_hash == model.meta.get("dataset_hash"):
        splits = make_splits(ds.labels, sp["seed"], sp["p_v"], sp["p_t"], sp.get("proportion", 1.0))
        return splits, True
    idx = np.arange(len(ds))
    return Splits(np.empty(0, np.int64), np.empty(0, np.int64), idx), False


def eda_eval_pairs(model: Model, ds: LabeledDataset, splits: Splits, own_data: bool) -> PairDataset:
    e, sp = model.meta["eda"], model.meta.get("split", {})
    if own_data:
        budgets = pair_budgets(e["gamma"], sp["p_v"], sp["p_t"], sp.get("proportion", 1.0))
        sets = split_pairs(ds.labels, splits, e["alpha"], {"test": budgets["test"] or budgets["valid"]},
                           sp["seed"])
        if "test" not in sets:
            raise DataError("the training run kept no test split to evaluate")
        return sets["test"]
    gamma = max(2, int(math.floor(e["gamma"] * sp.get("p_t", 0.1) + 0.5)))
    return build_pair_dataset(ds.labels, e["alpha"], gamma, derive_seed(sp.get("seed", 0), _EVAL))


def evaluate(model: Model, ds: LabeledDataset, rep: Reporter, artifacts: Sequence[str], ks, seed: int,
             msp_thresholds=(0.5, 0.9), data_hash: str | None = None) -> dict:
    """Write the requested artifacts for ``model`` on ``ds`` and return headline metrics."""
    kind = model.meta.get("task") or ("RFEC" if model.spec.is_autoencoder else
                                      "SEI" if model.spec.n_classes else "EDA")
    artifacts = resolve_artifacts(kind, artifacts)
    splits, own = eval_view(model, ds, data_hash)
    test = splits.test
    if test.size == 0:
        raise DataError("no bursts to evaluate")
    x = model.prepare(ds.x)
    z = ev.embed_all(model, x[test])
    labels = ds.labels[test]
    metrics: dict = {"n_bursts": int(test.size), "split": "test" if own else "all"}
    if kind == "SEI":
        classes = ev.model_classes(model)
        known = np.isin(labels, classes)
        logits = ev.logits_all(model, x[test])
        if np.any(known):
            preds = classes[logits[known].argmax(axis=1)]
            mrep = ev.classification_metrics(preds, labels[known], classes)
            metrics.update(mrep.row())
            if "metrics" in artifacts:
                rep.csv("metrics", ["accuracy", "f1", "precision", "recall"], [tuple(mrep.row().values())])
            if "confusion" in artifacts:
                rep.confusion(mrep)
        if "msp" in artifacts:
            rows = ev.msp_table(logits, ~known, msp_thresholds)
            rep.csv("msp", ["threshold", "known_accepted", "unknown_rejected"],
                    [(r["threshold"], r["known_accepted"], r["unknown_rejected"]) for r in rows])
    elif kind == "EDA":
        pairs = eda_eval_pairs(model, ds, splits, own)
        metric = model.meta.get("eda", {}).get("distance", "euclidean")
        zall = ev.embed_all(model, x)
        d = ev.eda_distance(zall[pairs.i1], zall[pairs.i2], metric)
        drep = ev.distance_report(d, pairs.y)
        preds = (d < drep.best_threshold).astype(np.int64)
        mrep = ev.classification_metrics(preds, pairs.y, [0, 1])
        metrics.update(mrep.row(), auc=drep.auc, threshold=drep.best_threshold)
        if "metrics" in artifacts:
            rep.csv("metrics", ["accuracy", "f1", "precision", "recall", "auc", "threshold"],
                    [(*mrep.row().values(), drep.auc, drep.best_threshold)])
        if "confusion" in artifacts:
            rep.confusion(mrep, ["no-match", "match"])
        if "distances" in artifacts:
            rep.distances(drep, pairs, d)
    else:
        rec = reconstruction_loss(model, x[test])
        metrics["reconstruction"] = rec
        if "reconstruction" in artifacts:
            rep.csv("reconstruction", ["n_bursts", "mse"], [(int(test.size), rec)])
    if "embeddings" in artifacts:
        rep.embeddings(z, labels)
    if "silhouette" in artifacts:
        curve = rep.silhouette(z, ks, seed)
        metrics["silhouette"] = {c.K: c.silhouette_mean for c in curve}
    return metrics


def history_artifacts(rep: Reporter, result: TrainResult) -> None:
    h = result.history
    h.write_csv(rep.path("history", "csv"))
    # wall time lives apart so the history file stays identical across reruns
    rep.csv("timing", ["epoch", "seconds"], [(e, round(t, 3)) for e, t in enumerate(h.seconds, 1)])
    epochs = list(range(0, len(h.train_loss) + 1))
    plots.lines(rep.path("history", "svg"), epochs,
                {"train": [h.initial_train_loss, *h.train_loss], "valid": [h.initial_valid_loss, *h.valid_loss]},
                f"loss (best epoch {h.best_epoch})", "epoch", "loss")


# -- SNR sweep and open-set evaluation --------------------------------------------------------

def sweep(model: Model, snr_list, seed: int | None = None, meta: dict | None = None):
    """Accuracy of a frozen SEI/EDA model on its test bursts re-noised at each SNR."""
    kind = model.meta.get("task")
    if kind not in ("SEI", "EDA"):
        raise SpecError(f"SNR sweeps apply to SEI and EDA models, not {kind}")
    clean = regenerate_clean(meta or model.meta.get("population", {}))
    sp = model.meta["split"]
    splits = make_splits(clean.labels, sp["seed"], sp["p_v"], sp["p_t"], sp.get("proportion", 1.0))
    known = np.isin(clean.labels[splits.test], model.meta["classes"])
    test = splits.test[known]
    sub = clean.subset(test)
    pairs = None
    if kind == "EDA":
        gp = eda_eval_pairs(model, clean, splits, True)
        local = gp.entries.copy()
        local[:, :2] = np.searchsorted(test, local[:, :2])
        pairs = PairDataset(local, "test")
    seed = sp["seed"] if seed is None else seed
    return ev.snr_sweep(model, kind, sub, snr_list, derive_seed(seed, _EVAL), pairs,
                        model.meta.get("eda", {}).get("distance", "euclidean"))


def check_heldout(classes, heldout) -> tuple[list[int], list[int]]:
    classes = [int(c) for c in classes]
    heldout = sorted(set(int(h) for h in heldout))
    if not heldout:
        raise SpecError("no held-out emitters given")
    missing = [h for h in heldout if h not in classes]
    if missing:
        raise SpecError(f"held-out emitters {missing} are not in the data")
    known = [c for c in classes if c not in heldout]
    if len(known) < 2:
        raise SpecError("at least two known emitters must remain for training")
    return known, heldout


@dataclass
class OSRRun:
    proportion: float
    outcome: Outcome
    report: ev.OSRReport


def osr_experiment(cfg: ExperimentConfig, ds: LabeledDataset, heldout, proportions,
                   log: Callable[[str], None] | None = None) -> list[OSRRun]:
    """Train an EDA model on the known emitters at each proportion; score it on the held-out ones."""
    if cfg.task.kind != "EDA":
        raise SpecError("open-set evaluation trains an EDA model; set task.kind to EDA")
    if any(not 0 < p <= 1 for p in proportions):
        raise SpecError("proportions must lie in (0, 1]")
    known, heldout = check_heldout(ds.classes, heldout)
    ds_known, ds_held = ds.select_labels(known), ds.select_labels(heldout)
    gamma_eval = max(2, pair_budgets(cfg.task.gamma, cfg.train.p_v, cfg.train.p_t)["test"])
    runs = []
    for p in proportions:
        cfg_p = cfg.model_copy(deep=True)
        cfg_p.task.proportion = float(p)
        out = train_experiment(cfg_p, ds_known, log=log)
        out.model.meta["known_labels"] = known
        out.model.meta["heldout_labels"] = heldout
        reference = ds_known.subset(out.splits.test)
        rep = ev.osr_heldout_eval(out.model, ds_held, known, gamma_eval, cfg.task.alpha,
                                  derive_seed(cfg.seed, _EVAL), reference, cfg.eval.ks, cfg.task.distance)
        runs.append(OSRRun(float(p), out, rep))
    return runs


def osr_artifacts(rep: Reporter, run: OSRRun) -> dict:
    r = run.report
    rep.csv("embeddings", ["label", "heldout", "pc1", "pc2"],
            [(int(l), int(m), float(a), float(b)) for l, m, (a, b) in zip(r.labels, r.heldout_mask, r.pca.coords)])
    plots.scatter(rep.path("embeddings", "svg"), r.pca.coords, r.labels, "embeddings (PCA)")
    rep.distances(r.distances, None, artifact="distances")
    rows = [("all", r.distances.auc, r.distances.best_accuracy, r.distances.best_threshold)]
    if r.heldout_distances is not None:
        rep.distances(r.heldout_distances, None, artifact="heldout-distances")
        rows.append(("heldout", r.heldout_distances.auc, r.heldout_distances.best_accuracy,
                     r.heldout_distances.best_threshold))
    rep.csv("metrics", ["pairs", "auc", "accuracy", "threshold"], rows)
    rep.csv("silhouette", ["K", "silhouette"], [(c.K, float(c.silhouette_mean)) for c in r.silhouette])
    plots.lines(rep.path("silhouette", "svg"), [c.K for c in r.silhouette],
                {"silhouette": [c.silhouette_mean for c in r.silhouette]}, "K-means silhouette", "K", "score")
    head = r.heldout_distances or r.distances
    return {"proportion": run.proportion, "auc": head.auc, "accuracy": head.best_accuracy,
            "threshold": head.best_threshold, "best_epoch": run.outcome.result.history.best_epoch}
