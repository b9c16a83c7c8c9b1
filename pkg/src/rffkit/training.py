"""Mini-batch training with Adam, validation early stopping and multi-task modes.

Training is organised around *objectives*: small objects that know how to
run a forward/backward pass on a batch of training indices and how to score
the validation set. One loop (:func:`train_joint`) drives any weighted set of
objectives that may share a fingerprint head; :func:`train_single_task` is the
one-objective case.
"""
from __future__ import annotations

import csv
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import NumericError, SpecError
from .models import Model
from .pairs import PairDataset
from .synth import LabeledDataset, derive_seed
from .tasks import loss_contrastive, loss_cross_entropy, loss_mse

EVAL_CHUNK = 512


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 128
    weight_decay: float = 5e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int | None = None  # stop after this many epochs without improvement
    log: Callable[[str], None] | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise SpecError("learning rate must be > 0")
        if self.epochs < 1:
            raise SpecError("epochs must be >= 1")
        if self.batch_size < 2:
            raise SpecError("batch_size must be >= 2")
        if self.weight_decay < 0:
            raise SpecError("weight_decay must be >= 0")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    initial_train_loss: float = math.nan
    initial_valid_loss: float = math.nan
    best_epoch: int = 0  # 1-based; 0 means no epoch completed

    @property
    def best_valid_loss(self) -> float:
        return self.valid_loss[self.best_epoch - 1]

    def write_csv(self, path, timing: bool = False) -> None:
        """Loss per epoch; row 0 holds the pre-training losses. Wall time only on request."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "valid_loss"] + (["seconds"] if timing else []))
            w.writerow([0, repr(self.initial_train_loss), repr(self.initial_valid_loss)]
                       + ([0.0] if timing else []))
            for e, (tl, vl, s) in enumerate(zip(self.train_loss, self.valid_loss, self.seconds), 1):
                w.writerow([e, repr(tl), repr(vl)] + ([f"{s:.3f}"] if timing else []))


# -- optimiser -------------------------------------------------------------------

class Adam:
    """Adam with bias correction and coupled L2 weight decay.

    Weight decay is folded into the gradient (``g + wd * w``) before the moment
    updates. Gradients are zeroed after each step.
    """

    def __init__(self, params: Sequence[nn.Parameter], lr=1e-3, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError("non-finite gradient in optimiser step")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
            p.adam_m *= b1
            p.adam_m += (1.0 - b1) * g
            p.adam_v *= b2
            p.adam_v += (1.0 - b2) * g * g
            p.value -= self.lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + self.eps)
            p.zero_grad()


def adam_step(params, optimizer: Adam | None = None, lr=1e-3, weight_decay=0.0) -> Adam:
    """One Adam update of ``params``; pass the returned optimiser back in to continue."""
    opt = optimizer or Adam(params, lr, weight_decay)
    opt.step()
    return opt


# -- objectives ------------------------------------------------------------------

def _chunks(n, size=EVAL_CHUNK):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


class Objective:
    """A task's training data and loss bound to a model."""

    name = "objective"

    def __init__(self, model: Model):
        self.model = model

    @property
    def n_train(self) -> int:
        raise NotImplementedError

    def params(self) -> list[nn.Parameter]:
        return list(self.model.params().values())

    def step_loss(self, idx: np.ndarray, scale: float = 1.0) -> float:
        """Train-mode forward/backward on training items ``idx``; grads scaled by ``scale``."""
        raise NotImplementedError

    def eval_loss(self, split: str = "valid") -> float:
        raise NotImplementedError


class ClassificationObjective(Objective):
    """Cross-entropy on classifier logits. ``y`` holds 1-based class indices."""

    name = "SEI"

    def __init__(self, model, x_train, y_train, x_valid, y_valid):
        super().__init__(model)
        self.data = {"train": (x_train, np.asarray(y_train)), "valid": (x_valid, np.asarray(y_valid))}

    @property
    def n_train(self):
        return len(self.data["train"][1])

    def step_loss(self, idx, scale=1.0):
        x, y = self.data["train"]
        m = self.model
        z, c_enc = m.encoder.forward(x[idx], nn.TRAIN)
        logits, c_head = m.head.forward(z, nn.TRAIN)
        loss, g = loss_cross_entropy(logits, y[idx])
        g = m.head.backward(c_head, g * scale)
        m.encoder.backward(c_enc, g)
        return loss

    def eval_loss(self, split="valid"):
        x, y = self.data[split]
        total = 0.0
        for sl in _chunks(len(y)):
            total += loss_cross_entropy(self.model.predict_logits(x[sl]), y[sl])[0] * (sl.stop - sl.start)
        return total / len(y)


class PairObjective(Objective):
    """Contrastive loss on pairs; both members go through the encoder in one batch."""

    name = "EDA"

    def __init__(self, model, x, pairs_train: PairDataset, pairs_valid: PairDataset, margin=1.0):
        super().__init__(model)
        self.x = x
        self.pairs = {"train": pairs_train, "valid": pairs_valid}
        self.margin = margin

    @property
    def n_train(self):
        return len(self.pairs["train"])

    def step_loss(self, idx, scale=1.0):
        p = self.pairs["train"]
        B = len(idx)
        xb = np.concatenate([self.x[p.i1[idx]], self.x[p.i2[idx]]])
        z, cache = self.model.encoder.forward(xb, nn.TRAIN)
        loss, g1, g2 = loss_contrastive(z[:B], z[B:], p.y[idx], self.margin)
        self.model.encoder.backward(cache, np.concatenate([g1, g2]) * scale)
        return loss

    def eval_loss(self, split="valid"):
        p = self.pairs[split]
        total = 0.0
        for sl in _chunks(len(p), EVAL_CHUNK // 2):
            z1 = self.model.embed(self.x[p.i1[sl]])
            z2 = self.model.embed(self.x[p.i2[sl]])
            total += loss_contrastive(z1, z2, p.y[sl], self.margin)[0] * (sl.stop - sl.start)
        return total / len(p)


class ReconstructionObjective(Objective):
    """Mean squared reconstruction error through an autoencoder."""

    name = "RFEC"

    def __init__(self, model, x_train, x_valid):
        super().__init__(model)
        self.data = {"train": x_train, "valid": x_valid}

    @property
    def n_train(self):
        return len(self.data["train"])

    def step_loss(self, idx, scale=1.0):
        m = self.model
        xb = self.data["train"][idx]
        z, c_enc = m.encoder.forward(xb, nn.TRAIN)
        xh, c_dec = m.head.forward(z, nn.TRAIN)
        loss, g = loss_mse(xh, xb)
        m.encoder.backward(c_enc, m.head.backward(c_dec, g * scale))
        return loss

    def eval_loss(self, split="valid"):
        x = self.data[split]
        total = 0.0
        for sl in _chunks(len(x)):
            total += loss_mse(self.model.autoencode(x[sl]), x[sl])[0] * (sl.stop - sl.start)
        return total / len(x)


# -- batching --------------------------------------------------------------------

def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches covering ``n`` items; a trailing batch of one joins its predecessor."""
    perm = rng.permutation(n)
    batches = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


class _Schedule:
    """Endless stream of shuffled batches for one objective."""

    def __init__(self, n, batch_size, seed):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.queue: list[np.ndarray] = []

    def per_epoch(self):
        return len(epoch_batches(self.n, self.batch_size, np.random.default_rng(0)))

    def next(self):
        if not self.queue:
            self.queue = epoch_batches(self.n, self.batch_size, self.rng)
        return self.queue.pop(0)


# -- training loops ----------------------------------------------------------------

def _unique_params(objectives) -> list[nn.Parameter]:
    seen, out = set(), []
    for obj in objectives:
        for p in obj.params():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def _snapshot(models) -> list[dict]:
    return [m.state() for m in models]


@dataclass
class TrainResult:
    history: TrainHistory
    best_state: list[dict]  # one state per distinct model, in objective order


def train_joint(objectives: Sequence[Objective], weights: Sequence[float], config: TrainConfig,
                batch_sizes: Sequence[int] | None = None) -> TrainResult:
    """Minimise ``sum_t w_t * L_t`` over objectives that may share encoder parameters.

    Each step draws one mini-batch per objective with non-zero weight,
    accumulates the weighted gradients and takes one Adam step. An epoch has as
    many steps as the largest per-objective batch count; smaller objectives
    wrap around. Validation uses the same weighted sum, and every model is
    restored to the state of its first-best epoch before returning.
    """
    if len(objectives) != len(weights) or not objectives:
        raise SpecError("one weight per objective required")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise SpecError(f"task weights must sum to 1, got {sum(weights)!r}")
    batch_sizes = list(batch_sizes or [config.batch_size] * len(objectives))
    active = [i for i, w in enumerate(weights) if w != 0]
    objs = [objectives[i] for i in active]
    w = [float(weights[i]) for i in active]
    models = list({id(o.model): o.model for o in objs}.values())
    for o in objs:
        if o.model.spec.embed_dim != objs[0].model.spec.embed_dim:
            raise SpecError("objectives disagree on the embedding dimension")

    opt = Adam(_unique_params(objs), config.lr, config.weight_decay, config.beta1, config.beta2,
               config.adam_eps)
    scheds = [_Schedule(o.n_train, batch_sizes[i], config.seed) for o, i in zip(objs, active)]
    steps = max(s.per_epoch() for s in scheds)

    def weighted(split):
        return sum(wt * o.eval_loss(split) for wt, o in zip(w, objs))

    hist = TrainHistory()
    hist.initial_train_loss = weighted("train")
    hist.initial_valid_loss = weighted("valid")
    best_state, best = _snapshot(models), math.inf
    log = config.log
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        running = 0.0
        for step in range(steps):
            for k, (o, s) in enumerate(zip(objs, scheds)):
                loss = o.step_loss(s.next(), w[k])
                if not math.isfinite(loss):
                    raise NumericError(f"{o.name}: non-finite loss at epoch {epoch}, batch {step}")
                running += w[k] * loss
            try:
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {step}: {exc}") from exc
        valid = weighted("valid")
        if not math.isfinite(valid):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        hist.train_loss.append(running / steps)
        hist.valid_loss.append(valid)
        hist.seconds.append(time.perf_counter() - t0)
        if valid < best:
            best, hist.best_epoch = valid, epoch
            best_state = _snapshot(models)
        if log:
            log(f"epoch {epoch:4d}  train {hist.train_loss[-1]:.6f}  valid {valid:.6f}"
                f"  best {hist.best_epoch}")
        if config.patience is not None and epoch - hist.best_epoch >= config.patience:
            break
    for m, st in zip(models, best_state):
        m.load_state(st)
    return TrainResult(hist, best_state)


def train_single_task(objective: Objective, config: TrainConfig) -> TrainResult:
    """Mini-batch single-task training; the model ends at its best-validation state."""
    return train_joint([objective], [1.0], config)


def task_seed(seed: int, task_name: str) -> int:
    return derive_seed(seed, zlib.crc32(task_name.encode()))


def train_independent(jobs: dict[str, Callable[[int], Objective]], config: TrainConfig,
                      skip_failures: bool = False):
    """Train each task with its own parameters and a seed derived from its name.

    ``jobs`` maps task name to a factory ``seed -> Objective`` that builds a
    fresh model. Returns ``(results, failures)``; with ``skip_failures`` a
    numerical failure is recorded under the task name instead of raised.
    """
    results, failures = {}, {}
    for name, make in jobs.items():
        seed = task_seed(config.seed, name)
        cfg = TrainConfig(**{**config.__dict__, "seed": seed})
        obj = make(seed)
        try:
            results[name] = (obj.model, train_single_task(obj, cfg))
        except NumericError as exc:
            err = NumericError(f"task {name!r}: {exc}")
            if not skip_failures:
                raise err from exc
            failures[name] = err
    return results, failures


def aggregate_params(states: Sequence[dict], method: str = "mean") -> dict:
    """Element-wise mean of identically shaped named tensors."""
    if method != "mean":
        raise SpecError(f"unsupported aggregation {method!r}")
    if not states:
        raise SpecError("nothing to aggregate")
    names = set(states[0])
    for st in states[1:]:
        if set(st) != names:
            raise SpecError("parameter sets have different names")
    out = {}
    for k in states[0]:
        arrs = [np.asarray(st[k], dtype=np.float64) for st in states]
        if any(a.shape != arrs[0].shape for a in arrs):
            raise SpecError(f"shape mismatch for {k}")
        out[k] = np.mean(np.stack(arrs), axis=0)
    return out


def subsample_indices(labels, idx, p: float, seed: int) -> np.ndarray:
    """Random, label-stratified fraction ``p`` of the positions ``idx`` (sorted)."""
    if not 0 < p <= 1:
        raise SpecError("proportion must lie in (0, 1]")
    labels = np.asarray(labels)
    idx = np.asarray(idx, dtype=np.int64)
    if p == 1:
        return np.sort(idx)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        n = int(math.floor(p * members.size + 0.5))
        if n < 1:
            raise SpecError(f"proportion {p} empties emitter {int(c)}")
        keep.append(rng.choice(members, size=n, replace=False))
    return np.sort(np.concatenate(keep))


def subsample_train(ds: LabeledDataset, p: float, seed: int) -> LabeledDataset:
    """Keep a random, label-stratified fraction ``p`` of ``ds``."""
    if p == 1:
        return ds
    return ds.subset(subsample_indices(ds.labels, np.arange(len(ds)), p, seed))
