from __future__ import annotations

import math

import numpy as np
import pytest

from rffkit import nn
from rffkit.errors import NumericError, SpecError
from rffkit.models import ModelSpec, build_model
from rffkit.synth import preset, synth_dataset
from rffkit.training import (Adam, ClassificationObjective, Objective, ReconstructionObjective, TrainConfig,
                             aggregate_params, epoch_batches, subsample_indices, subsample_train, task_seed,
                             train_independent, train_joint, train_single_task)


def _adam_oracle(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Scalar-by-scalar Adam written out longhand."""
    w = [float(v) for v in w]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, 1):
        for i in range(len(w)):
            gi = float(g[i]) + wd * w[i]
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            w[i] -= lr * mh / (math.sqrt(vh) + eps)
    return np.array(w)


def test_adam_first_step_is_lr_sign():
    p = nn.Parameter(np.array([0.5, -0.2, 1.0]))
    p.grad[...] = [2.0, -3.0, 1e-3]
    Adam([p], lr=1e-3).step()
    assert np.allclose(p.value - [0.5, -0.2, 1.0], [-1e-3, 1e-3, -1e-3], atol=1e-8)
    assert not np.any(p.grad)


def test_adam_zero_grad_no_move():
    p = nn.Parameter(np.array([0.5, -0.2]))
    Adam([p], lr=1e-3).step()
    assert np.array_equal(p.value, [0.5, -0.2])


def test_adam_weight_decay_shrinks():
    p = nn.Parameter(np.array([2.0, -2.0]))
    Adam([p], lr=1e-2, weight_decay=5e-4).step()
    assert np.all(np.abs(p.value) < 2.0)


def test_adam_ten_step_oracle():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=5)
    grads = rng.normal(size=(10, 5))
    p = nn.Parameter(w0)
    opt = Adam([p], lr=1e-3, weight_decay=5e-4)
    for g in grads:
        p.grad[...] = g
        opt.step()
    assert np.max(np.abs(p.value - _adam_oracle(w0, grads, wd=5e-4))) <= 1e-12


def test_adam_rejects_nonfinite():
    p = nn.Parameter(np.zeros(2))
    p.grad[0] = np.nan
    with pytest.raises(NumericError):
        Adam([p]).step()


def test_epoch_batches():
    b = epoch_batches(1000, 128, np.random.default_rng(0))
    assert len(b) == 8 and sum(map(len, b)) == 1000
    assert np.array_equal(np.sort(np.concatenate(b)), np.arange(1000))
    b = epoch_batches(129, 128, np.random.default_rng(0))
    assert [len(x) for x in b] == [129]


def test_train_config_validation():
    for kw in (dict(lr=0), dict(epochs=0), dict(batch_size=1), dict(weight_decay=-1)):
        with pytest.raises(SpecError):
            TrainConfig(**kw)


class _Curve(Objective):
    """Validation losses follow a scripted curve; every step nudges the parameters."""

    name = "stub"

    def __init__(self, model, curve):
        super().__init__(model)
        self.curve = list(curve)
        self.states = []

    @property
    def n_train(self):
        return 4

    def step_loss(self, idx, scale=1.0):
        for p in self.params():
            p.grad[...] = scale
        return 1.0

    def eval_loss(self, split="valid"):
        if split == "train":
            return 1.0
        self.states.append(self.model.state())
        return self.curve.pop(0)


def test_early_stopping_restores_first_best():
    model = build_model(ModelSpec("FCN", 8, 2))
    obj = _Curve(model, [9.0, 5.0, 3.0, 4.0, 3.0])
    res = train_single_task(obj, TrainConfig(epochs=4, batch_size=4))
    h = res.history
    assert h.valid_loss == [5.0, 3.0, 4.0, 3.0]
    assert h.best_epoch == 2 and h.best_valid_loss == 3.0
    epoch2 = obj.states[2]
    assert all(np.array_equal(model.state()[k], epoch2[k]) for k in epoch2)
    assert not all(np.array_equal(obj.states[4][k], epoch2[k]) for k in epoch2)


def test_patience_stops_early():
    model = build_model(ModelSpec("FCN", 8, 2))
    obj = _Curve(model, [9.0, 5.0, 6.0, 7.0, 8.0, 9.0])
    h = train_single_task(obj, TrainConfig(epochs=5, batch_size=4, patience=2)).history
    assert len(h.valid_loss) == 3 and h.best_epoch == 1


def _sei_objective(seed=0, n=40):
    ds = synth_dataset(preset("four-emitters-easy"), n, 20.0, seed=3)
    model = build_model(ModelSpec("FCN", ds.x.shape[1], 16, n_classes=4), seed)
    x = model.prepare(ds.x)
    y = ds.labels
    tr, va = np.arange(0, len(y), 2), np.arange(1, len(y), 2)
    return ClassificationObjective(model, x[tr], y[tr], x[va], y[va])


def test_sei_loss_decreases():
    obj = _sei_objective()
    h = train_single_task(obj, TrainConfig(epochs=15, batch_size=32, seed=1)).history
    assert h.best_valid_loss < h.initial_valid_loss
    assert h.train_loss[-1] < h.train_loss[0]


def test_joint_one_hot_equals_single_bitwise():
    cfg = TrainConfig(epochs=3, batch_size=16, seed=5)
    a = _sei_objective(seed=2)
    single = train_single_task(a, cfg)
    b = _sei_objective(seed=2)
    other = _sei_objective(seed=9)
    other_before = other.model.state()
    joint = train_joint([b, other], [1.0, 0.0], cfg)
    assert single.history.valid_loss == joint.history.valid_loss
    assert all(np.array_equal(a.model.state()[k], v) for k, v in b.model.state().items())
    # a zero-weight task is eliminated: its parameters never move
    assert all(np.array_equal(other.model.state()[k], v) for k, v in other_before.items())


def test_joint_shared_encoder_two_objectives():
    ds = synth_dataset(preset("four-emitters-easy"), 20, 20.0, seed=3)
    sei = _sei_objective()
    ae = build_model(ModelSpec("simpleAE", ds.x.shape[1], 16))
    x = ae.prepare(ds.x)
    rec = ReconstructionObjective(ae, x[::2], x[1::2])
    res = train_joint([sei, rec], [0.5, 0.5], TrainConfig(epochs=2, batch_size=16), batch_sizes=[16, 8])
    assert len(res.best_state) == 2 and res.history.best_epoch >= 1


def test_joint_weight_validation():
    obj = _sei_objective()
    with pytest.raises(SpecError):
        train_joint([obj], [0.5], TrainConfig(epochs=1))
    with pytest.raises(SpecError):
        train_joint([obj, obj], [1.0], TrainConfig(epochs=1))


class _Explodes(_Curve):
    def step_loss(self, idx, scale=1.0):
        return math.nan


def test_train_independent_isolation_and_failure_naming():
    built = {}

    def good(seed):
        obj = _sei_objective(seed=seed)
        built["good"] = obj.model
        return obj

    def bad(seed):
        return _Explodes(build_model(ModelSpec("FCN", 8, 2), seed), [1.0] * 5)

    results, failures = train_independent({"good": good, "bad": bad}, TrainConfig(epochs=2, batch_size=16),
                                          skip_failures=True)
    assert set(results) == {"good"} and set(failures) == {"bad"}
    assert "bad" in str(failures["bad"])
    with pytest.raises(NumericError, match="bad"):
        train_independent({"bad": bad}, TrainConfig(epochs=1, batch_size=16))
    assert task_seed(0, "good") != task_seed(0, "bad")
    assert task_seed(0, "good") == task_seed(0, "good")


def test_train_independent_matches_solo_run():
    cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
    results, _ = train_independent({"a": lambda s: _sei_objective(seed=s)}, cfg)
    seed = task_seed(4, "a")
    solo = _sei_objective(seed=seed)
    train_single_task(solo, TrainConfig(epochs=2, batch_size=16, seed=seed))
    model = results["a"][0]
    assert all(np.array_equal(model.state()[k], v) for k, v in solo.model.state().items())


def test_aggregate_params():
    rng = np.random.default_rng(0)
    st = [{"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)} for _ in range(5)]
    agg = aggregate_params(st)
    for k in ("w", "b"):
        want = sum(s[k] for s in st) / 5
        assert np.max(np.abs(agg[k] - want)) <= 1e-15
    same = aggregate_params([st[0]] * 3)
    assert np.allclose(same["w"], st[0]["w"], atol=1e-15)
    with pytest.raises(SpecError):
        aggregate_params([st[0], {"w": st[0]["w"]}])
    with pytest.raises(SpecError):
        aggregate_params([st[0], {"w": np.zeros((2, 3)), "b": st[0]["b"]}])
    with pytest.raises(SpecError):
        aggregate_params(st, "median")


def test_subsample():
    ds = synth_dataset(preset("four-emitters-easy"), 10, None, seed=0)
    assert subsample_train(ds, 1.0, 0) is ds
    half = subsample_train(ds, 0.5, 0)
    assert half.census() == {1: 5, 2: 5, 3: 5, 4: 5}
    assert np.array_equal(subsample_indices(ds.labels, np.arange(40), 0.25, 1),
                          subsample_indices(ds.labels, np.arange(40), 0.25, 1))
    # round half up: 0.25 * 10 = 2.5 -> 3 per class
    assert len(subsample_indices(ds.labels, np.arange(40), 0.25, 1)) == 12
    with pytest.raises(SpecError):
        subsample_train(ds, 0.0, 0)
    with pytest.raises(SpecError):
        subsample_train(ds, 0.01, 0)
