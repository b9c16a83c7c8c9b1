from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rffkit import nn
from rffkit.errors import NumericError, SpecError

RNG = np.random.default_rng(0)


def _conv_bruteforce(x, w, b, stride, padding):
    B, C, L = x.shape
    O, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    n_out = (L + 2 * padding - K) // stride + 1
    out = np.zeros((B, O, n_out))
    for bi in range(B):
        for o in range(O):
            for t in range(n_out):
                s = b[o]
                for c in range(C):
                    for k in range(K):
                        s += w[o, c, k] * xp[bi, c, t * stride + k]
                out[bi, o, t] = s
    return out


def test_linear_identity():
    lin = nn.Linear(3, 3)
    lin.weight.value[...] = np.eye(3)
    assert np.array_equal(lin(np.array([[1.0, 2.0, 3.0]])), [[1.0, 2.0, 3.0]])


def test_conv_box_filter():
    conv = nn.Conv1d(1, 1, 3)
    conv.weight.value[...] = 1.0
    out = conv(np.ones((1, 1, 8)))
    assert out.shape == (1, 1, 6) and np.all(out == 3.0)


def test_conv_output_length_must_be_integral():
    with pytest.raises(SpecError):
        nn.Conv1d(1, 1, 4, stride=2).output_length(9)


@settings(max_examples=20, deadline=None)
@given(B=st.integers(1, 3), C=st.integers(1, 3), O=st.integers(1, 3), K=st.integers(1, 4),
       stride=st.integers(1, 2), pad=st.integers(0, 2), extra=st.integers(0, 6), seed=st.integers(0, 99))
def test_conv_matches_bruteforce(B, C, O, K, stride, pad, extra, seed):
    L = K + stride * extra
    rng = np.random.default_rng(seed)
    conv = nn.Conv1d(C, O, K, stride=stride, padding=pad, rng=rng)
    conv.bias.value[...] = rng.normal(size=O)
    x = rng.normal(size=(B, C, L))
    if (L + 2 * pad - K) % stride:
        return
    want = _conv_bruteforce(x, conv.weight.value, conv.bias.value, stride, pad)
    assert np.max(np.abs(conv(x) - want)) <= 1e-12


def test_maxpool():
    assert nn.MaxPool1d(2, 2)(np.array([[[1.0, 3.0, 2.0, 5.0]]])).tolist() == [[[3.0, 5.0]]]


def test_batchnorm_train_two_samples():
    bn = nn.BatchNorm1d(1)
    out, _ = bn.forward(np.array([[1.0], [3.0]]), nn.TRAIN)
    want = np.array([[-1.0], [1.0]]) / np.sqrt(1.0 + 1e-5)
    assert np.allclose(out, want, atol=1e-12)


def test_batchnorm_rejects_single_sample_in_train():
    with pytest.raises(SpecError):
        nn.BatchNorm1d(2).forward(np.ones((1, 2)), nn.TRAIN)


def test_batchnorm_running_stats_and_eval_affinity():
    bn = nn.BatchNorm1d(3)
    x = RNG.normal(2.0, 3.0, size=(16, 3))
    bn.forward(x, nn.TRAIN)
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    a, b = RNG.normal(size=(4, 3)), RNG.normal(size=(4, 3))
    f = lambda v: bn(v)  # noqa: E731
    # affine map: f(a) + f(b) - f(0) == f(a + b)
    assert np.allclose(f(a) + f(b) - f(np.zeros((4, 3))), f(a + b), atol=1e-12)


def test_leaky_relu_backward():
    act = nn.LeakyReLU(0.01)
    _, cache = act.forward(np.array([-2.0, 3.0]))
    assert np.allclose(act.backward(cache, np.ones(2)), [0.01, 1.0])


def test_linear_weight_grad_by_hand():
    lin = nn.Linear(2, 2)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    g = np.array([[0.5, -1.0], [2.0, 1.0]])
    _, cache = lin.forward(x)
    lin.backward(cache, g)
    assert np.allclose(lin.weight.grad, g.T @ x)
    assert np.allclose(lin.bias.grad, g.sum(axis=0))


def test_zero_upstream_gives_zero_grads():
    net = nn.Sequential(nn.Linear(4, 3, RNG), nn.LeakyReLU(), nn.Linear(3, 2, RNG))
    out, cache = net.forward(RNG.normal(size=(5, 4)))
    dx = net.backward(cache, np.zeros_like(out))
    assert not np.any(dx)
    assert all(not np.any(p.grad) for p in net.params().values())


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    s = nn.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(s)) and s[0] == 1.0 and s[1] == pytest.approx(0.0, abs=1e-300)
    assert np.allclose(nn.softmax(np.array([np.log(2.0), 0.0])), [2 / 3, 1 / 3], atol=1e-15)
    with pytest.raises(NumericError):
        nn.softmax(np.array([np.inf, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10))
def test_softmax_normalised(v):
    s = nn.softmax(np.array(v))
    assert np.all(s > 0) and np.all(s <= 1) and abs(s.sum() - 1) <= 1e-12


LAYERS = [
    ("linear", lambda: nn.Linear(4, 3, np.random.default_rng(1)), (5, 4)),
    ("conv1d", lambda: nn.Conv1d(2, 3, 3, rng=np.random.default_rng(1)), (2, 2, 9)),
    ("conv1d-strided", lambda: nn.Conv1d(2, 2, 4, stride=2, padding=1, rng=np.random.default_rng(1)), (2, 2, 8)),
    ("maxpool1d", lambda: nn.MaxPool1d(2, 2), (2, 2, 8)),
    ("batchnorm1d-2d", lambda: nn.BatchNorm1d(3), (6, 3)),
    ("batchnorm1d-3d", lambda: nn.BatchNorm1d(2), (3, 2, 5)),
    ("leaky_relu", lambda: nn.LeakyReLU(0.01), (4, 5)),
    ("flatten", lambda: nn.Flatten(), (2, 3, 4)),
    ("softmax", lambda: nn.Softmax(-1), (3, 4)),
]


@pytest.mark.parametrize("name,make,shape", LAYERS, ids=[l[0] for l in LAYERS])
def test_grad_check_every_layer(name, make, shape):
    x = np.random.default_rng(2).normal(size=shape)
    if name == "leaky_relu":
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    assert nn.grad_check(make(), x, eps=1e-5) < 1e-6


def test_grad_check_composition():
    rng = np.random.default_rng(3)
    net = nn.Sequential(nn.Conv1d(2, 3, 3, rng=rng), nn.LeakyReLU(), nn.Flatten(), nn.Linear(18, 4, rng))
    assert nn.grad_check(net, rng.normal(size=(3, 2, 8))) < 1e-5


def test_grad_check_zero_linear():
    lin = nn.Linear(3, 2)
    lin.weight.value[...] = 0.0
    assert nn.grad_check(lin, np.zeros((2, 3)), weights="ones") == 0.0


def test_grad_check_eps_range():
    with pytest.raises(SpecError):
        nn.grad_check(nn.Linear(2, 2), np.ones((2, 2)), eps=1e-2)


def test_forward_determinism_and_buffers_untouched_by_grad_check():
    bn = nn.BatchNorm1d(3)
    before = bn.running_mean.copy()
    nn.grad_check(bn, np.random.default_rng(0).normal(size=(4, 3)))
    assert np.array_equal(bn.running_mean, before)
    x = np.random.default_rng(5).normal(size=(3, 3))
    assert np.array_equal(bn(x), bn(x))


def test_sequential_names():
    net = nn.Sequential(nn.Linear(2, 2), nn.BatchNorm1d(2))
    assert set(net.params()) == {"0.weight", "0.bias", "1.gamma", "1.beta"}
    assert set(net.buffers()) == {"1.running_mean", "1.running_var"}


class _Skewed(nn.Linear):
    """Linear layer whose weight gradient is off by a small factor."""

    def __init__(self, factor, rng):
        super().__init__(4, 3, rng)
        self.factor = factor

    def backward(self, cache, grad):
        dx = super().backward(cache, grad)
        self.weight.grad *= self.factor
        return dx


@pytest.mark.parametrize("factor", [1.01, 1.001])
def test_grad_check_detects_small_backward_errors(factor):
    x = np.random.default_rng(4).normal(size=(5, 4))
    assert nn.grad_check(_Skewed(factor, np.random.default_rng(1)), x) > 1e-5
    assert nn.grad_check(_Skewed(1.0, np.random.default_rng(1)), x) < 1e-7
