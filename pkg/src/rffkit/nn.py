"""Dense layers with hand-written reverse-mode gradients (float64, numpy).

Each layer's ``forward`` returns ``(output, cache)`` and ``backward(cache, grad)``
returns the input gradient while accumulating parameter gradients into
``Parameter.grad``. Caches are explicit so the same layer can be run several
times before any backward pass (shared encoders in multi-task training).
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, SpecError

TRAIN, EVAL = "train", "eval"


class Parameter:
    """A learnable tensor with its gradient buffer and Adam moments."""

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise SpecError(f"mode must be 'train' or 'eval', got {mode!r}")


class Layer:
    kind = "layer"

    def params(self) -> dict[str, Parameter]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, mode=TRAIN):
        raise NotImplementedError

    def backward(self, cache, grad):
        raise NotImplementedError

    def __call__(self, x, mode=EVAL):
        return self.forward(x, mode)[0]


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        if in_features < 1 or out_features < 1:
            raise SpecError("linear sizes must be positive")
        rng = rng or np.random.default_rng(0)
        bound = math.sqrt(1.0 / in_features)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode=TRAIN):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise SpecError(f"linear expects (B, {self.in_features}), got {x.shape}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, cache, grad):
        x = cache
        if grad.shape != (x.shape[0], self.out_features):
            raise SpecError("upstream gradient does not match linear output")
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class Conv1d(Layer):
    """Cross-correlation over (B, C_in, L) with zero padding on both ends."""

    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise SpecError("conv1d sizes must be positive")
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size
        bound = math.sqrt(1.0 / fan_in)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_length(self, length: int) -> int:
        span = length + 2 * self.padding - self.kernel_size
        if span < 0 or span % self.stride:
            raise SpecError(
                f"conv1d: (L + 2p - k) / s + 1 is not a positive integer for L={length}, "
                f"k={self.kernel_size}, s={self.stride}, p={self.padding}")
        return span // self.stride + 1

    def forward(self, x, mode=TRAIN):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise SpecError(f"conv1d expects (B, {self.in_channels}, L), got {x.shape}")
        l_out = self.output_length(x.shape[2])
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding))) if self.padding else x
        cols = sliding_window_view(xp, self.kernel_size, axis=2)[:, :, ::self.stride, :]
        # cols: (B, C_in, L_out, K)
        out = np.tensordot(cols, self.weight.value, axes=([1, 3], [1, 2]))  # (B, L_out, C_out)
        out = out.transpose(0, 2, 1) + self.bias.value[None, :, None]
        assert out.shape[2] == l_out
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, cache, grad):
        cols, in_shape = cache
        B, C, L = in_shape
        self.weight.grad += np.tensordot(grad, cols, axes=([0, 2], [0, 2]))
        self.bias.grad += grad.sum(axis=(0, 2))
        dxp = np.zeros((B, C, L + 2 * self.padding))
        l_out = grad.shape[2]
        stop = self.stride * (l_out - 1) + 1
        for k in range(self.kernel_size):
            # (B, C_out, L_out) x (C_out, C_in) -> (B, C_in, L_out)
            contrib = np.einsum("bol,oc->bcl", grad, self.weight.value[:, :, k], optimize=True)
            dxp[:, :, k:k + stop:self.stride] += contrib
        if self.padding:
            dxp = dxp[:, :, self.padding:-self.padding]
        return dxp


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, window: int = 2, stride: int | None = None):
        self.window = window
        self.stride = stride or window
        if self.window < 1 or self.stride < 1:
            raise SpecError("pool sizes must be positive")

    def forward(self, x, mode=TRAIN):
        if x.ndim != 3:
            raise SpecError(f"maxpool1d expects (B, C, L), got {x.shape}")
        L = x.shape[2]
        if L < self.window or (L - self.window) % self.stride:
            raise SpecError(f"maxpool1d: length {L} does not tile with window {self.window}, "
                            f"stride {self.stride}")
        win = sliding_window_view(x, self.window, axis=2)[:, :, ::self.stride, :]
        arg = win.argmax(axis=3)
        out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
        return out, (arg, x.shape)

    def backward(self, cache, grad):
        arg, shape = cache
        B, C, L = shape
        dx = np.zeros(shape)
        pos = np.arange(arg.shape[2]) * self.stride + arg  # (B, C, L_out)
        if self.window <= self.stride:
            np.put_along_axis(dx, pos, grad, axis=2)
        else:
            bi, ci, _ = np.indices(pos.shape)
            np.add.at(dx, (bi, ci, pos), grad)
        return dx


class BatchNorm1d(Layer):
    """Batch normalisation over (B, C) or (B, C, L) inputs.

    Training normalises with the biased batch variance; running statistics
    use momentum 0.1 and the unbiased variance, as in the common frameworks.
    """

    kind = "batchnorm1d"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        if num_features < 1:
            raise SpecError("batchnorm needs a positive channel count")
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _axes(self, x):
        if x.ndim not in (2, 3) or x.shape[1] != self.num_features:
            raise SpecError(f"batchnorm1d expects (B, {self.num_features}[, L]), got {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2)

    def _bcast(self, v, ndim):
        return v[None, :] if ndim == 2 else v[None, :, None]

    def forward(self, x, mode=TRAIN):
        _check_mode(mode)
        axes = self._axes(x)
        nd = x.ndim
        if mode == EVAL:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self._bcast(self.running_mean, nd)) * self._bcast(inv, nd)
            return xhat * self._bcast(self.gamma.value, nd) + self._bcast(self.beta.value, nd), None
        if x.shape[0] < 2:
            raise SpecError("batchnorm in train mode needs a batch of at least 2")
        n = x.size // self.num_features
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, nd)) * self._bcast(inv, nd)
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        self.running_var[...] = (1 - m) * self.running_var + m * var * n / (n - 1)
        out = xhat * self._bcast(self.gamma.value, nd) + self._bcast(self.beta.value, nd)
        return out, (xhat, inv, axes)

    def backward(self, cache, grad):
        if cache is None:
            raise SpecError("batchnorm backward requires a train-mode forward cache")
        xhat, inv, axes = cache
        if grad.shape != xhat.shape:
            raise SpecError("upstream gradient does not match batchnorm output")
        nd = grad.ndim
        n = grad.size // self.num_features
        self.gamma.grad += (grad * xhat).sum(axis=axes)
        self.beta.grad += grad.sum(axis=axes)
        dxhat = grad * self._bcast(self.gamma.value, nd)
        s1 = self._bcast(dxhat.sum(axis=axes), nd)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), nd)
        return self._bcast(inv, nd) / n * (n * dxhat - s1 - xhat * s2)


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, negative_slope: float = 0.01):
        self.negative_slope = negative_slope

    def forward(self, x, mode=TRAIN):
        pos = x > 0
        return np.where(pos, x, self.negative_slope * x), pos

    def backward(self, cache, grad):
        if grad.shape != cache.shape:
            raise SpecError("upstream gradient does not match leaky_relu output")
        return np.where(cache, grad, self.negative_slope * grad)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode=TRAIN):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache)


class Reshape(Layer):
    """Reshape the non-batch axes to ``shape``."""

    kind = "reshape"

    def __init__(self, *shape: int):
        self.shape = shape

    def forward(self, x, mode=TRAIN):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax of non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x, mode=TRAIN):
        s = softmax(x, self.axis)
        return s, s

    def backward(self, cache, grad):
        s = cache
        return s * (grad - (grad * s).sum(axis=self.axis, keepdims=True))


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def forward(self, x, mode=TRAIN):
        _check_mode(mode)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, mode)
            caches.append(c)
        return x, caches

    def backward(self, caches, grad):
        if len(caches) != len(self.layers):
            raise SpecError("cache does not belong to this network")
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(c, grad)
        return grad


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def grad_check(module: Layer, x, eps: float = 1e-5, mode: str = TRAIN, weights="random",
               max_coords: int | None = None, seed: int = 0, rtol: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(w * output)``. ``weights="random"`` draws a fixed
    w in [0.5, 1.5]; ``weights="ones"`` is the plain sum of outputs, whose
    gradient vanishes identically through batchnorm and softmax. Gradients are
    checked for every parameter and input coordinate unless ``max_coords``
    caps the number probed per tensor (sampled with ``seed``).

    Central differences carry roundoff of about ``noise = 4 * eps_mach * S / eps``
    with ``S = sum|w * output|``, so a gradient smaller than ``noise / rtol``
    cannot be resolved to ``rtol``. Each coordinate therefore scores
    ``|a - n| / max(|a|, |n|, noise / rtol)``: a plain relative error for
    resolvable gradients, and agreement within the noise for tiny or
    structurally zero ones (e.g. a bias feeding batchnorm).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise SpecError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    saved = {k: v.copy() for k, v in module.buffers().items()}

    def restore():
        for k, v in module.buffers().items():
            v[...] = saved[k]

    out, cache = module.forward(x, mode)
    w = np.ones_like(out) if weights == "ones" else rng.uniform(0.5, 1.5, size=out.shape)
    noise = 4 * np.finfo(np.float64).eps * max(1.0, float(np.sum(np.abs(w * out)))) / eps
    floor = noise / rtol

    def scalar(inp):
        y = module.forward(inp, mode)[0]
        restore()
        v = float(np.sum(w * y))
        if not math.isfinite(v):
            raise NumericError("non-finite output during gradient check")
        return v

    params = module.params()
    zero_grads(params.values())
    dx = module.backward(cache, w)
    restore()
    analytic = [(p.value, p.grad.copy()) for p in params.values()]
    analytic.append((x, dx))

    worst = 0.0
    for arr, grad in analytic:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(x)
            flat[i] = orig - eps
            fm = scalar(x)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = grad.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grads(params.values())
    return worst
