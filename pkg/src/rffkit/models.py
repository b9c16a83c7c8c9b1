"""Fingerprint heads and task heads assembled from :mod:`rffkit.nn` layers.

A :class:`Model` pairs an ``encoder`` (the fingerprint head, mapping a burst to
an embedding) with an optional ``head``: a linear classifier for SEI, or a
decoder for the autoencoders used in emitter clustering. EDA models carry no
learnable head; their task head is a distance between two embeddings.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import CheckpointError, SpecError

CLASSIFIER_KINDS = ("FCN", "BCNN")
AE_KINDS = ("simpleAE", "verysimpleAE", "simpleconv1DAE", "vanillaAE")
KINDS = CLASSIFIER_KINDS + AE_KINDS
CONV_INPUT_KINDS = ("BCNN", "simpleconv1DAE")

CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    kind: str
    input_len: int = 256
    embed_dim: int = 64
    n_classes: int | None = None
    widths: tuple[int, ...] | None = None  # hidden FC widths
    channels: tuple[int, ...] | None = None  # conv channel counts (BCNN, simpleconv1DAE)
    kernel_size: int | None = None
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        if self.embed_dim < 2:
            raise SpecError("embed_dim must be >= 2")
        if self.input_len < 1:
            raise SpecError("input_len must be positive")
        if self.n_classes is not None:
            if self.kind in AE_KINDS:
                raise SpecError("autoencoders do not take a classifier head")
            if self.n_classes < 2:
                raise SpecError("n_classes must be >= 2")
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
        if self.channels is not None:
            self.channels = tuple(int(c) for c in self.channels)

    @property
    def is_autoencoder(self) -> bool:
        return self.kind in AE_KINDS

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("widths", "channels"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SpecError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


def _halving(start: int, embed: int, n_hidden: int) -> list[int]:
    return [max(embed, start // 2 ** i) for i in range(1, n_hidden + 1)]


def _mlp(sizes, rng, slope, batchnorm=False, act_last=False) -> list[nn.Layer]:
    layers: list[nn.Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b, rng))
        last = i == len(sizes) - 2
        if not last or act_last:
            if batchnorm:
                layers.append(nn.BatchNorm1d(b))
            layers.append(nn.LeakyReLU(slope))
    return layers


def bcnn_lengths(spec: ModelSpec) -> list[int]:
    """Temporal length entering each BCNN block, plus the final length."""
    k = spec.kernel_size or 5
    pad = k // 2
    lengths = [spec.input_len]
    for _ in range(5):
        conv_len = lengths[-1] + 2 * pad - k + 1
        if conv_len < 2 or conv_len % 2:
            raise SpecError(f"input_len {spec.input_len} does not divide through the BCNN pooling chain")
        lengths.append(conv_len // 2)
    return lengths


def _build_layers(spec: ModelSpec, rng) -> tuple[list[nn.Layer], list[nn.Layer]]:
    s = spec.negative_slope
    d_in = 2 * spec.input_len
    E = spec.embed_dim
    kind = spec.kind

    if kind == "FCN":
        widths = list(spec.widths or (512, 256))
        enc = [nn.Flatten()] + _mlp([d_in, *widths, E], rng, s)
        head = [nn.Linear(E, spec.n_classes, rng)] if spec.n_classes else []
        return enc, head

    if kind == "BCNN":
        k = spec.kernel_size or 5
        if k % 2 == 0:
            raise SpecError("BCNN kernel_size must be odd")
        chans = [2, *(spec.channels or (16, 32, 32, 64, 64))]
        if len(chans) != 6:
            raise SpecError("BCNN needs exactly five channel counts")
        lengths = bcnn_lengths(spec)
        enc: list[nn.Layer] = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            enc += [nn.Conv1d(c_in, c_out, k, 1, k // 2, rng), nn.BatchNorm1d(c_out),
                    nn.LeakyReLU(s), nn.MaxPool1d(2, 2)]
        enc += [nn.Flatten(), nn.Linear(chans[-1] * lengths[-1], E, rng)]
        head = [nn.Linear(E, spec.n_classes, rng)] if spec.n_classes else []
        return enc, head

    if kind in ("simpleAE", "verysimpleAE", "vanillaAE"):
        n = {"simpleAE": 4, "verysimpleAE": 1, "vanillaAE": 3}[kind]
        hidden = list(spec.widths) if spec.widths else _halving(d_in, E, n - 1)
        if len(hidden) != n - 1:
            raise SpecError(f"{kind} needs {n - 1} hidden widths")
        bn = kind == "vanillaAE"
        enc = [nn.Flatten()] + _mlp([d_in, *hidden, E], rng, s, bn)
        dec = _mlp([E, *hidden[::-1], d_in], rng, s, bn)
        return enc, dec

    # simpleconv1DAE: 3 x (conv -> BN -> leaky) then 3 FC layers; FC decoder.
    k = spec.kernel_size or 4
    chans = [2, *(spec.channels or (8, 16, 16))]
    if len(chans) != 4:
        raise SpecError("simpleconv1DAE needs exactly three channel counts")
    enc = []
    length = spec.input_len
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        conv = nn.Conv1d(c_in, c_out, k, 2, (k - 2) // 2, rng)
        length = conv.output_length(length)
        enc += [conv, nn.BatchNorm1d(c_out), nn.LeakyReLU(s)]
    flat = chans[-1] * length
    hidden = list(spec.widths) if spec.widths else _halving(flat, E, 2)
    if len(hidden) != 2:
        raise SpecError("simpleconv1DAE needs 2 hidden FC widths")
    enc += [nn.Flatten()] + _mlp([flat, *hidden, E], rng, s)
    dec = _mlp([E, *hidden[::-1], d_in], rng, s) + [nn.Reshape(2, spec.input_len)]
    return enc, dec


class Model:
    def __init__(self, spec: ModelSpec, encoder: nn.Sequential, head: nn.Sequential | None,
                 seed: int = 0, meta: dict | None = None):
        self.spec = spec
        self.encoder = encoder
        self.head = head
        self.seed = seed
        self.meta = dict(meta or {})

    # -- parameters ---------------------------------------------------------
    def parts(self):
        yield "encoder", self.encoder
        if self.head is not None:
            yield "head", self.head

    def params(self) -> dict[str, nn.Parameter]:
        return {f"{part}.{k}": p for part, seq in self.parts() for k, p in seq.params().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{part}.{k}": b for part, seq in self.parts() for k, b in seq.buffers().items()}

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values and running statistics."""
        out = {k: p.value.copy() for k, p in self.params().items()}
        out.update({k: b.copy() for k, b in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        targets = {k: p.value for k, p in self.params().items()}
        targets.update(self.buffers())
        if set(state) != set(targets):
            raise CheckpointError("state names do not match this model")
        for k, arr in targets.items():
            if arr.shape != state[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {state[k].shape}")
            arr[...] = state[k]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params().values())

    def network(self) -> nn.Sequential:
        """Encoder and head chained as one network (shares the layer objects)."""
        return nn.Sequential(*self.encoder.layers, *(self.head.layers if self.head else []))

    # -- data layout --------------------------------------------------------
    def prepare(self, x) -> np.ndarray:
        """Complex bursts (B, L) to this model's native input layout.

        Conv models take (B, 2, L) channel stacks; fully connected models take
        interleaved (B, 2L) vectors [i0, q0, i1, q1, ...].
        """
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_len:
            raise SpecError(f"expected complex bursts (B, {self.spec.input_len}), got {x.shape}")
        if self.spec.kind in CONV_INPUT_KINDS:
            return np.stack([x.real, x.imag], axis=1).astype(np.float64)
        return np.stack([x.real, x.imag], axis=-1).reshape(x.shape[0], -1).astype(np.float64)

    def _check_input(self, batch):
        L = self.spec.input_len
        want = (2, L) if self.spec.kind in CONV_INPUT_KINDS else (2 * L,)
        if batch.ndim != 1 + len(want) or batch.shape[1:] != want:
            raise SpecError(f"{self.spec.kind} expects input (B, {', '.join(map(str, want))}), "
                            f"got {batch.shape}")

    # -- forward passes -----------------------------------------------------
    def embed(self, batch, mode=nn.EVAL) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        self._check_input(batch)
        return self.encoder.forward(batch, mode)[0]

    def predict_logits(self, batch, mode=nn.EVAL) -> np.ndarray:
        if self.head is None or self.spec.is_autoencoder:
            raise SpecError("model has no classifier head")
        return self.head.forward(self.embed(batch, mode), mode)[0]

    def autoencode(self, batch, mode=nn.EVAL) -> np.ndarray:
        if not self.spec.is_autoencoder:
            raise SpecError(f"{self.spec.kind} is not an autoencoder")
        return self.head.forward(self.embed(batch, mode), mode)[0]


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    enc, head = _build_layers(spec, rng)
    return Model(spec, nn.Sequential(*enc), nn.Sequential(*head) if head else None, seed)


def embed_pair(model: Model, x1, x2, mode=nn.EVAL):
    """Two projections through the shared fingerprint head."""
    return model.embed(x1, mode), model.embed(x2, mode)


# -- checkpoints ---------------------------------------------------------------

def _tensor_records(tensors: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in tensors.items()]


def save_checkpoint(model: Model, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "params": _tensor_records({k: p.value for k, p in model.params().items()}),
        "running_stats": _tensor_records(model.buffers()),
        "seed": model.seed,
        "meta": model.meta,
    }
    # json writes floats with repr(), the shortest string that round-trips exactly.
    Path(path).write_text(json.dumps(doc))


def _read_records(records, what) -> dict[str, np.ndarray]:
    out = {}
    for rec in records:
        name = rec["name"]
        if name in out:
            raise CheckpointError(f"duplicate {what} name {name!r}")
        shape = tuple(rec["shape"])
        data = np.asarray(rec["data"], dtype=np.float64)
        if data.size != math.prod(shape):
            raise CheckpointError(f"{what} {name!r}: {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


def load_checkpoint(path, expected_kind: str | None = None) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if doc["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {doc['version']} != {CHECKPOINT_VERSION}")
        spec = ModelSpec.from_dict(doc["spec"])
        if expected_kind is not None and spec.kind != expected_kind:
            raise CheckpointError(f"checkpoint holds a {spec.kind} model, expected {expected_kind}")
        state = _read_records(doc["params"], "parameter")
        buffers = _read_records(doc["running_stats"], "running stat")
        seed, meta = doc.get("seed", 0), doc.get("meta", {})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc!r}") from exc
    if set(state) & set(buffers):
        raise CheckpointError("parameter and running-stat names collide")
    model = build_model(spec, seed)
    model.load_state({**state, **buffers})
    model.meta = meta
    return model
