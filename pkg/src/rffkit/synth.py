"""Synthetic emitter population: QPSK bursts carrying hardware impairments.

An emitter's identity lives only in its impairment parameters. Every burst
shares the same 8-symbol preamble and carries a seeded random QPSK payload,
so nothing but the transmitter chain distinguishes one emitter from another.

Impairments are applied in this fixed order:

    rise-time ramp -> IQ gain imbalance -> quadrature skew
    -> cubic PA nonlinearity -> CFO rotation -> phase-noise random walk
    -> (unit-RMS normalisation) -> DC offset
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, SpecError

QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j], dtype=np.complex128) / math.sqrt(2.0)
PREAMBLE_SYMBOLS = np.array([0, 1, 3, 2, 0, 3, 1, 2])

DEFAULT_PAYLOAD_SYMBOLS = 64
DEFAULT_OVERSAMPLE = 4


@dataclass(frozen=True)
class EmitterSpec:
    emitter_id: int
    iq_gain_imbalance_db: float = 0.0
    quadrature_skew_rad: float = 0.0
    dc_offset_i: float = 0.0
    dc_offset_q: float = 0.0
    cfo_norm: float = 0.0
    phase_noise_std_rad: float = 0.0
    pa_cubic_coeff: float = 0.0
    rise_time_samples: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(float(v)):
                raise SpecError(f"emitter {self.emitter_id}: {f.name} is not finite")
        if self.rise_time_samples < 0:
            raise SpecError("rise_time_samples must be >= 0")
        if abs(self.pa_cubic_coeff) >= 1:
            raise SpecError("|pa_cubic_coeff| must be < 1")
        if self.phase_noise_std_rad < 0:
            raise SpecError("phase_noise_std_rad must be >= 0")

    def impairment_vector(self) -> tuple:
        return dataclasses.astuple(self)[1:]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmitterSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SpecError(f"unknown emitter fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IQBurst:
    samples: np.ndarray  # complex128, shape (n,)
    label: int | None = None
    snr_db: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise SpecError("burst must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise SpecError("burst contains non-finite samples")

    @property
    def iq(self) -> np.ndarray:
        """Samples as an (n, 2) array of (i, q) pairs."""
        return np.stack([self.samples.real, self.samples.imag], axis=-1)

    def __len__(self):
        return self.samples.size


@dataclass
class LabeledDataset:
    """Equal-length labelled bursts stored as one complex matrix."""

    x: np.ndarray  # (n, burst_len) complex128
    labels: np.ndarray  # (n,) int64
    snr_db: np.ndarray  # (n,) float64, NaN = clean
    specs: list[EmitterSpec] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.complex128)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snr_db = np.asarray(self.snr_db, dtype=np.float64)
        if self.x.ndim != 2:
            raise SpecError("dataset samples must be (n, burst_len)")
        n = self.x.shape[0]
        if self.labels.shape != (n,) or self.snr_db.shape != (n,):
            raise SpecError("labels / snr arrays do not match the number of bursts")

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, k: int) -> IQBurst:
        snr = float(self.snr_db[k])
        return IQBurst(self.x[k], int(self.labels[k]), None if math.isnan(snr) else snr)

    @property
    def bursts(self) -> list[IQBurst]:
        return [self[k] for k in range(len(self))]

    @property
    def burst_len(self) -> int:
        return self.x.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def V(self) -> int:
        return len(self.classes)

    def census(self) -> dict[int, int]:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        keep = set(int(v) for v in np.unique(self.labels[idx]))
        specs = [s for s in self.specs if s.emitter_id in keep]
        return LabeledDataset(self.x[idx], self.labels[idx], self.snr_db[idx], specs, dict(self.meta))

    def select_labels(self, labels: Iterable[int]) -> "LabeledDataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(labels))))


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("RFFKIT_THREADS", "1")))
    except ValueError:
        return 1


def ideal_symbols(payload_symbols: int, rng: np.random.Generator) -> np.ndarray:
    """Preamble followed by ``payload_symbols - 8`` random QPSK symbols."""
    payload = rng.integers(0, 4, size=payload_symbols - len(PREAMBLE_SYMBOLS))
    return QPSK[np.concatenate([PREAMBLE_SYMBOLS, payload])]


def synth_burst(spec: EmitterSpec, payload_symbols: int = DEFAULT_PAYLOAD_SYMBOLS,
                oversample: int = DEFAULT_OVERSAMPLE, seed: int = 0) -> IQBurst:
    """Generate one clean burst for ``spec``.

    ``payload_symbols`` counts all symbols including the 8-symbol preamble, so
    the burst holds ``payload_symbols * oversample`` complex samples.
    """
    if payload_symbols < len(PREAMBLE_SYMBOLS):
        raise SpecError(f"payload_symbols must be >= {len(PREAMBLE_SYMBOLS)}")
    if oversample < 2:
        raise SpecError("oversample must be >= 2")
    n = payload_symbols * oversample
    if spec.rise_time_samples >= n:
        raise SpecError("rise_time_samples must be shorter than the burst")

    rng = np.random.default_rng(seed)
    x = np.repeat(ideal_symbols(payload_symbols, rng), oversample)
    idx = np.arange(n, dtype=np.float64)

    if spec.rise_time_samples > 0:
        x = x * np.minimum(1.0, (idx + 1.0) / (spec.rise_time_samples + 1.0))

    g = 10.0 ** (spec.iq_gain_imbalance_db / 40.0)
    i, q = x.real * g, x.imag / g
    phi = spec.quadrature_skew_rad
    x = i + 1j * (q * math.cos(phi) + i * math.sin(phi))

    x = x + spec.pa_cubic_coeff * x * np.abs(x) ** 2
    x = x * np.exp(2j * np.pi * spec.cfo_norm * idx)
    if spec.phase_noise_std_rad > 0:
        walk = np.cumsum(rng.normal(0.0, spec.phase_noise_std_rad, size=n))
        x = x * np.exp(1j * walk)

    x = x / math.sqrt(np.mean(np.abs(x) ** 2))
    x = x + (spec.dc_offset_i + 1j * spec.dc_offset_q)
    return IQBurst(x, label=spec.emitter_id)


def add_awgn(burst: IQBurst, snr_db: float, seed: int = 0) -> IQBurst:
    """Add complex white Gaussian noise at ``snr_db`` relative to the burst power."""
    if burst.snr_db is not None:
        raise SpecError("burst already carries noise; refusing to add more")
    if not math.isfinite(snr_db):
        raise SpecError("snr_db must be finite")
    x = burst.samples
    p_signal = float(np.mean(np.abs(x) ** 2))
    sigma2 = p_signal / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size)
    return IQBurst(x + math.sqrt(sigma2 / 2.0) * noise, burst.label, float(snr_db))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def synth_dataset(specs: Sequence[EmitterSpec], bursts_per_emitter: int, snr_db: float | None,
                  seed: int, payload_symbols: int = DEFAULT_PAYLOAD_SYMBOLS,
                  oversample: int = DEFAULT_OVERSAMPLE) -> LabeledDataset:
    """Bursts for every emitter; ``snr_db=None`` leaves them clean."""
    if len(specs) < 2:
        raise SpecError("a population needs at least two emitters")
    ids = [s.emitter_id for s in specs]
    if len(set(ids)) != len(ids):
        raise SpecError(f"duplicate emitter ids in population: {ids}")
    if bursts_per_emitter < 1:
        raise SpecError("bursts_per_emitter must be >= 1")

    jobs = [(s, k) for s in specs for k in range(bursts_per_emitter)]

    def make(job):
        s, k = job
        b = synth_burst(s, payload_symbols, oversample, derive_seed(seed, s.emitter_id, k, 0))
        if snr_db is not None:
            b = add_awgn(b, snr_db, derive_seed(seed, s.emitter_id, k, 1))
        return b

    with ThreadPoolExecutor(_max_workers()) as pool:
        bursts = list(pool.map(make, jobs))
    x = np.stack([b.samples for b in bursts])
    labels = np.array([s.emitter_id for s, _ in jobs])
    snr = np.full(len(jobs), np.nan if snr_db is None else float(snr_db))
    meta = dict(seed=seed, bursts_per_emitter=bursts_per_emitter, snr_db=snr_db,
                payload_symbols=payload_symbols, oversample=oversample)
    return LabeledDataset(x, labels, snr, list(specs), meta)


def noisy_copy(ds: LabeledDataset, snr_db: float, seed: int) -> LabeledDataset:
    """Noise every (clean) burst of ``ds`` at ``snr_db``; per-burst seeds derive from ``seed``."""
    out = np.empty_like(ds.x)
    for k in range(len(ds)):
        out[k] = add_awgn(ds[k], snr_db, derive_seed(seed, k)).samples
    return LabeledDataset(out, ds.labels.copy(), np.full(len(ds), float(snr_db)), list(ds.specs),
                          dict(ds.meta, snr_db=snr_db))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ds: LabeledDataset, p_v: float = 0.1, p_t: float = 0.1, seed: int = 0):
    """Label-stratified train/valid/test split. Returns three index arrays."""
    if not (0 <= p_v and 0 <= p_t and p_v + p_t < 1):
        raise SpecError("need p_v, p_t >= 0 and p_v + p_t < 1")
    if p_v <= 0:
        raise SpecError("a validation split is required for early stopping (p_v > 0)")
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for c in ds.classes:
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_v = _round_half_up(p_v * idx.size)
        n_t = _round_half_up(p_t * idx.size)
        if idx.size - n_v - n_t < 1:
            raise SpecError(f"emitter {int(c)} would have no training samples")
        valid.append(idx[:n_v])
        test.append(idx[n_v:n_v + n_t])
        train.append(idx[n_v + n_t:])
    train, valid, test = (np.sort(np.concatenate(p)) for p in (train, valid, test))
    if valid.size == 0:
        raise SpecError("validation split is empty")
    return train, valid, test


# --- populations -----------------------------------------------------------

def _preset_four_easy() -> list[EmitterSpec]:
    # DC offsets sit on distinct corners; every other knob also differs.
    return [
        EmitterSpec(1, 1.0, 0.08, 0.25, 0.25, 0.0030, 0.002, 0.05, 6),
        EmitterSpec(2, -1.0, -0.08, -0.25, 0.25, -0.0030, 0.002, 0.12, 18),
        EmitterSpec(3, 0.5, 0.15, -0.25, -0.25, 0.0060, 0.003, -0.08, 10),
        EmitterSpec(4, -0.5, -0.15, 0.25, -0.25, -0.0060, 0.002, 0.00, 28),
    ]


def _preset_eight_dmr_like() -> list[EmitterSpec]:
    # (3,4), (5,6) and (7,8) share a hardware model and differ only slightly.
    return [
        EmitterSpec(1, 0.9, 0.08, 0.10, -0.06, 0.0030, 0.002, 0.10, 8),
        EmitterSpec(2, -0.7, -0.07, -0.09, 0.08, -0.0030, 0.002, -0.06, 20),
        EmitterSpec(3, 0.40, 0.030, 0.050, 0.050, 0.0012, 0.002, 0.05, 12),
        EmitterSpec(4, 0.45, 0.035, 0.060, 0.045, 0.0014, 0.002, 0.05, 12),
        EmitterSpec(5, -0.30, 0.100, -0.050, 0.100, -0.0015, 0.003, 0.08, 16),
        EmitterSpec(6, -0.25, 0.090, -0.060, 0.110, -0.0017, 0.003, 0.08, 16),
        EmitterSpec(7, 0.10, -0.120, 0.120, 0.000, 0.0005, 0.002, -0.04, 24),
        EmitterSpec(8, 0.15, -0.110, 0.110, 0.010, 0.0007, 0.002, -0.04, 24),
    ]


PRESETS = {
    "four-emitters-easy": _preset_four_easy,
    "eight-emitters-dmr-like": _preset_eight_dmr_like,
}


def preset(name: str) -> list[EmitterSpec]:
    try:
        return PRESETS[name]()
    except KeyError:
        raise SpecError(f"unknown population preset {name!r}; choose from {sorted(PRESETS)}") from None


# --- RFFD file format --------------------------------------------------------

RFFD_MAGIC = b"RFFD"
RFFD_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def _record_dtype(burst_len: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("snr", "<f4"), ("iq", "<f4", (burst_len, 2))])


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_rffd(path, ds: LabeledDataset) -> None:
    path = Path(path)
    rec = np.empty(len(ds), dtype=_record_dtype(ds.burst_len))
    rec["label"] = ds.labels
    rec["snr"] = ds.snr_db
    rec["iq"][..., 0] = ds.x.real
    rec["iq"][..., 1] = ds.x.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RFFD_MAGIC, RFFD_VERSION, len(ds), ds.burst_len, ds.V))
        fh.write(rec.tobytes())
    meta = dict(ds.meta, emitters=[s.to_dict() for s in ds.specs])
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_rffd(path) -> LabeledDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, burst_len, V = _HEADER.unpack_from(raw)
    if magic != RFFD_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != RFFD_VERSION:
        raise DataError(f"{path}: unsupported RFFD version {version}")
    dt = _record_dtype(burst_len)
    body = raw[_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise DataError(f"{path}: expected {n} bursts of length {burst_len}, file size disagrees")
    rec = np.frombuffer(body, dtype=dt, count=n)
    x = rec["iq"][..., 0].astype(np.float64) + 1j * rec["iq"][..., 1].astype(np.float64)
    ds = LabeledDataset(x, rec["label"].astype(np.int64), rec["snr"].astype(np.float64))
    if ds.V != V:
        raise DataError(f"{path}: header says V={V} but labels have {ds.V} classes")
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        ds.specs = [EmitterSpec.from_dict(d) for d in meta.pop("emitters", [])]
        ds.meta = meta
    return ds
