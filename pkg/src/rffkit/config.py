"""Experiment configuration: a schema-checked JSON document with defaults filled in."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import SpecError
from .models import AE_KINDS, KINDS, ModelSpec
from .synth import PRESETS, EmitterSpec, preset
from .tasks import DEFAULT_BATCH


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class EmitterConfig(_Strict):
    emitter_id: int = Field(ge=1)
    iq_gain_imbalance_db: float = 0.0
    quadrature_skew_rad: float = 0.0
    dc_offset_i: float = 0.0
    dc_offset_q: float = 0.0
    cfo_norm: float = 0.0
    phase_noise_std_rad: float = Field(0.0, ge=0)
    pa_cubic_coeff: float = 0.0
    rise_time_samples: int = Field(0, ge=0)


class PopulationConfig(_Strict):
    preset: Optional[str] = None  # "four-emitters-easy" when no emitters are listed
    emitters: Optional[list[EmitterConfig]] = None
    snr_db: Optional[float] = 20.0
    bursts_per_emitter: int = Field(400, ge=1)
    burst_len: int = Field(256, ge=8)
    oversample: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.preset is not None and self.emitters is not None:
            raise ValueError("give either 'preset' or 'emitters', not both")
        if self.preset is None and self.emitters is None:
            self.preset = "four-emitters-easy"
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.emitters is not None:
            ids = [e.emitter_id for e in self.emitters]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate emitter ids: {ids}")
            if len(ids) < 2:
                raise ValueError("a population needs at least two emitters")
        if self.burst_len % self.oversample:
            raise ValueError("burst_len must be a multiple of oversample")
        return self

    def specs(self) -> list[EmitterSpec]:
        if self.preset is not None:
            return preset(self.preset)
        return [EmitterSpec(**e.model_dump()) for e in self.emitters]

    @property
    def payload_symbols(self) -> int:
        return self.burst_len // self.oversample


class TaskConfig(_Strict):
    kind: Literal["SEI", "EDA", "RFEC"] = "SEI"
    margin: float = Field(1.0, gt=0)
    distance: Literal["euclidean", "cosine"] = "euclidean"
    alpha: float = Field(0.5, gt=0, le=1)  # matched share of EDA pairs
    gamma: int = Field(20000, ge=10)  # total EDA pairs over train + valid + test
    proportion: float = Field(1.0, gt=0, le=1)


class ModelConfig(_Strict):
    kind: Optional[str] = None  # FCN for SEI/EDA, simpleAE for RFEC
    embed_dim: int = Field(64, ge=1)
    widths: Optional[list[int]] = None
    channels: Optional[list[int]] = None
    kernel_size: Optional[int] = None
    negative_slope: float = 0.01

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v is not None and v not in KINDS:
            raise ValueError(f"unknown model kind {v!r}; choose from {list(KINDS)}")
        return v


class TrainSection(_Strict):
    lr: float = Field(1e-3, gt=0)
    epochs: int = Field(200, ge=1)
    batch_size: Optional[int] = Field(None, ge=2)
    weight_decay: float = Field(5e-4, ge=0)
    patience: Optional[int] = Field(None, ge=1)
    p_v: float = Field(0.1, gt=0, lt=1)
    p_t: float = Field(0.1, ge=0, lt=1)


class EvalSection(_Strict):
    artifacts: Optional[list[str]] = None  # None = every artifact valid for the task
    ks: list[int] = Field(default_factory=lambda: list(range(2, 10)))
    snr: list[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    msp_thresholds: list[float] = Field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])

    @field_validator("ks")
    @classmethod
    def _ks(cls, v):
        if not v or min(v) < 2:
            raise ValueError("K values must be >= 2")
        return v


class OSRSection(_Strict):
    heldout: list[int] = Field(default_factory=list)
    proportions: list[float] = Field(default_factory=lambda: [1.0])

    @field_validator("proportions")
    @classmethod
    def _props(cls, v):
        if not v or any(not 0 < p <= 1 for p in v):
            raise ValueError("proportions must lie in (0, 1]")
        return v


class ExperimentConfig(_Strict):
    seed: int = 0
    population: PopulationConfig = Field(default_factory=PopulationConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    osr: OSRSection = Field(default_factory=OSRSection)

    @model_validator(mode="after")
    def _fill(self):
        if self.train.batch_size is None:
            self.train.batch_size = DEFAULT_BATCH[self.task.kind]
        if self.model.kind is None:
            self.model.kind = "simpleAE" if self.task.kind == "RFEC" else "FCN"
        ae = self.model.kind in AE_KINDS
        if (self.task.kind == "RFEC") != ae:
            raise ValueError(f"task {self.task.kind} cannot use model {self.model.kind}")
        return self

    def model_spec(self, n_classes: int | None) -> ModelSpec:
        m = self.model
        return ModelSpec(m.kind, input_len=self.population.burst_len, embed_dim=m.embed_dim,
                         n_classes=n_classes, widths=tuple(m.widths) if m.widths else None,
                         channels=tuple(m.channels) if m.channels else None,
                         kernel_size=m.kernel_size, negative_slope=m.negative_slope)

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _flatten_errors(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())


def parse_config(doc: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc or {})
    except ValidationError as exc:
        raise SpecError(f"invalid config: {_flatten_errors(exc)}") from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (or start from defaults) and apply dotted-key overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise SpecError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise SpecError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise SpecError("config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = doc
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    return parse_config(doc)
