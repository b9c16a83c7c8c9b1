"""RF fingerprinting toolkit: synthetic emitters, numpy models, SEI/EDA/RFEC training and evaluation."""
from __future__ import annotations

from .errors import CheckpointError, DataError, NumericError, RFFError, SpecError
from .models import Model, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .pairs import PairDataset, build_pair_dataset, matched_ratio, plan_counts
from .synth import EmitterSpec, LabeledDataset, preset, read_rffd, synth_dataset, write_rffd
from .tasks import TaskSpec
from .training import TrainConfig, aggregate_params, train_joint, train_single_task

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "DataError", "NumericError", "RFFError", "SpecError",
    "Model", "ModelSpec", "build_model", "load_checkpoint", "save_checkpoint",
    "PairDataset", "build_pair_dataset", "matched_ratio", "plan_counts",
    "EmitterSpec", "LabeledDataset", "preset", "read_rffd", "synth_dataset", "write_rffd",
    "TaskSpec", "TrainConfig", "aggregate_params", "train_joint", "train_single_task",
]
