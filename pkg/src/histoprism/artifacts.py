"""Checkpoint and prediction files (both use the container format)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import containers
from .containers import FormatError
from .model import ModelConfig, TrainConfig, TrainingTrace, param_shapes

CHECKPOINT_MAGIC = b"HPCKPT01"
PREDICTION_MAGIC = b"HPPRED01"


@dataclass
class Checkpoint:
    config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    trace: TrainingTrace
    split: int = 0
    dataset_digest: str = ""


def save_checkpoint(ck: Checkpoint, path) -> None:
    meta = {"model": ck.config.to_dict(), "train": ck.train_config.to_dict(), "trace": ck.trace.to_dict(),
            "split": ck.split, "dataset_digest": ck.dataset_digest}
    ordered = {name: ck.params[name] for name in param_shapes(ck.config)}
    containers.write(path, CHECKPOINT_MAGIC, meta, ordered)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = containers.read(path, CHECKPOINT_MAGIC)
    config = ModelConfig.from_dict(meta["model"])
    expected = param_shapes(config)
    if list(tensors) != list(expected):
        raise FormatError(path, 16, "parameter names do not match the stored model config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(path, 16, f"{name}: shape {tensors[name].shape}, expected {shape}")
    return Checkpoint(config, TrainConfig.from_dict(meta["train"]), tensors,
                      TrainingTrace.from_dict(meta["trace"]), int(meta["split"]), meta["dataset_digest"])


@dataclass
class Prediction:
    slide_id: str
    cancer_label: str
    split: int
    values: np.ndarray  # N x d_gene

    @property
    def key(self) -> str:
        return f"{self.split}:{self.slide_id}"


def write_predictions(preds: list[Prediction], directory, extra_meta: Mapping | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in preds:
        path = directory / f"split{p.split}_{p.slide_id}.hpp"
        meta = {"slide_id": p.slide_id, "cancer_label": p.cancer_label, "split": p.split, **(extra_meta or {})}
        containers.write(path, PREDICTION_MAGIC, meta, {"prediction": p.values})
        paths.append(path)
    return paths


def read_predictions(directory) -> list[Prediction]:
    out = []
    for path in sorted(Path(directory).glob("*.hpp")):
        meta, t = containers.read(path, PREDICTION_MAGIC)
        if "prediction" not in t:
            raise FormatError(path, 16, "no prediction tensor")
        out.append(Prediction(meta["slide_id"], meta["cancer_label"], int(meta["split"]), t["prediction"]))
    if not out:
        raise FileNotFoundError(f"no prediction files in {directory}")
    return out
