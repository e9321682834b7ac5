"""Sequence models (flow-based and intensity baseline), training and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

from ..diffkit import ParameterStore
from ..flow import OutputMap
from .base import SequenceModel
from .baseline import IntensityBaseline, exponential_loglik
from .common import (
    Batch,
    IncompatibleDataError,
    ModelConfig,
    NumericalError,
    SampleCounts,
    fit_output_map,
    kl_diag_gaussians,
)
from .ppfd import PpfD
from .ppfp import PpfP
from .train import TrainConfig, evaluate_loss, train, train_step

MODEL_CLASSES = {"ppfd": PpfD, "ppfp": PpfP, "baseline": IntensityBaseline}


def build_model(cfg: ModelConfig, omap: OutputMap | None = None, store: ParameterStore | None = None) -> SequenceModel:
    return MODEL_CLASSES[cfg.kind](cfg, omap, store)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_checkpoint(model: SequenceModel, path, extra: dict | None = None) -> Path:
    """Parameters (and Adam state) to ``path``; architecture and output map to a sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.store.save(path)
    meta = {"model": model.cfg.to_dict(), "output_map": model.omap.to_dict(), "extra": extra or {}}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[SequenceModel, dict]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    cfg = ModelConfig(**meta["model"])
    omap = OutputMap(**meta["output_map"])
    model = build_model(cfg, omap, ParameterStore.load(path))
    expected = build_model(cfg, omap).store
    if set(expected) != set(model.store) or any(expected[k].shape != model.store[k].shape for k in expected):
        raise ValueError(f"checkpoint {path} does not match its declared architecture")
    return model, meta.get("extra", {})


__all__ = [
    "Batch",
    "IncompatibleDataError",
    "IntensityBaseline",
    "MODEL_CLASSES",
    "ModelConfig",
    "NumericalError",
    "PpfD",
    "PpfP",
    "SampleCounts",
    "SequenceModel",
    "TrainConfig",
    "build_model",
    "evaluate_loss",
    "exponential_loglik",
    "fit_output_map",
    "kl_diag_gaussians",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "train_step",
]
