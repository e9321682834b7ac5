"""Minibatch maximum-likelihood / ELBO training with Adam."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..diffkit import AdamConfig, Tape, adam_step
from ..seqdata import Dataset
from .base import SequenceModel
from .common import NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    kl_weight: float = 1.0
    clip_norm: float | None = None
    val_seed: int = 12345

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def train_step(model: SequenceModel, batch, cfg: TrainConfig, rng: np.random.Generator) -> float:
    """One Adam update on the mean per-event negative objective; returns the loss."""
    tape = Tape()
    params = model.store.attach(tape)
    loss, _ = model.loss(tape, params, batch, rng, kl_weight=cfg.kl_weight)
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at optimizer step {model.store.step}")
    grads = tape.gradients(loss, params)
    if cfg.clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
    adam_step(model.store, grads, AdamConfig(lr=cfg.lr))
    return value


def evaluate_loss(model: SequenceModel, ds: Dataset, batch_size: int = 64, seed: int = 12345) -> float:
    """Mean per-event negative objective over ``ds`` (fixed noise for latent models)."""
    total, count = 0.0, 0
    rng = np.random.default_rng(seed)
    for lo in range(0, len(ds), batch_size):
        batch = model.make_batch(ds.sequences[lo:lo + batch_size])
        per, _ = model._eval_objective(batch, rng)
        total += float(np.sum(per[batch.mask]))
        count += batch.num_events
    return -total / max(count, 1)


def train(model: SequenceModel, train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          log_path=None, start_epoch: int = 0, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Train in place, keeping the best validation parameters at the end.

    Each epoch appends ``{epoch, train_loss, val_loss, wall_time}`` to the
    returned history (and to ``log_path`` as JSONL when given).  A non-finite
    loss restores the last good parameters before re-raising.
    """
    model.check_dataset(train_ds)
    rng = np.random.default_rng([cfg.seed, start_epoch])
    history: list[dict] = []
    best = (math.inf, model.store.copy())
    good = model.store.copy()
    out = None if log_path is None else Path(log_path).open("a", encoding="utf-8")
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_ds))
            losses, weights = [], []
            for lo in range(0, len(order), cfg.batch_size):
                seqs = [train_ds.sequences[i] for i in order[lo:lo + cfg.batch_size]]
                batch = model.make_batch(seqs)
                try:
                    losses.append(train_step(model, batch, cfg, rng))
                except NumericalError:
                    model.store = good
                    model.flow.store = good
                    raise
                weights.append(batch.num_events)
            train_loss = float(np.average(losses, weights=weights))
            val_loss = evaluate_loss(model, val_ds, seed=cfg.val_seed) if val_ds is not None and len(val_ds) else train_loss
            rec = {"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss,
                   "wall_time": time.perf_counter() - t0}
            history.append(rec)
            log.info("epoch %d train %.4f val %.4f (%.1fs)", rec["epoch"], train_loss, val_loss, rec["wall_time"])
            if out is not None:
                out.write(json.dumps(rec) + "\n")
                out.flush()
            if on_epoch is not None:
                on_epoch(rec)
            good = model.store.copy()
            if val_loss < best[0]:
                best = (val_loss, model.store.copy())
    finally:
        if out is not None:
            out.close()
    if history:
        model.store = best[1]
        model.flow.store = best[1]
    return history


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
