"""Evaluation metrics: per-event log-likelihood, MAE, mark accuracy, LL score.

Every sequence is evaluated on its own with a generator keyed by
``(seed, sequence id, stream)``, so results do not depend on dataset order
or on the number of worker processes.  Averages use ``math.fsum``, which is
exactly rounded and therefore order-independent as well.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import PpfP, SampleCounts, SequenceModel
from .models.common import sequence_key
from .seqdata import Dataset
from .simulate import (
    SwitchingSpec,
    dataset_ground_truth_loglik,
    named_process,
    switching_ground_truth_loglik,
)

STREAM_IWAE = 1
STREAM_MAE = 2
STREAM_ACCURACY = 3


class MissingTruthError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iwae_samples: int = 1500
    mae_prior_samples: int = 100
    mae_decoder_samples: int = 15
    mae_flat_samples: int = 1500
    accuracy_prior_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        counts = (self.iwae_samples, self.mae_prior_samples, self.mae_decoder_samples,
                  self.mae_flat_samples, self.accuracy_prior_samples)
        if min(counts) < 1:
            raise ValueError("evaluation sample counts must be >= 1")

    @property
    def mae_counts(self) -> SampleCounts:
        return SampleCounts(self.mae_prior_samples, self.mae_decoder_samples, self.mae_flat_samples)

    @property
    def accuracy_counts(self) -> SampleCounts:
        return SampleCounts(self.accuracy_prior_samples, 1, 1)


@dataclass
class MetricsReport:
    model_id: str
    dataset_id: str
    avg_ll: float
    ll_is_bound: bool
    num_events: int
    mae: float | None = None
    mae_units: str = "raw"
    accuracy: float | None = None
    ll_truth: float | None = None
    ll_score: float | None = None
    per_sequence: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("avg_ll", "mae", "accuracy", "ll_truth", "ll_score"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"non-finite metric {name}={v}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --- per-sequence kernels ---------------------------------------------------


def sequence_logliks(model: SequenceModel, seq, cfg: EvalConfig) -> np.ndarray:
    """Per-event LL of one sequence (IWAE bound for the latent model)."""
    if isinstance(model, PpfP):
        return model.sequence_iwae(seq, cfg.iwae_samples, seed=cfg.seed)
    steps, _ = model.sequence_loglik(seq)
    return steps


def sequence_abs_errors(model: SequenceModel, seq, cfg: EvalConfig) -> np.ndarray:
    """Per-event Monte Carlo estimate of ``E|tau_sample - tau*|``."""
    batch = model.make_batch([seq])
    rng = sequence_key(cfg.seed, seq.id, STREAM_MAE)
    samples = model.predictive_samples(batch, cfg.mae_counts, rng)[:, 0, :]
    return np.mean(np.abs(samples - np.asarray(seq.taus)[:, None]), axis=-1)


def sequence_mark_hits(model: SequenceModel, seq, cfg: EvalConfig) -> np.ndarray:
    batch = model.make_batch([seq])
    rng = sequence_key(cfg.seed, seq.id, STREAM_ACCURACY)
    pred = model.mark_predictions(batch, cfg.accuracy_counts, rng)[:, 0]
    return pred == np.asarray(seq.marks)


_KERNELS = {"ll": sequence_logliks, "mae": sequence_abs_errors, "acc": sequence_mark_hits}


def _run_chunk(args):
    kind, model, seqs, cfg = args
    return [_KERNELS[kind](model, s, cfg) for s in seqs]


def per_sequence(kind: str, model: SequenceModel, ds: Dataset, cfg: EvalConfig, workers: int = 1) -> list[np.ndarray]:
    seqs = list(ds.sequences)
    if workers <= 1 or len(seqs) < 2:
        return _run_chunk((kind, model, seqs, cfg))
    size = math.ceil(len(seqs) / workers)
    chunks = [(kind, model, seqs[i:i + size], cfg) for i in range(0, len(seqs), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [r for part in pool.map(_run_chunk, chunks) for r in part]


def _event_mean(parts: list[np.ndarray]) -> float:
    n = sum(p.size for p in parts)
    if n == 0:
        raise ValueError("dataset has no events")
    return math.fsum(float(x) for p in parts for x in np.ravel(p)) / n


# --- metrics ----------------------------------------------------------------


def avg_loglik(model: SequenceModel, ds: Dataset, cfg: EvalConfig = EvalConfig(), workers: int = 1) -> tuple[float, bool]:
    """Mean per-event LL over all events; the flag marks an IWAE lower bound."""
    model.check_dataset(ds)
    return _event_mean(per_sequence("ll", model, ds, cfg, workers)), isinstance(model, PpfP)


def mae(model: SequenceModel, ds: Dataset, cfg: EvalConfig = EvalConfig(), workers: int = 1) -> float:
    model.check_dataset(ds)
    return _event_mean(per_sequence("mae", model, ds, cfg, workers))


def accuracy(model: SequenceModel, ds: Dataset, cfg: EvalConfig = EvalConfig(), workers: int = 1) -> float:
    if not ds.marked or not model.marked:
        raise ValueError("accuracy needs a marked model and a marked dataset")
    model.check_dataset(ds)
    return _event_mean([h.astype(np.float64) for h in per_sequence("acc", model, ds, cfg, workers)])


def truth_loglik(ds: Dataset) -> float:
    """Average per-event LL under the process recorded in the dataset metadata."""
    process = (ds.meta or {}).get("process")
    if process == "switching":
        spec = ds.meta.get("spec")
        return switching_ground_truth_loglik(ds, SwitchingSpec(**spec) if spec else SwitchingSpec())
    if process in ("ip", "se", "poisson", "exp"):
        return dataset_ground_truth_loglik(ds, named_process(process))
    raise MissingTruthError(f"no ground-truth process recorded for dataset (process={process!r})")


def ll_score(model_ll: float, truth_ll: float) -> float:
    """Absolute gap between the true and the learned average LL (lower is better)."""
    return abs(truth_ll - model_ll)


def evaluate(model: SequenceModel, ds: Dataset, cfg: EvalConfig = EvalConfig(), model_id: str = "model",
             dataset_id: str = "dataset", with_mae: bool = True, with_truth: bool = False,
             workers: int = 1) -> MetricsReport:
    model.check_dataset(ds)
    lls = per_sequence("ll", model, ds, cfg, workers)
    avg = _event_mean(lls)
    report = MetricsReport(model_id, dataset_id, avg, isinstance(model, PpfP), sum(p.size for p in lls))
    rows = [{"id": s.id, "num_events": int(p.size), "avg_ll": float(np.mean(p))} for s, p in zip(ds.sequences, lls)]
    if with_mae:
        errs = per_sequence("mae", model, ds, cfg, workers)
        report.mae = _event_mean(errs)
        for r, e in zip(rows, errs):
            r["mae"] = float(np.mean(e))
    if ds.marked and model.marked:
        hits = per_sequence("acc", model, ds, cfg, workers)
        report.accuracy = _event_mean([h.astype(np.float64) for h in hits])
        for r, h in zip(rows, hits):
            r["accuracy"] = float(np.mean(h))
    if with_truth:
        report.ll_truth = truth_loglik(ds)
        report.ll_score = ll_score(avg, report.ll_truth)
    report.per_sequence = rows
    report.__post_init__()
    return report
