from __future__ import annotations

from typing import Sequence

import numpy as np

from ..diffkit import Node, ParameterStore, Tape
from ..flow import LOG_POSITIVE, FlowDynamics, OutputMap
from ..seqdata import POSITIVE, Dataset, InterArrivalSequence
from .common import Batch, IncompatibleDataError, ModelConfig, SampleCounts, masked_mean


class SequenceModel:
    """Common plumbing: parameter store, batching, teacher-forced evaluation."""

    kind = "base"
    uses_flow = True

    def __init__(self, cfg: ModelConfig, omap: OutputMap | None = None, store: ParameterStore | None = None):
        self.cfg = cfg
        self.omap = omap if omap is not None else OutputMap(cfg.output_map)
        if self.omap.kind != cfg.output_map:
            raise ValueError("output map kind disagrees with model config")
        self.flow = FlowDynamics(cfg.flow_hidden, prefix="flow")
        if store is None:
            store = ParameterStore()
            self._init_params(store, np.random.default_rng(cfg.seed))
        self.store = store
        self.flow.store = store

    # subclasses fill these in -------------------------------------------

    def _init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def objective(self, tape: Tape, params, batch: Batch, rng=None, **kw) -> tuple[Node, dict]:
        """Per-event training objective as a ``(T*B, 1)`` node (LL or ELBO)."""
        raise NotImplementedError

    # shared -------------------------------------------------------------

    @property
    def marked(self) -> bool:
        return self.cfg.num_categories is not None

    def check_dataset(self, ds: Dataset) -> None:
        if self.omap.kind == LOG_POSITIVE and ds.mode != POSITIVE:
            raise IncompatibleDataError(f"{self.kind} with log_positive map needs positive inter-arrival data")
        if self.marked and not ds.marked:
            raise IncompatibleDataError("marked model needs a marked dataset")
        if self.marked and ds.num_categories != self.cfg.num_categories:
            raise IncompatibleDataError("dataset and model disagree on num_categories")

    def make_batch(self, seqs: Sequence[InterArrivalSequence]) -> Batch:
        return Batch.from_sequences(seqs, pad_value=1.0, num_categories=self.cfg.num_categories)

    def const_params(self, tape: Tape) -> dict:
        return {k: tape.const(v) for k, v in self.store.items()}

    def loss(self, tape: Tape, params, batch: Batch, rng=None, **kw) -> tuple[Node, dict]:
        per_event, extras = self.objective(tape, params, batch, rng, **kw)
        return -masked_mean(per_event, batch.mask), extras

    def _eval_objective(self, batch: Batch, rng=None, **kw) -> tuple[np.ndarray, dict]:
        tape = Tape(record=False)
        node, extras = self.objective(tape, self.const_params(tape), batch, rng, **kw)
        shape = batch.shape
        return node.value.reshape(shape), {k: v.value.reshape(shape) for k, v in extras.items()}

    def sequence_loglik(self, seq: InterArrivalSequence) -> tuple[np.ndarray, float]:
        """Per-step log-likelihoods and their sum for one sequence."""
        if len(seq) == 0:
            raise ValueError("empty sequence")
        per, _ = self._eval_objective(self.make_batch([seq]))
        steps = per[:, 0].copy()
        return steps, float(np.sum(steps))

    def history_batch(self, history: InterArrivalSequence) -> Batch:
        """Batch whose last position is the next (unobserved) event after ``history``."""
        filler = 1.0
        marks = None if history.marks is None else tuple(history.marks) + (0,)
        if self.marked and marks is None:
            marks = (0,) * (len(history) + 1)
        seq = InterArrivalSequence(tuple(history.taus) + (filler,), marks, history.id)
        return self.make_batch([seq])

    def describe(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_dict(), "output_map": self.omap.to_dict(),
                "num_parameters": self.store.num_values()}

    # sampling hooks -----------------------------------------------------

    def predictive_samples(self, batch: Batch, counts: SampleCounts, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def mark_predictions(self, batch: Batch, counts: SampleCounts, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_next(self, history: InterArrivalSequence, rng: np.random.Generator,
                    counts: SampleCounts = SampleCounts()) -> dict:
        """Samples of the next gap given ``history`` (and a mark prediction if marked)."""
        batch = self.history_batch(history)
        samples = self.predictive_samples(batch, counts, rng)[-1, 0]
        out = {"taus": samples}
        if self.marked:
            out["mark"] = int(self.mark_predictions(batch, counts, rng)[-1, 0])
        return out
