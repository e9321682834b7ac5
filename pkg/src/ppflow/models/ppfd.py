"""Deterministic-base flow model: an LSTM maps the history to the Gaussian base."""

from __future__ import annotations

import numpy as np

from ..diffkit import LstmCellSpec, ParameterStore, Tape, init_linear, init_lstm, linear
from ..diffkit import ops as T
from ..flow import log_density_nodes, transform
from .base import SequenceModel
from .common import (
    Batch,
    SampleCounts,
    argmax_lowest,
    clamp_log_std,
    encoder_features,
    mark_loglik_nodes,
    run_lstm,
    stack_time,
)


class PpfD(SequenceModel):
    kind = "ppfd"

    @property
    def encoder_spec(self) -> LstmCellSpec:
        return LstmCellSpec(1 + (self.cfg.num_categories or 0), self.cfg.hidden)

    def _init_params(self, store: ParameterStore, rng) -> None:
        init_lstm(store, self.encoder_spec, "enc", rng)
        init_linear(store, self.cfg.hidden, 2, "base", rng)
        self.flow.init(store, rng)
        if self.marked:
            init_linear(store, self.cfg.hidden, self.cfg.num_categories, "mark", rng)

    def _heads(self, tape: Tape, params, batch: Batch):
        feats = encoder_features(batch, self.omap, self.cfg.num_categories)
        states = run_lstm(self.encoder_spec, params, "enc", feats[:-1], tape)
        hid = stack_time(states)
        head = linear(params, "base", hid)
        mean = head[:, 0:1]
        log_std = clamp_log_std(head[:, 1:2], self.cfg.log_std_clamp)
        return hid, mean, log_std

    def objective(self, tape, params, batch: Batch, rng=None, **kw):
        hid, mean, log_std = self._heads(tape, params, batch)
        field = self.flow.field(params)
        ll_time = log_density_nodes(field, batch.taus.reshape(-1), mean, log_std, self.cfg.integration, self.omap)
        extras = {"time": ll_time}
        ll = ll_time
        if self.marked:
            ll_mark = mark_loglik_nodes(linear(params, "mark", hid), batch.marks, self.cfg.num_categories)
            extras["mark"] = ll_mark
            ll = ll + ll_mark
        return ll, extras

    def base_params(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Per-event base mean and std, shape ``(T, B)``."""
        tape = Tape(record=False)
        _, mean, log_std = self._heads(tape, self.const_params(tape), batch)
        shape = batch.shape
        return mean.value.reshape(shape), np.exp(log_std.value).reshape(shape)

    def predictive_samples(self, batch: Batch, counts: SampleCounts, rng) -> np.ndarray:
        mean, std = self.base_params(batch)
        z = mean[..., None] + std[..., None] * rng.normal(size=mean.shape + (counts.flat,))
        return transform(z, self.flow, self.cfg.integration, self.omap)

    def mark_logits(self, batch: Batch) -> np.ndarray:
        tape = Tape(record=False)
        params = self.const_params(tape)
        hid, _, _ = self._heads(tape, params, batch)
        logits = linear(params, "mark", hid).value
        return logits.reshape(batch.shape + (self.cfg.num_categories,))

    def mark_predictions(self, batch: Batch, counts: SampleCounts, rng) -> np.ndarray:
        return argmax_lowest(self.mark_logits(batch), axis=-1)
