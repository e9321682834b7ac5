"""Intensity baseline: LSTM history -> constant rate until the next event."""

from __future__ import annotations

import numpy as np

from ..diffkit import LstmCellSpec, ParameterStore, Tape, init_linear, init_lstm, linear
from ..diffkit import ops as T
from ..flow import LOG_POSITIVE
from .base import SequenceModel
from .common import (
    Batch,
    IncompatibleDataError,
    SampleCounts,
    argmax_lowest,
    encoder_features,
    mark_loglik_nodes,
    run_lstm,
    stack_time,
)

RATE_FLOOR = 1e-12


def exponential_loglik(rate, tau):
    """``log rate - rate * tau``; the density of a constant-intensity gap."""
    rate = np.asarray(rate, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("inter-arrival gaps must be > 0")
    if np.any(rate <= 0):
        raise ValueError("rate must be > 0")
    return np.log(rate) - rate * tau


class IntensityBaseline(SequenceModel):
    kind = "baseline"
    uses_flow = False

    def __init__(self, cfg, omap=None, store=None):
        if cfg.output_map != LOG_POSITIVE:
            raise IncompatibleDataError("the intensity baseline only models positive gaps")
        super().__init__(cfg, omap, store)

    @property
    def encoder_spec(self) -> LstmCellSpec:
        return LstmCellSpec(1 + (self.cfg.num_categories or 0), self.cfg.hidden)

    def _init_params(self, store: ParameterStore, rng) -> None:
        init_lstm(store, self.encoder_spec, "enc", rng)
        init_linear(store, self.cfg.hidden, 1, "rate", rng)
        if self.marked:
            init_linear(store, self.cfg.hidden, self.cfg.num_categories, "mark", rng)

    def _hidden(self, tape, params, batch: Batch):
        feats = encoder_features(batch, self.omap, self.cfg.num_categories)
        return stack_time(run_lstm(self.encoder_spec, params, "enc", feats[:-1], tape))

    def _rate(self, params, hid):
        return T.softplus(linear(params, "rate", hid)) + RATE_FLOOR

    def objective(self, tape, params, batch: Batch, rng=None, **kw):
        if np.any(batch.taus[batch.mask] <= 0):
            raise ValueError("inter-arrival gaps must be > 0")
        hid = self._hidden(tape, params, batch)
        lam = self._rate(params, hid)
        tau = batch.taus.reshape(-1, 1)
        ll_time = T.log(lam) - lam * tau
        extras = {"time": ll_time}
        ll = ll_time
        if self.marked:
            ll_mark = mark_loglik_nodes(linear(params, "mark", hid), batch.marks, self.cfg.num_categories)
            extras["mark"] = ll_mark
            ll = ll + ll_mark
        return ll, extras

    def rates(self, batch: Batch) -> np.ndarray:
        tape = Tape(record=False)
        params = self.const_params(tape)
        return self._rate(params, self._hidden(tape, params, batch)).value.reshape(batch.shape)

    def predictive_samples(self, batch: Batch, counts: SampleCounts, rng) -> np.ndarray:
        lam = self.rates(batch)
        return rng.exponential(size=lam.shape + (counts.flat,)) / lam[..., None]

    def mark_predictions(self, batch: Batch, counts: SampleCounts, rng) -> np.ndarray:
        tape = Tape(record=False)
        params = self.const_params(tape)
        logits = linear(params, "mark", self._hidden(tape, params, batch)).value
        return argmax_lowest(logits.reshape(batch.shape + (self.cfg.num_categories,)), axis=-1)
