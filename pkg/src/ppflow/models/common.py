"""Shared pieces for the sequence models: batching, encoders, Gaussian KL."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..diffkit import LstmCellSpec, Node, ParameterStore, Tape, lstm_step
from ..diffkit import ops as T
from ..flow import IDENTITY, LOG_POSITIVE, IntegrationConfig, OutputMap
from ..seqdata import POSITIVE, Dataset, InterArrivalSequence


class NumericalError(ArithmeticError):
    pass


class IncompatibleDataError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "ppfd"  # ppfd | ppfp | baseline
    hidden: int = 128
    latent: int = 256
    decoder_hidden: tuple[int, ...] = (256, 256)
    flow_hidden: tuple[int, ...] = (64, 64, 64)
    num_steps: int = 20
    output_map: str = LOG_POSITIVE
    num_categories: int | None = None
    log_std_clamp: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ppfd", "ppfp", "baseline"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.decoder_hidden = tuple(int(x) for x in self.decoder_hidden)
        self.flow_hidden = tuple(int(x) for x in self.flow_hidden)
        if self.hidden < 1 or self.latent < 1:
            raise ValueError("hidden and latent sizes must be >= 1")
        if self.output_map not in (IDENTITY, LOG_POSITIVE):
            raise ValueError(f"unknown output map {self.output_map!r}")
        if self.num_categories is not None and self.num_categories < 2:
            raise ValueError("num_categories must be >= 2 when given")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        d["flow_hidden"] = list(self.flow_hidden)
        return d

    @property
    def integration(self) -> IntegrationConfig:
        return IntegrationConfig(self.num_steps)


@dataclass(frozen=True)
class SampleCounts:
    prior: int = 100
    decoder: int = 15
    flat: int = 1500

    def __post_init__(self):
        if min(self.prior, self.decoder, self.flat) < 1:
            raise ValueError("sample counts must be >= 1")


def fit_output_map(ds: Dataset, kind: str) -> OutputMap:
    """Affine standardization of the flow variable fitted on ``ds``."""
    if kind == LOG_POSITIVE and ds.mode != POSITIVE:
        raise IncompatibleDataError("log_positive output map needs a positive-mode dataset")
    y = OutputMap(kind).to_flow(ds.all_taus())
    if y.size == 0:
        return OutputMap(kind)
    scale = float(y.std())
    return OutputMap(kind, float(y.mean()), scale if scale > 0 else 1.0)


@dataclass
class Batch:
    """Time-major padded batch: arrays are ``(T, B)``; flat index is ``t * B + b``."""

    taus: np.ndarray
    mask: np.ndarray
    marks: np.ndarray | None
    ids: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.taus.shape

    @property
    def num_events(self) -> int:
        return int(self.mask.sum())

    def flat(self, a: np.ndarray) -> np.ndarray:
        return a.reshape(-1)

    @classmethod
    def from_sequences(cls, seqs: Sequence[InterArrivalSequence], pad_value: float = 1.0,
                       num_categories: int | None = None) -> "Batch":
        if not seqs:
            raise ValueError("empty batch")
        t_max = max(len(s) for s in seqs)
        if t_max == 0:
            raise ValueError("batch of empty sequences")
        b = len(seqs)
        taus = np.full((t_max, b), pad_value)
        mask = np.zeros((t_max, b), dtype=bool)
        marks = None
        if num_categories is not None:
            if any(s.marks is None for s in seqs):
                raise IncompatibleDataError("marked model needs marks on every sequence")
            marks = np.zeros((t_max, b), dtype=int)
        for j, s in enumerate(seqs):
            n = len(s)
            taus[:n, j] = s.taus
            mask[:n, j] = True
            if marks is not None:
                marks[:n, j] = s.marks
        return cls(taus, mask, marks, [s.id for s in seqs])


def encoder_features(batch: Batch, omap: OutputMap, num_categories: int | None) -> np.ndarray:
    """``(T, B, F)`` inputs: mapped gap plus optional one-hot mark."""
    safe = np.where(batch.mask, batch.taus, 1.0 if omap.kind == LOG_POSITIVE else 0.0)
    feats = [omap.to_flow(safe)[..., None]]
    if num_categories is not None:
        feats.append(np.eye(num_categories)[batch.marks])
    return np.concatenate(feats, axis=-1)


def run_lstm(spec: LstmCellSpec, params, prefix: str, feats: np.ndarray, tape: Tape) -> list[Node]:
    """Hidden states ``[h_0, h_1, ..., h_T]`` with ``h_0 = 0`` and ``h_t`` after input ``t``."""
    steps, b, _ = feats.shape
    h = tape.const(np.zeros((b, spec.hidden_size)))
    c = tape.const(np.zeros((b, spec.hidden_size)))
    states = [h]
    for t in range(steps):
        h, c = lstm_step(spec, params, tape.const(feats[t]), (h, c), prefix)
        states.append(h)
    return states


def stack_time(states: Sequence[Node]) -> Node:
    return T.concat(list(states), axis=0)


def clamp_log_std(x: Node, bound: float) -> Node:
    return T.clip(x, -bound, bound)


def kl_diag_gaussians(mu_q, var_q, mu_p, var_p) -> float:
    """``KL(N(mu_q, diag var_q) || N(mu_p, diag var_p))`` summed over dimensions."""
    mu_q, var_q, mu_p, var_p = (np.asarray(x, dtype=np.float64) for x in (mu_q, var_q, mu_p, var_p))
    if np.any(var_q <= 0) or np.any(var_p <= 0):
        raise ValueError("variances must be positive")
    terms = 0.5 * (var_q / var_p + (mu_p - mu_q) ** 2 / var_p - 1.0 + np.log(var_p) - np.log(var_q))
    return float(np.sum(terms))


def kl_diag_nodes(mu_q: Node, ls_q: Node, mu_p: Node, ls_p: Node) -> Node:
    """Per-row KL between diagonal Gaussians given log standard deviations."""
    # the variance ratio as one exp so identical inputs give exactly zero
    ratio = T.exp((ls_q - ls_p) * 2.0)
    quad = ratio + T.square(mu_q - mu_p) * T.exp(ls_p * -2.0)
    return T.sum(ls_p - ls_q + quad * 0.5 - 0.5, axis=-1, keepdims=True)


def masked_mean(x: Node, mask: np.ndarray) -> Node:
    m = mask.reshape(-1, 1).astype(np.float64)
    return T.sum(x * m) * (1.0 / max(float(m.sum()), 1.0))


def mark_loglik_nodes(logits: Node, marks: np.ndarray, num_categories: int) -> Node:
    onehot = np.eye(num_categories)[marks.reshape(-1)]
    return T.sum(T.log_softmax(logits, axis=-1) * onehot, axis=-1, keepdims=True)


def sequence_key(seed: int, seq_id: str, stream: int = 0) -> np.random.Generator:
    """Per-sequence generator keyed by content id, independent of ordering/workers."""
    return np.random.default_rng([int(seed), zlib.crc32(seq_id.encode("utf-8")), int(stream)])


def gaussian_logpdf(x, mu, log_std):
    u = (x - mu) * np.exp(-log_std)
    return -0.5 * u * u - log_std - 0.5 * math.log(2.0 * math.pi)


def argmax_lowest(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """argmax with ties resolved to the lowest index (numpy's rule, made explicit)."""
    return np.argmax(x, axis=axis)


def mode_lowest(labels: np.ndarray, num_categories: int) -> np.ndarray:
    """Row-wise most frequent label; ties go to the lowest category."""
    counts = np.zeros(labels.shape[:-1] + (num_categories,), dtype=int)
    for c in range(num_categories):
        counts[..., c] = np.sum(labels == c, axis=-1)
    return np.argmax(counts, axis=-1)
