"""Synthetic temporal point processes: exact samplers and exact likelihoods.

Processes are sampled by Ogata thinning.  Every sequence draws from its own
generator keyed by ``(seed, sequence index)`` so output does not depend on
how the work is split across processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import erf, erfc

from .seqdata import (
    POSITIVE,
    UNCONSTRAINED,
    Dataset,
    EventSequence,
    InterArrivalSequence,
    to_inter_arrivals,
)

LOG_2PI = math.log(2.0 * math.pi)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class HomogeneousPoisson:
    rate: float = 1.0

    def __post_init__(self):
        if not self.rate > 0:
            raise SimulationError("Poisson rate must be > 0")


@dataclass(frozen=True)
class PoissonBumpIntensity:
    """Sum of Gaussian-shaped bumps, ``alpha_i (2 pi s_i^2)^-1/2 exp(-(t-c_i)^2 / s_i^2)``.

    The exponent divides by ``s_i^2`` (not ``2 s_i^2``); each bump therefore
    integrates to ``alpha_i / sqrt(2)`` over the real line.
    """

    k: int = 6
    alphas: tuple[float, ...] = (14.0, 18.0, 13.0, 17.0, 10.0, 13.0)
    centers: tuple[float, ...] = (3.0, 6.0, 9.0, 12.0, 15.0, 18.0)
    sigmas: tuple[float, ...] = (5.0, 5.0, 5.0, 5.0, 5.0, 5.0)

    def __post_init__(self):
        for name in ("alphas", "centers", "sigmas"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if not (self.k == len(self.alphas) == len(self.centers) == len(self.sigmas)):
            raise SimulationError("k must equal the number of alphas, centers and sigmas")
        if self.k < 1 or any(a <= 0 for a in self.alphas) or any(s <= 0 for s in self.sigmas):
            raise SimulationError("bump weights and widths must be positive")

    def _arrays(self):
        return np.asarray(self.alphas), np.asarray(self.centers), np.asarray(self.sigmas)

    def peak_heights(self) -> np.ndarray:
        a, _, s = self._arrays()
        return a / np.sqrt(2.0 * np.pi * s * s)

    def upper_bound(self, lo: float, hi: float) -> float:
        """max of the intensity over [lo, hi], bounded by summing each bump's own max."""
        _, c, s = self._arrays()
        nearest = np.clip(c, lo, hi)
        return float(np.sum(self.peak_heights() * np.exp(-((nearest - c) / s) ** 2)))

    def compensator(self, lo, hi):
        """Exact integral of the intensity over [lo, hi] (vectorized in lo/hi)."""
        a, c, s = self._arrays()
        lo = np.asarray(lo, dtype=np.float64)[..., None]
        hi = np.asarray(hi, dtype=np.float64)[..., None]
        ul, uh = (lo - c) / s, (hi - c) / s
        # erfc difference avoids cancellation in the right tail
        diff = np.where(ul > 0, erfc(ul) - erfc(uh), erf(uh) - erf(ul))
        return np.sum(a / (2.0 * math.sqrt(2.0)) * diff, axis=-1)


@dataclass(frozen=True)
class HawkesParams:
    mu: float = 1.0
    beta: float = 0.8
    decay: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise SimulationError("Hawkes base rate mu must be > 0")
        if self.beta < 0 or not self.decay > 0:
            raise SimulationError("Hawkes needs beta >= 0 and decay > 0")

    @property
    def branching_ratio(self) -> float:
        return self.beta / self.decay

    @property
    def stationary_rate(self) -> float:
        return self.mu / (1.0 - self.branching_ratio)


@dataclass(frozen=True)
class SwitchingSpec:
    even_mean: float = 4.0
    even_std: float = 1.0
    mix_means: tuple[float, ...] = (4.0, 10.0)
    mix_stds: tuple[float, ...] = (1.0, 1.0)
    mix_weights: tuple[float, ...] = (0.5, 0.5)
    seq_len: int = 15
    n_seqs: int = 1000

    def __post_init__(self):
        for name in ("mix_means", "mix_stds", "mix_weights"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        w = self.mix_weights
        if not (len(w) == len(self.mix_means) == len(self.mix_stds)):
            raise SimulationError("mixture lists must have equal length")
        if any(x <= 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise SimulationError("mixture weights must be positive and sum to 1")
        if self.even_std <= 0 or any(s <= 0 for s in self.mix_stds):
            raise SimulationError("standard deviations must be positive")


@dataclass(frozen=True)
class SimConfig:
    target_len: int = 60
    n_seqs: int = 20000
    seed: int = 0
    horizon: float | None = None  # if set, simulate on [0, horizon] instead of to a fixed length
    burn_in: float = 0.0  # horizon mode only: run this long first and keep events after it, re-zeroed

    def __post_init__(self):
        if self.target_len < 1:
            raise SimulationError("target_len must be >= 1")
        if self.n_seqs < 0:
            raise SimulationError("n_seqs must be >= 0")
        if self.burn_in < 0 or (self.burn_in > 0 and self.horizon is None):
            raise SimulationError("burn_in must be >= 0 and needs horizon mode")


ProcessSpec = Union[HomogeneousPoisson, PoissonBumpIntensity, HawkesParams]


def sequence_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


# --- intensities ---------------------------------------------------------


def ip_intensity(t, p: PoissonBumpIntensity):
    a, c, s = p._arrays()
    t = np.asarray(t, dtype=np.float64)
    val = np.sum(p.peak_heights() * np.exp(-((t[..., None] - c) / s) ** 2), axis=-1)
    return float(val) if val.ndim == 0 else val


def hawkes_intensity(t: float, history: Sequence[float], p: HawkesParams) -> float:
    h = np.asarray(history, dtype=np.float64)
    if h.size and np.any(h >= t):
        raise SimulationError("history must contain only times strictly before t")
    return float(p.mu + p.beta * np.sum(np.exp(-p.decay * (t - h))))


def hawkes_compensator(lo: float, hi: float, history: Sequence[float], p: HawkesParams) -> float:
    """Integral of the Hawkes intensity over (lo, hi] given events at or before lo."""
    h = np.asarray(history, dtype=np.float64)
    if h.size and np.any(h > lo):
        raise SimulationError("history must not contain events after lo")
    exc = np.sum(np.exp(-p.decay * (lo - h)) - np.exp(-p.decay * (hi - h)))
    return float(p.mu * (hi - lo) + p.beta / p.decay * exc)


def intensity(t: float, history: Sequence[float], spec: ProcessSpec) -> float:
    if isinstance(spec, HomogeneousPoisson):
        return spec.rate
    if isinstance(spec, PoissonBumpIntensity):
        return ip_intensity(t, spec)
    if isinstance(spec, HawkesParams):
        return hawkes_intensity(t, history, spec)
    raise SimulationError(f"unsupported process spec {type(spec).__name__}")


# --- thinning samplers ---------------------------------------------------


def _poisson_times(spec: HomogeneousPoisson, cfg: SimConfig, rng) -> list[float]:
    # a constant majorant equal to the rate: every thinning proposal is accepted
    t, out = 0.0, []
    while True:
        t += rng.exponential(1.0 / spec.rate)
        if cfg.horizon is not None and t > cfg.horizon:
            return out
        out.append(t)
        if cfg.horizon is None and len(out) == cfg.target_len:
            return out


def _ip_times(spec: PoissonBumpIntensity, cfg: SimConfig, rng, window: float = 1.0,
              max_restarts: int = 10_000) -> list[float]:
    """Thinning with a per-window majorant.

    In fixed-length mode a realization with fewer than ``target_len`` events
    over the whole support is discarded and redrawn from the same stream, i.e.
    sequences are conditioned on having at least ``target_len`` events.
    """
    _, c, s = spec._arrays()
    end = float(np.max(c + 12.0 * s)) if cfg.horizon is None else float(cfg.horizon)
    for _ in range(max_restarts):
        t, out = 0.0, []
        while t < end:
            hi = min(t + window, end)
            lam_max = spec.upper_bound(t, hi)
            w = rng.exponential(1.0 / lam_max)
            if t + w >= hi:
                t = hi
                continue
            t += w
            if rng.uniform() * lam_max <= ip_intensity(t, spec):
                out.append(t)
                if cfg.horizon is None and len(out) == cfg.target_len:
                    return out
        if cfg.horizon is not None:
            return out
    raise SimulationError("could not reach target_len events for the bump intensity")


def _hawkes_times(spec: HawkesParams, cfg: SimConfig, rng) -> list[float]:
    if spec.branching_ratio >= 1.0:
        raise SimulationError(f"Hawkes branching ratio {spec.branching_ratio:.3f} >= 1 is not stationary")
    t, excite, out = 0.0, 0.0, []
    while True:
        lam_bar = spec.mu + excite  # intensity only decays until the next event
        w = rng.exponential(1.0 / lam_bar)
        t += w
        if cfg.horizon is not None and t > cfg.horizon:
            return out
        excite *= math.exp(-spec.decay * w)
        if rng.uniform() * lam_bar <= spec.mu + excite:
            out.append(t)
            excite += spec.beta
            if cfg.horizon is None and len(out) == cfg.target_len:
                return out


def simulate_one(spec: ProcessSpec, cfg: SimConfig, index: int, stream: int = 0) -> EventSequence:
    rng = sequence_rng(cfg.seed, index, stream)
    run = cfg
    if cfg.burn_in > 0:
        run = SimConfig(cfg.target_len, cfg.n_seqs, cfg.seed, cfg.horizon + cfg.burn_in)
    if isinstance(spec, HomogeneousPoisson):
        times = _poisson_times(spec, run, rng)
    elif isinstance(spec, PoissonBumpIntensity):
        times = _ip_times(spec, run, rng)
    elif isinstance(spec, HawkesParams):
        times = _hawkes_times(spec, run, rng)
    else:
        raise SimulationError(f"unsupported process spec {type(spec).__name__}")
    if cfg.burn_in > 0:
        times = [t - cfg.burn_in for t in times if t > cfg.burn_in]
    return EventSequence(f"{stream}-{index}", tuple(times))


def _simulate_range(args):
    spec, cfg, lo, hi, stream = args
    return [simulate_one(spec, cfg, i, stream) for i in range(lo, hi)]


def simulate_thinning(spec: ProcessSpec, cfg: SimConfig, workers: int = 1, stream: int = 0) -> list[EventSequence]:
    """``cfg.n_seqs`` sequences from ``spec``; identical output for any ``workers``."""
    if isinstance(spec, HawkesParams) and spec.branching_ratio >= 1.0:
        raise SimulationError(f"Hawkes branching ratio {spec.branching_ratio:.3f} >= 1 is not stationary")
    n = cfg.n_seqs
    if workers <= 1 or n < 2:
        return _simulate_range((spec, cfg, 0, n, stream))
    bounds = np.linspace(0, n, min(workers * 4, n) + 1).astype(int)
    jobs = [(spec, cfg, int(lo), int(hi), stream) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        chunks = list(ex.map(_simulate_range, jobs))
    return [s for chunk in chunks for s in chunk]


# --- exact log-likelihoods ----------------------------------------------


def event_logliks(seq: EventSequence, spec: ProcessSpec) -> np.ndarray:
    """Per-event ``log lambda(t_n) - Lambda(t_{n-1}, t_n)`` with t_0 = 0."""
    t = np.asarray(seq.times, dtype=np.float64)
    prev = np.concatenate([[0.0], t[:-1]])
    if isinstance(spec, HomogeneousPoisson):
        return math.log(spec.rate) - spec.rate * (t - prev)
    if isinstance(spec, PoissonBumpIntensity):
        return np.log(ip_intensity(t, spec)) - spec.compensator(prev, t)
    if isinstance(spec, HawkesParams):
        out = np.empty(t.size)
        excite = 0.0  # beta * sum exp(-decay (t_prev - t_i)) just after t_prev
        for n in range(t.size):
            dt = t[n] - prev[n]
            decayed = excite * math.exp(-spec.decay * dt)
            comp = spec.mu * dt + (excite - decayed) / spec.decay
            out[n] = math.log(spec.mu + decayed) - comp
            excite = decayed + spec.beta
        return out
    raise SimulationError(f"no exact likelihood for {type(spec).__name__}")


def ground_truth_loglik(seq: EventSequence, spec: ProcessSpec) -> float:
    """Average per-event log-likelihood of ``seq`` under ``spec``."""
    if len(seq) == 0:
        raise SimulationError("empty sequence")
    return float(np.mean(event_logliks(seq, spec)))


def rescaled_gaps(seq: EventSequence, spec: ProcessSpec) -> np.ndarray:
    """Compensator increments between events; Exponential(1) under the true law."""
    t = np.asarray(seq.times, dtype=np.float64)
    prev = np.concatenate([[0.0], t[:-1]])
    if isinstance(spec, HomogeneousPoisson):
        return spec.rate * (t - prev)
    if isinstance(spec, PoissonBumpIntensity):
        return spec.compensator(prev, t)
    if isinstance(spec, HawkesParams):
        return np.array([hawkes_compensator(prev[n], t[n], t[:n], spec) for n in range(t.size)])
    raise SimulationError(f"unsupported process spec {type(spec).__name__}")


def dataset_ground_truth_loglik(ds: Dataset, specs) -> float:
    """Per-event average over a dataset; ``specs`` is one spec or one per sequence."""
    if not isinstance(specs, (list, tuple)):
        specs = [specs] * len(ds)
    total, count = 0.0, 0
    for s, spec in zip(ds.sequences, specs):
        ev = event_logliks(EventSequence(s.id, tuple(np.cumsum(s.taus))), spec)
        total += float(ev.sum())
        count += ev.size
    return total / count


# --- switching distribution ---------------------------------------------


def _norm_logpdf(x, m, s):
    return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * LOG_2PI


def switching_step_logpdf(x, step: int, spec: SwitchingSpec):
    """Log-density of value ``x`` at 1-based position ``step``."""
    x = np.asarray(x, dtype=np.float64)
    if step % 2 == 0:
        return _norm_logpdf(x, spec.even_mean, spec.even_std)
    comps = [math.log(w) + _norm_logpdf(x, m, s) for w, m, s in zip(spec.mix_weights, spec.mix_means, spec.mix_stds)]
    return np.logaddexp.reduce(np.stack(comps), axis=0)


def simulate_switching(spec: SwitchingSpec = SwitchingSpec(), seed: int = 0) -> Dataset:
    """Odd positions from the mixture, even positions from the single Gaussian."""
    seqs = []
    for i in range(spec.n_seqs):
        rng = sequence_rng(seed, i, stream=7)
        vals = np.empty(spec.seq_len)
        for n in range(1, spec.seq_len + 1):
            if n % 2 == 0:
                vals[n - 1] = rng.normal(spec.even_mean, spec.even_std)
            else:
                k = rng.choice(len(spec.mix_weights), p=spec.mix_weights)
                vals[n - 1] = rng.normal(spec.mix_means[k], spec.mix_stds[k])
        seqs.append(InterArrivalSequence(tuple(vals.tolist()), None, f"sw-{i}"))
    meta = {"process": "switching", "spec": asdict(spec), "seed": seed}
    return Dataset(tuple(seqs), mode=UNCONSTRAINED, meta=meta)


def switching_ground_truth_loglik(ds: Dataset, spec: SwitchingSpec = SwitchingSpec()) -> float:
    total, count = 0.0, 0
    for s in ds.sequences:
        for n, x in enumerate(s.taus, start=1):
            total += float(switching_step_logpdf(x, n, spec))
            count += 1
    return total / count


# --- marked sequences ----------------------------------------------------


@dataclass(frozen=True)
class MarkRule:
    """Marks from quantile buckets of a gap plus label noise.

    ``source="previous"`` buckets the preceding gap (so the mark is a function
    of the observed history; the first mark is category 0), ``"current"``
    buckets the event's own gap.  With probability ``noise`` the label is
    replaced by a uniformly chosen *different* category.
    """

    num_categories: int = 3
    noise: float = 0.1
    source: str = "previous"
    edges: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.num_categories < 2:
            raise SimulationError("marked simulation needs num_categories >= 2")
        if not 0.0 <= self.noise < 1.0:
            raise SimulationError("noise must be in [0, 1)")
        if self.source not in ("previous", "current"):
            raise SimulationError("source must be 'previous' or 'current'")

    def clean_marks(self, taus: np.ndarray) -> np.ndarray:
        buckets = np.searchsorted(np.asarray(self.edges), taus, side="right")
        if self.source == "current":
            return buckets
        return np.concatenate([[0], buckets[:-1]]).astype(int)


def simulate_marked(base: ProcessSpec, num_categories: int, cfg: SimConfig, noise: float = 0.1,
                    source: str = "previous", workers: int = 1) -> Dataset:
    MarkRule(num_categories, noise, source)  # validate early
    events = simulate_thinning(base, cfg, workers=workers)
    ias = [to_inter_arrivals(e) for e in events]
    all_taus = np.concatenate([s.as_array() for s in ias]) if ias else np.zeros(0)
    edges = tuple(np.quantile(all_taus, np.arange(1, num_categories) / num_categories).tolist()) if all_taus.size else ()
    rule = MarkRule(num_categories, noise, source, edges)
    seqs = []
    for i, s in enumerate(ias):
        rng = sequence_rng(cfg.seed, i, stream=11)
        clean = rule.clean_marks(s.as_array())
        flip = rng.uniform(size=clean.size) < noise
        shift = rng.integers(1, num_categories, size=clean.size)
        marks = np.where(flip, (clean + shift) % num_categories, clean)
        seqs.append(InterArrivalSequence(s.taus, tuple(int(m) for m in marks), s.id))
    meta = {"process": type(base).__name__, "spec": asdict(base), "mark_rule": asdict(rule),
            "target_len": cfg.target_len, "seed": cfg.seed}
    return Dataset(tuple(seqs), POSITIVE, num_categories, meta=meta)


# --- named synthetic datasets -------------------------------------------


def named_process(name: str) -> ProcessSpec:
    name = name.lower()
    if name == "ip":
        return PoissonBumpIntensity()
    if name == "se":
        return HawkesParams()
    if name in ("poisson", "exp"):
        return HomogeneousPoisson()
    raise SimulationError(f"unknown process {name!r}")


def simulate_dataset(name: str, cfg: SimConfig, workers: int = 1) -> Dataset:
    """``ip``, ``se``, ``poisson`` or ``ip+se`` (equal halves, shuffled together)."""
    name = name.lower()
    info = {"process": name, "target_len": cfg.target_len, "n_seqs": cfg.n_seqs, "seed": cfg.seed,
            "horizon": cfg.horizon,
            "length_rule": "fixed length; IP realizations with too few events are redrawn"}
    if name in ("ip+se", "ipse", "ip_se"):
        n_ip = cfg.n_seqs // 2
        ip = simulate_thinning(PoissonBumpIntensity(), SimConfig(cfg.target_len, n_ip, cfg.seed, cfg.horizon), workers, stream=1)
        se = simulate_thinning(HawkesParams(), SimConfig(cfg.target_len, cfg.n_seqs - n_ip, cfg.seed, cfg.horizon), workers, stream=2)
        both = ip + se
        order = np.random.default_rng([cfg.seed, 99]).permutation(len(both))
        seqs = [both[i] for i in order]
    else:
        seqs = simulate_thinning(named_process(name), cfg, workers)
    return Dataset(tuple(to_inter_arrivals(s) for s in seqs), POSITIVE, meta=info)
