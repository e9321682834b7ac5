"""Event sequences, inter-arrival gaps, JSONL persistence and splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

POSITIVE = "positive"
UNCONSTRAINED = "unconstrained"
MODES = (POSITIVE, UNCONSTRAINED)


class ValidationError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def _as_tuple(xs, cast=float) -> tuple:
    return tuple(cast(x) for x in xs)


@dataclass(frozen=True)
class EventSequence:
    id: str
    times: tuple[float, ...]
    marks: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", _as_tuple(self.times))
        if self.marks is not None:
            object.__setattr__(self, "marks", _as_tuple(self.marks, int))
            if len(self.marks) != len(self.times):
                raise ValidationError("marks and times differ in length")
            if any(m < 0 for m in self.marks):
                raise ValidationError("marks must be non-negative category indices")
        t = np.asarray(self.times)
        if t.size and (np.any(t < 0) or not np.all(np.isfinite(t))):
            raise ValidationError("event times must be finite and >= 0")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("event times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class InterArrivalSequence:
    taus: tuple[float, ...]
    marks: tuple[int, ...] | None = None
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "taus", _as_tuple(self.taus))
        if self.marks is not None:
            object.__setattr__(self, "marks", _as_tuple(self.marks, int))
            if len(self.marks) != len(self.taus):
                raise ValidationError("marks and taus differ in length")
        if not all(math.isfinite(x) for x in self.taus):
            raise ValidationError("inter-arrival values must be finite")

    def __len__(self) -> int:
        return len(self.taus)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.taus, dtype=np.float64)


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[InterArrivalSequence, ...]
    mode: str = POSITIVE
    num_categories: int | None = None
    stats: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == POSITIVE:
            for s in self.sequences:
                if any(x <= 0 for x in s.taus):
                    raise ValidationError(f"sequence {s.id!r}: positive mode needs every tau > 0")
        if self.num_categories is not None:
            for s in self.sequences:
                if s.marks is not None and any(m >= self.num_categories for m in s.marks):
                    raise ValidationError(f"sequence {s.id!r}: mark outside [0, {self.num_categories})")
        if self.stats is not None and not self.stats[1] > 0:
            raise ValidationError("stats std must be > 0")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def marked(self) -> bool:
        return self.num_categories is not None and all(s.marks is not None for s in self.sequences)

    def all_taus(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros(0)
        return np.concatenate([s.as_array() for s in self.sequences])

    def num_events(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, sequences=tuple(self.sequences[i] for i in indices))


def to_inter_arrivals(seq: EventSequence) -> InterArrivalSequence:
    """Gaps between consecutive events, the first measured from t=0."""
    t = np.asarray(seq.times, dtype=np.float64)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValidationError("event times must be strictly increasing")
    taus = np.diff(t, prepend=0.0) if t.size else t
    return InterArrivalSequence(tuple(taus.tolist()), seq.marks, seq.id)


def from_inter_arrivals(ias: InterArrivalSequence) -> EventSequence:
    taus = ias.as_array()
    if np.any(taus <= 0):
        raise ValidationError("inter-arrival gaps must be > 0 to form event times")
    return EventSequence(ias.id, tuple(np.cumsum(taus).tolist()), ias.marks)


def split_dataset(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle with a seeded stream, take floor-sized train/val and the rest as test."""
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(ds)
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(n)
    n_train = int(math.floor(r[0] * n + 1e-9))
    n_val = int(math.floor(r[1] * n + 1e-9))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(ds.subset(p.tolist()) for p in parts)


# --- standardization ----------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    def forward(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def loglik_to_raw(self, ll_standardized):
        """Per-event log-density in standardized units -> raw units."""
        return ll_standardized - math.log(self.std)


def standardize(ds: Dataset) -> tuple[Dataset, Standardizer]:
    """Z-score every tau with the population mean/std over the whole dataset."""
    x = ds.all_taus()
    if x.size == 0:
        raise ValueError("cannot standardize an empty dataset")
    mean = float(x.mean())
    std = float(x.std())
    if not std > 0:
        raise ValueError("zero variance: all inter-arrival values are equal")
    st = Standardizer(mean, std)
    seqs = tuple(replace(s, taus=tuple(st.forward(s.taus).tolist())) for s in ds.sequences)
    out = replace(ds, sequences=seqs, mode=UNCONSTRAINED, stats=(mean, std))
    return out, st


# --- JSONL --------------------------------------------------------------


def _dump_line(obj) -> str:
    # repr-based float formatting is shortest round-trip (<= 17 significant digits)
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def dumps_jsonl(ds: Dataset) -> str:
    meta = {"mode": ds.mode, "num_categories": ds.num_categories}
    if ds.stats is not None:
        meta["stats"] = list(ds.stats)
    if ds.meta:
        meta["info"] = ds.meta
    lines = [_dump_line({"_meta": meta})]
    for i, s in enumerate(ds.sequences):
        rec = {"id": s.id or str(i), "taus": list(s.taus)}
        if s.marks is not None:
            rec["marks"] = list(s.marks)
        lines.append(_dump_line(rec))
    return "\n".join(lines) + "\n"


def save_jsonl(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_jsonl(ds), encoding="utf-8")


def loads_jsonl(text: str) -> Dataset:
    meta: dict = {}
    seqs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DatasetParseError(lineno, "expected a JSON object")
        if "_meta" in obj:
            if lineno != 1 or seqs:
                raise DatasetParseError(lineno, "_meta header must be the first line")
            meta = obj["_meta"]
            continue
        taus = obj.get("taus")
        if not isinstance(taus, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in taus):
            raise DatasetParseError(lineno, "'taus' must be a list of numbers")
        marks = obj.get("marks")
        if marks is not None and (not isinstance(marks, list) or not all(isinstance(m, int) and not isinstance(m, bool) for m in marks)):
            raise DatasetParseError(lineno, "'marks' must be a list of integers")
        sid = obj.get("id", str(len(seqs)))
        if not isinstance(sid, str):
            raise DatasetParseError(lineno, "'id' must be a string")
        try:
            seqs.append(InterArrivalSequence(tuple(taus), None if marks is None else tuple(marks), sid))
        except ValidationError as exc:
            raise DatasetParseError(lineno, str(exc)) from None
    stats = meta.get("stats")
    try:
        return Dataset(tuple(seqs), mode=meta.get("mode", POSITIVE), num_categories=meta.get("num_categories"),
                       stats=None if stats is None else (float(stats[0]), float(stats[1])),
                       meta=meta.get("info", {}))
    except ValidationError as exc:
        raise DatasetParseError(0, str(exc)) from None


def load_jsonl(path) -> Dataset:
    return loads_jsonl(Path(path).read_text(encoding="utf-8"))


def from_event_sequences(seqs: Sequence[EventSequence], num_categories: int | None = None, meta=None) -> Dataset:
    return Dataset(tuple(to_inter_arrivals(s) for s in seqs), POSITIVE, num_categories, meta=meta or {})
