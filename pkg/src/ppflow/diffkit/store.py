"""Named parameter arrays plus Adam state, with JSON checkpointing."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tape import Node, Tape

CHECKPOINT_VERSION = 1


class ParameterStore:
    """Ordered map ``name -> float64 array``.

    Names are unique and shapes are frozen at first assignment.  Adam moments
    live beside the parameters so a checkpoint can resume training exactly.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._params:
            raise KeyError(f"unknown parameter {name!r}; use add()")
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._params[name].shape:
            raise ValueError(f"shape of {name!r} is fixed at {self._params[name].shape}, got {arr.shape}")
        self._params[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def attach(self, tape: Tape) -> dict[str, Node]:
        """Register every parameter as a differentiable leaf on ``tape``."""
        return {name: tape.leaf(value) for name, value in self._params.items()}

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for k, v in self._params.items():
            new.add(k, v.copy())
        new.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        new.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        new.step = self.step
        return new

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            self[k] = v

    def equals(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    # --- serialization ------------------------------------------------

    def to_dict(self, with_optimizer: bool = True) -> dict:
        def pack(d):
            return {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in d.items()}

        out = {"version": CHECKPOINT_VERSION, "params": pack(self._params)}
        if with_optimizer:
            out["adam"] = {"step": self.step, "m": pack(self.adam_m), "v": pack(self.adam_v)}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterStore":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")

        def unpack(d):
            return {k: np.array(e["values"], dtype=np.float64).reshape(e["shape"]) for k, e in d.items()}

        store = cls()
        for k, v in unpack(data["params"]).items():
            store.add(k, v)
        adam = data.get("adam")
        if adam:
            store.step = int(adam["step"])
            store.adam_m = unpack(adam["m"])
            store.adam_v = unpack(adam["v"])
        return store

    def save(self, path, with_optimizer: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(with_optimizer)))

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_dict(json.loads(Path(path).read_text()))
