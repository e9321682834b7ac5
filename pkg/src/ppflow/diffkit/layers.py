"""MLP and LSTM building blocks expressed as tape operations.

Parameters are addressed by ``prefix`` so several networks can share one
:class:`ParameterStore`.  Linear weights are stored ``(fan_in, fan_out)`` and
applied as ``x @ W + b`` on row-batched inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tape as T
from .store import ParameterStore
from .tape import Node, ShapeError


@dataclass(frozen=True)
class MlpSpec:
    in_size: int
    hidden: tuple[int, ...]
    out_size: int
    activation: str = "tanh"

    def __post_init__(self):
        sizes = (self.in_size, *self.hidden, self.out_size)
        if any(int(s) < 1 for s in sizes):
            raise ValueError(f"all MLP sizes must be >= 1, got {sizes}")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.in_size, *self.hidden, self.out_size)

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass(frozen=True)
class LstmCellSpec:
    input_size: int
    hidden_size: int

    def __post_init__(self):
        if self.input_size < 1 or self.hidden_size < 1:
            raise ValueError("LSTM sizes must be >= 1")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    b = glorot_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=shape)


def init_mlp(store: ParameterStore, spec: MlpSpec, prefix: str, rng: np.random.Generator,
             zero_last: bool = False, last_scale: float = 1.0) -> None:
    sizes = spec.sizes
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == spec.num_layers - 1
        w = _uniform(rng, a, b, (a, b))
        if last:
            w = np.zeros((a, b)) if zero_last else w * last_scale
        store.add(f"{prefix}.l{i}.W", w)
        store.add(f"{prefix}.l{i}.b", np.zeros(b))


def init_lstm(store: ParameterStore, spec: LstmCellSpec, prefix: str, rng: np.random.Generator,
              forget_bias: float = 1.0) -> None:
    n_in, h = spec.input_size, spec.hidden_size
    # gate column blocks: input, forget, cell candidate, output
    w = _uniform(rng, n_in + h, 4 * h, (n_in + h, 4 * h))
    b = np.zeros(4 * h)
    b[h:2 * h] = forget_bias
    store.add(f"{prefix}.W", w)
    store.add(f"{prefix}.b", b)


def init_linear(store: ParameterStore, fan_in: int, fan_out: int, prefix: str, rng: np.random.Generator,
                scale: float = 1.0) -> None:
    store.add(f"{prefix}.W", _uniform(rng, fan_in, fan_out, (fan_in, fan_out)) * scale)
    store.add(f"{prefix}.b", np.zeros(fan_out))


def init_params(spec, seed: int, prefix: str = "net", store: ParameterStore | None = None) -> ParameterStore:
    """Fresh store holding one network described by ``spec`` (MLP or LSTM)."""
    store = ParameterStore() if store is None else store
    rng = np.random.default_rng(seed)
    if isinstance(spec, MlpSpec):
        init_mlp(store, spec, prefix, rng)
    elif isinstance(spec, LstmCellSpec):
        init_lstm(store, spec, prefix, rng)
    else:
        raise TypeError(f"cannot initialize {type(spec).__name__}")
    return store


def linear(params: Mapping[str, Node], prefix: str, x) -> Node:
    w = params[f"{prefix}.W"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{prefix}: input size {x.shape[-1]} != {w.shape[0]}")
    return T.matmul(x, w) + params[f"{prefix}.b"]


def mlp_forward(spec: MlpSpec, params: Mapping[str, Node], x, prefix: str = "net") -> Node:
    """Alternating affine + tanh layers with a linear output layer."""
    if x.shape[-1] != spec.in_size:
        raise ShapeError(f"{prefix}: expected input size {spec.in_size}, got {x.shape[-1]}")
    out = x
    for i in range(spec.num_layers):
        out = linear(params, f"{prefix}.l{i}", out)
        if i < spec.num_layers - 1:
            out = T.tanh(out)
    return out


def lstm_step(spec: LstmCellSpec, params: Mapping[str, Node], x, state: tuple, prefix: str = "lstm"):
    """One LSTM cell update; ``x`` is ``(B, input)`` and state is ``(h, c)``."""
    h, c = state
    if x.shape[-1] != spec.input_size:
        raise ShapeError(f"{prefix}: expected input size {spec.input_size}, got {x.shape[-1]}")
    if h.shape[-1] != spec.hidden_size or c.shape[-1] != spec.hidden_size:
        raise ShapeError(f"{prefix}: state size mismatch")
    n = spec.hidden_size
    gates = T.matmul(T.concat([x, h], axis=-1), params[f"{prefix}.W"]) + params[f"{prefix}.b"]
    i = T.sigmoid(gates[..., 0:n])
    f = T.sigmoid(gates[..., n:2 * n])
    g = T.tanh(gates[..., 2 * n:3 * n])
    o = T.sigmoid(gates[..., 3 * n:4 * n])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new
