from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .store import ParameterStore


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParameterStore, grads: Mapping[str, np.ndarray], hyper: AdamConfig = AdamConfig()) -> ParameterStore:
    """Bias-corrected Adam update applied in place; returns ``store``.

    ``grads`` must carry exactly the store's parameter names.
    """
    missing = [k for k in store if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    extra = [k for k in grads if k not in store]
    if extra:
        raise KeyError(f"gradients for unknown parameters {extra}")

    store.step += 1
    t = store.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name in store:
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != store[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {store[name].shape} for {name!r}")
        m = store.adam_m.get(name)
        v = store.adam_v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        store.adam_m[name] = m
        store.adam_v[name] = v
        store[name] = store[name] - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return store
