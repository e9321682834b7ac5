"""One-dimensional continuous normalizing flow.

The flow state ``z`` obeys ``dz/ds = h(z, s)`` on ``s in [0, 1]`` with ``h`` a
small tanh MLP of ``(z, s)``.  Because the state is a scalar, the trace in
the instantaneous change of variables is just ``dh/dz``; it is computed
exactly by pushing a unit tangent through the MLP alongside the primal pass,
and integrated with the same fixed-step RK4 scheme as the state.  Gradients
are obtained by differentiating the unrolled solver on the tape.

Positive data are handled by composing the flow with ``exp``: the flow lives
in log space and the density picks up a ``-log tau`` term.  An optional
fixed affine standardization of the flow variable is folded into the same
output map so densities are always reported in raw units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .diffkit import MlpSpec, Node, ParameterStore, Tape
from .diffkit import ops as T
from .diffkit.layers import init_mlp

IDENTITY = "identity"
LOG_POSITIVE = "log_positive"

Field = Callable[[Node, float], tuple]

CHUNK = 16384  # rows per evaluation-only flow pass


class FlowDivergenceError(ArithmeticError):
    pass


class FlowDomainError(ValueError):
    pass


@dataclass(frozen=True)
class IntegrationConfig:
    num_steps: int = 20
    method: str = "rk4"

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.method != "rk4":
            raise ValueError("only fixed-step rk4 is implemented")


@dataclass(frozen=True)
class OutputMap:
    """Bijection from the data value ``tau`` to the flow variable ``y``.

    ``y = (phi(tau) - loc) / scale`` with ``phi = log`` for ``log_positive``
    and the identity otherwise.
    """

    kind: str = LOG_POSITIVE
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in (IDENTITY, LOG_POSITIVE):
            raise ValueError(f"unknown output map {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("output map scale must be > 0")

    def _check(self, tau: np.ndarray):
        if self.kind == LOG_POSITIVE and np.any(tau <= 0):
            raise FlowDomainError("log_positive output map needs tau > 0")

    def to_flow(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        self._check(tau)
        phi = np.log(tau) if self.kind == LOG_POSITIVE else tau
        return (phi - self.loc) / self.scale

    def from_flow(self, y) -> np.ndarray:
        phi = np.asarray(y, dtype=np.float64) * self.scale + self.loc
        return np.exp(phi) if self.kind == LOG_POSITIVE else phi

    def log_abs_det(self, tau) -> np.ndarray:
        """``log |dy/dtau|``."""
        tau = np.asarray(tau, dtype=np.float64)
        self._check(tau)
        out = np.full(tau.shape, -math.log(self.scale))
        if self.kind == LOG_POSITIVE:
            out = out - np.log(tau)
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "loc": self.loc, "scale": self.scale}


@dataclass(frozen=True)
class BaseDistribution:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not np.all(np.asarray(self.std) > 0):
            raise ValueError("base std must be > 0")


class FlowDynamics:
    """Dynamics MLP ``h(z, s)`` with input ``[z, s]``; parameters under ``prefix``."""

    def __init__(self, hidden=(64, 64, 64), prefix: str = "flow", store: ParameterStore | None = None):
        self.spec = MlpSpec(2, tuple(hidden), 1)
        self.prefix = prefix
        self.store = store

    def init(self, store: ParameterStore, rng: np.random.Generator) -> ParameterStore:
        """Glorot hidden layers and a zero output layer, so the flow starts as the identity."""
        init_mlp(store, self.spec, self.prefix, rng, zero_last=True)
        self.store = store
        return store

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.l{i}.{k}" for i in range(self.spec.num_layers) for k in ("W", "b")]

    def field(self, params: Mapping[str, Node]) -> Field:
        """Vector field on the tape returning ``(h, dh/dz)`` for a batch column ``z``."""
        spec, pre = self.spec, self.prefix
        w0 = params[f"{pre}.l0.W"]
        w0z = w0[0]
        w0s = w0[1]
        b0 = params[f"{pre}.l0.b"]
        layers = [(params[f"{pre}.l{i}.W"], params[f"{pre}.l{i}.b"]) for i in range(1, spec.num_layers)]

        def h(z: Node, s: float, with_trace: bool = True):
            a = z * w0z + (w0s * s + b0)
            da = w0z if with_trace else None
            for w, b in layers:
                y = T.tanh(a)
                if with_trace:
                    da = T.matmul(T.dtanh_mul(y, da), w)
                a = T.matmul(y, w) + b
            return a, da

        return h

    def numpy_field(self, store: ParameterStore | None = None):
        """Field bound to plain parameter values (for evaluation-only calls)."""
        store = store if store is not None else self.store
        if store is None:
            raise ValueError("FlowDynamics has no parameter store attached")
        names = self.param_names()

        def make(tape: Tape):
            return self.field({n: tape.const(store[n]) for n in names})

        return make


# --- integration on the tape ---------------------------------------------


def integrate(field: Field, z: Node, cfg: IntegrationConfig, inverse: bool = False,
              with_trace: bool = True) -> tuple[Node, Node | None]:
    """RK4 from s=0 to s=1 (or 1 to 0 when ``inverse``).

    Returns the end state and the signed integral of ``dh/dz`` along the
    direction of travel (``None`` without trace).
    """
    n = cfg.num_steps
    dt = (-1.0 if inverse else 1.0) / n
    s = 1.0 if inverse else 0.0
    acc = None
    for _ in range(n):
        k1, t1 = field(z, s, with_trace)
        k2, t2 = field(z + k1 * (0.5 * dt), s + 0.5 * dt, with_trace)
        k3, t3 = field(z + k2 * (0.5 * dt), s + 0.5 * dt, with_trace)
        k4, t4 = field(z + k3 * dt, s + dt, with_trace)
        z = z + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0)
        if with_trace:
            inc = (t1 + 2.0 * t2 + 2.0 * t3 + t4) * (dt / 6.0)
            acc = inc if acc is None else acc + inc
        s += dt
    if not np.all(np.isfinite(z.value)) or (acc is not None and not np.all(np.isfinite(acc.value))):
        raise FlowDivergenceError("flow integration produced a non-finite state")
    return z, acc


def inverse_with_logdet(field: Field, y: Node, cfg: IntegrationConfig) -> tuple[Node, Node]:
    """``(z0, log|dz0/dy|)`` for data-side values ``y`` (a column node)."""
    z0, acc = integrate(field, y, cfg, inverse=True)
    # acc = -int_0^1 dh/dz ds, which is exactly log|dz0/dy|
    return z0, acc


def log_density_nodes(field: Field, tau, mean, log_std, cfg: IntegrationConfig, omap: OutputMap,
                      flow_cache=None) -> Node:
    """Per-element ``log p(tau)`` on the tape for base ``N(mean, exp(log_std)^2)``.

    ``tau`` is data (no gradient).  ``flow_cache`` may carry a precomputed
    ``(z0, logdet)`` pair when the same values go through the flow twice.
    """
    t = T._tape_of(mean, log_std)
    tau = np.asarray(tau, dtype=np.float64)
    if flow_cache is None:
        y = t.const(omap.to_flow(tau).reshape(-1, 1))
        z0, logdet = inverse_with_logdet(field, y, cfg)
    else:
        z0, logdet = flow_cache
    lp = T.gaussian_log_pdf(z0, mean, log_sigma=log_std)
    return lp + logdet + omap.log_abs_det(tau).reshape(-1, 1)


# --- plain-array front ends ----------------------------------------------


def _resolve_field(dyn, tape: Tape) -> Field:
    if isinstance(dyn, FlowDynamics):
        return dyn.numpy_field()(tape)
    if callable(dyn):
        return dyn
    raise TypeError("dyn must be FlowDynamics or a field callable")


def _column(tape: Tape, x) -> tuple[Node, tuple]:
    arr = np.asarray(x, dtype=np.float64)
    return tape.const(arr.reshape(-1, 1)), arr.shape


def integrate_forward(z0, dyn, cfg: IntegrationConfig = IntegrationConfig()):
    """``(y1, delta_logp)`` with ``log p(y1) = log p(z0) + delta_logp``."""
    tape = Tape(record=False)
    field = _resolve_field(dyn, tape)
    z, shape = _column(tape, z0)
    y, acc = integrate(field, z, cfg, inverse=False)
    return _unshape(y.value, shape), _unshape(-acc.value, shape)


def integrate_inverse(y, dyn, cfg: IntegrationConfig = IntegrationConfig()):
    """``(z0, delta_logp)`` with ``delta_logp = +int_0^1 dh/dz ds`` along the path.

    Thus ``log p_Z(z0) = log p_X(y) + delta_logp`` and, for matched endpoints,
    this ``delta_logp`` cancels the forward one.
    """
    tape = Tape(record=False)
    field = _resolve_field(dyn, tape)
    x, shape = _column(tape, y)
    z, acc = integrate(field, x, cfg, inverse=True)
    return _unshape(z.value, shape), _unshape(-acc.value, shape)


def _unshape(v: np.ndarray, shape: tuple):
    v = v.reshape(shape)
    return float(v) if v.ndim == 0 else v


def log_density(tau, base: BaseDistribution, dyn, cfg: IntegrationConfig = IntegrationConfig(),
                omap: OutputMap = OutputMap()):
    """``log p(tau)`` for the flow pushed through ``omap`` from ``N(base.mean, base.std^2)``."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    y = omap.to_flow(tau_arr)
    z0, delta = integrate_inverse(y, dyn, cfg)
    std = np.asarray(base.std, dtype=np.float64)
    u = (np.asarray(z0) - base.mean) / std
    lp = -0.5 * u * u - np.log(std) - 0.5 * math.log(2.0 * math.pi)
    out = lp - np.asarray(delta) + omap.log_abs_det(tau_arr)
    return float(out) if np.ndim(out) == 0 else out


def transform(z, dyn, cfg: IntegrationConfig = IntegrationConfig(), omap: OutputMap = OutputMap(),
              chunk: int = CHUNK):
    """Push base-space values through the flow and the output map (no trace)."""
    arr = np.asarray(z, dtype=np.float64)
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    for lo in range(0, flat.size, chunk):
        tape = Tape(record=False)
        field = _resolve_field(dyn, tape)
        y, _ = integrate(field, tape.const(flat[lo:lo + chunk, None]), cfg, inverse=False, with_trace=False)
        out[lo:lo + chunk] = y.value[:, 0]
    return _unshape(omap.from_flow(out), arr.shape)


def sample(base: BaseDistribution, dyn, cfg: IntegrationConfig = IntegrationConfig(),
           omap: OutputMap = OutputMap(), rng: np.random.Generator | None = None, size=None):
    """Draw ``z ~ N(mean, std^2)`` and return ``omap^-1(g(z))``."""
    rng = np.random.default_rng() if rng is None else rng
    z = rng.normal(base.mean, base.std, size=size)
    return transform(z, dyn, cfg, omap)
