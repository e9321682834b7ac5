import numpy as np
import pytest


def central_fd(f, x: np.ndarray, h: float = 1e-5, index=None, stencil: int = 3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x``.

    ``index`` restricts the probe to some entries (others are left at zero);
    ``stencil=5`` uses the fourth-order five-point rule.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    points = np.ndindex(x.shape) if index is None else index

    def at(i, v):
        old = x[i]
        x[i] = v
        out = f(x)
        x[i] = old
        return out

    for i in points:
        old = x[i]
        if stencil == 5:
            g[i] = (-at(i, old + 2 * h) + 8 * at(i, old + h) - 8 * at(i, old - h) + at(i, old - 2 * h)) / (12 * h)
        else:
            g[i] = (at(i, old + h) - at(i, old - h)) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def objective_total(model, batch, values, eps=None, record=False):
    """Summed per-event objective (LL or fixed-noise ELBO) for parameter ``values``."""
    from ppflow.diffkit import Tape
    from ppflow.diffkit import ops as T

    tape = Tape(record=record)
    params = {k: (tape.leaf(v) if record else tape.const(v)) for k, v in values.items()}
    kw = {"eps": eps} if eps is not None else {}
    per, _ = model.objective(tape, params, batch, np.random.default_rng(0), **kw)
    total = T.sum(per * batch.mask.reshape(-1, 1).astype(np.float64))
    return tape, params, total


def model_gradient_errors(model, batch, eps=None, probes_per_tensor=None, seed=0, h=1e-4):
    """Max relative error between tape and five-point finite-difference gradients, per tensor.

    Only entries with finite-difference magnitude above 1e-6 are compared.
    """
    values = {k: v.copy() for k, v in model.store.items()}
    tape, params, total = objective_total(model, batch, values, eps, record=True)
    grads = tape.gradients(total, params)
    rng = np.random.default_rng(seed)
    worst = {}
    for name, v in values.items():
        idx = list(np.ndindex(v.shape))
        if probes_per_tensor is not None and len(idx) > probes_per_tensor:
            idx = [idx[i] for i in rng.choice(len(idx), probes_per_tensor, replace=False)]

        def f(x, name=name):
            vals = dict(values)
            vals[name] = x
            return float(objective_total(model, batch, vals, eps)[2].value)

        fd = central_fd(f, v, h=h, index=idx, stencil=5)
        sel = tuple(np.array(idx).T)
        a, b = grads[name][sel], fd[sel]
        mask = np.abs(b) > 1e-6
        worst[name] = float(np.max(rel_err(a, b)[mask])) if mask.any() else 0.0
    return worst


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion, printed in the summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str):
        lines.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
