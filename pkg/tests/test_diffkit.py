import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppflow.diffkit import (
    AdamConfig,
    DomainError,
    LstmCellSpec,
    MlpSpec,
    ParameterStore,
    ShapeError,
    Tape,
    adam_step,
    glorot_bound,
    init_params,
    linear,
    lstm_step,
    mlp_forward,
)
from ppflow.diffkit import ops as T

from conftest import central_fd, rel_err


def grads(fn, *arrays):
    tape = Tape()
    leaves = {f"x{i}": tape.leaf(a) for i, a in enumerate(arrays)}
    out = fn(*leaves.values())
    g = tape.gradients(out, leaves)
    return float(out.value), [g[f"x{i}"] for i in range(len(arrays))]


def value(fn, *arrays):
    tape = Tape(record=False)
    return float(fn(*[tape.const(a) for a in arrays]).value)


# --- primitive values ---------------------------------------------------------


def test_gaussian_log_pdf_standard_normal_at_zero():
    tape = Tape()
    v = T.gaussian_log_pdf(tape.const(0.0), tape.const(0.0), tape.const(1.0))
    assert float(v.value) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert float(v.value) == pytest.approx(-0.918939, abs=1e-6)


def test_gaussian_log_pdf_log_sigma_form_agrees():
    tape = Tape()
    x, mu = tape.const(np.array([0.3, -1.2])), tape.const(np.array([1.0, 0.5]))
    a = T.gaussian_log_pdf(x, mu, tape.const(np.array([0.5, 2.0])))
    b = T.gaussian_log_pdf(x, mu, log_sigma=tape.const(np.log([0.5, 2.0])))
    np.testing.assert_allclose(a.value, b.value, rtol=1e-14)


def test_logsumexp_and_softplus_at_zero():
    tape = Tape()
    assert float(T.logsumexp(tape.const(np.zeros(2))).value) == pytest.approx(math.log(2), abs=1e-12)
    assert float(T.softplus(tape.const(0.0)).value) == pytest.approx(math.log(2), abs=1e-12)


def test_logsumexp_is_stable_for_large_inputs():
    tape = Tape()
    v = T.logsumexp(tape.const(np.array([1000.0, 1000.0])))
    assert float(v.value) == pytest.approx(1000 + math.log(2))


def test_log_rejects_non_positive():
    tape = Tape()
    with pytest.raises(DomainError):
        T.log(tape.const(np.array([1.0, 0.0])))


def test_shape_mismatch_raises():
    tape = Tape()
    with pytest.raises(ShapeError):
        T.matmul(tape.const(np.ones((2, 3))), tape.const(np.ones((2, 3))))


# --- gradients ----------------------------------------------------------------


def test_square_gradient():
    _, (g,) = grads(lambda x: T.square(x), np.array(3.0))
    assert float(g) == 6.0


def test_product_gradient():
    _, (gx, gy) = grads(lambda x, y: x * y, np.array(2.0), np.array(5.0))
    assert (float(gx), float(gy)) == (5.0, 2.0)


def test_unused_leaf_gets_exact_zero():
    tape = Tape()
    a, b = tape.leaf(np.array([1.0, 2.0])), tape.leaf(np.array([3.0]))
    g = tape.gradients(T.sum(a * a), {"a": a, "b": b})
    assert np.array_equal(g["b"], np.zeros(1))
    np.testing.assert_array_equal(g["a"], [2.0, 4.0])


def test_backward_needs_scalar_seed():
    tape = Tape()
    a = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(a * 2.0)


def test_evaluation_tape_records_nothing():
    tape = Tape(record=False)
    x = tape.const(np.ones(4))
    T.sum(T.tanh(x) * 3.0)
    assert tape.kinds() == []


UNARY = {
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "exp": lambda a: T.exp(a * 0.5),
    "softplus": T.softplus,
    "square": T.square,
    "log": lambda a: T.log(T.square(a) + 0.5),
    "clip": lambda a: T.clip(a, -5.0, 5.0),
}

BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.square(b) + 1.0),
}


def random_graph(rng, depth):
    """Composite scalar function of two (3, 4) inputs built from random ops."""
    ops = [(rng.choice(list(UNARY)), rng.choice(list(BINARY))) for _ in range(depth)]
    w = rng.normal(size=(4, 2))
    axis_lse = int(rng.integers(0, 2))

    def f(x, y):
        a = x
        for un, bi in ops:
            a = BINARY[bi](UNARY[un](a), y)
        m = T.matmul(a, w)
        parts = T.concat([m, a[:, :2]], axis=-1)
        return T.sum(T.logsumexp(parts, axis=axis_lse)) + T.mean(T.log_softmax(a, axis=-1)[1])

    return f


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(1, 4))
def test_random_graphs_match_finite_differences(seed, depth):
    rng = np.random.default_rng(seed)
    f = random_graph(rng, depth)
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) * 0.5
    _, (gx, gy) = grads(f, x, y)
    fdx = central_fd(lambda v: value(f, v, y), x)
    fdy = central_fd(lambda v: value(f, x, v), y)
    for g, fd in ((gx, fdx), (gy, fdy)):
        mask = np.abs(fd) > 1e-6
        assert np.all(rel_err(g, fd)[mask] < 1e-4)


def test_broadcasting_gradient_is_reduced(rng):
    x, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    _, (gx, gb) = grads(lambda x, b: T.sum(T.tanh(x + b)), x, b)
    assert gb.shape == (3,)
    np.testing.assert_allclose(gb, central_fd(lambda v: value(lambda x, b: T.sum(T.tanh(x + b)), x, v), b),
                               rtol=1e-7)


def test_getitem_fancy_index_accumulates():
    tape = Tape()
    x = tape.leaf(np.arange(4.0))
    y = T.sum(x[np.array([0, 0, 2])])
    g = tape.gradients(y, {"x": x})["x"]
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0, 0.0])


def test_dtanh_mul_matches_derivative(rng):
    a = rng.normal(size=5)
    tape = Tape(record=False)
    y = T.tanh(tape.const(a))
    out = T.dtanh_mul(y, tape.const(np.ones(5)))
    np.testing.assert_allclose(out.value, 1 - np.tanh(a) ** 2, rtol=1e-14)


def test_tape_is_deterministic(rng):
    x = rng.normal(size=(6, 4))
    f = random_graph(np.random.default_rng(3), 3)
    y = rng.normal(size=(6, 4))
    a, ga = grads(f, x, y)
    b, gb = grads(f, x, y)
    assert a == b
    assert all(np.array_equal(p, q) for p, q in zip(ga, gb))


# --- layers -------------------------------------------------------------------


def test_mlp_with_zero_parameters_outputs_zero(rng):
    spec = MlpSpec(3, (8, 8), 2)
    store = init_params(spec, seed=0)
    for k in store:
        store[k] = np.zeros_like(store[k])
    tape = Tape(record=False)
    out = mlp_forward(spec, {k: tape.const(v) for k, v in store.items()}, tape.const(rng.normal(size=(5, 3))))
    assert np.array_equal(out.value, np.zeros((5, 2)))


def test_identity_linear_layer_returns_input(rng):
    tape = Tape(record=False)
    params = {"id.W": tape.const(np.eye(3)), "id.b": tape.const(np.zeros(3))}
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(linear(params, "id", tape.const(x)).value, x)


def test_mlp_weight_gradients_match_finite_differences(rng):
    spec = MlpSpec(2, (5, 4), 3)
    store = init_params(spec, seed=1)
    x = rng.normal(size=(6, 2))

    def loss(values):
        tape = Tape()
        params = {k: tape.leaf(values[k]) for k in values}
        out = T.sum(mlp_forward(spec, params, tape.const(x)))
        return tape, params, out

    base = {k: v.copy() for k, v in store.items()}
    tape, params, out = loss(base)
    g = tape.gradients(out, params)
    for name in base:
        def f(v, name=name):
            vals = dict(base)
            vals[name] = v
            return float(loss(vals)[2].value)
        fd = central_fd(f, base[name])
        mask = np.abs(fd) > 1e-6
        assert np.all(rel_err(g[name], fd)[mask] < 1e-4), name


def reference_lstm(w, b, x, h, c):
    """Plain numpy LSTM cell with gate blocks i, f, g, o."""
    z = np.concatenate([x, h], axis=-1) @ w + b
    n = h.shape[-1]
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[..., :n]), sig(z[..., n:2 * n]), np.tanh(z[..., 2 * n:3 * n]), sig(z[..., 3 * n:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def run_cell(spec, w, b, x, h, c):
    tape = Tape(record=False)
    params = {"lstm.W": tape.const(w), "lstm.b": tape.const(b)}
    h2, c2 = lstm_step(spec, params, tape.const(x), (tape.const(h), tape.const(c)))
    return h2.value, c2.value


def test_lstm_zero_parameters_zero_state_stays_zero(rng):
    spec = LstmCellSpec(3, 4)
    w, b = np.zeros((7, 16)), np.zeros(16)
    h, c = run_cell(spec, w, b, rng.normal(size=(2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
    assert np.array_equal(h, np.zeros((2, 4))) and np.array_equal(c, np.zeros((2, 4)))


def test_lstm_zero_parameters_halves_cell():
    spec = LstmCellSpec(1, 1)
    h, c = run_cell(spec, np.zeros((2, 4)), np.zeros(4), np.array([[7.0]]), np.zeros((1, 1)), np.array([[2.0]]))
    h, c = h.item(), c.item()
    assert float(c) == pytest.approx(1.0, abs=1e-15)
    assert float(h) == pytest.approx(0.5 * math.tanh(1.0), abs=1e-15)
    assert float(h) == pytest.approx(0.380797, abs=1e-6)


def test_lstm_matches_reference_cell(rng):
    spec = LstmCellSpec(3, 5)
    store = init_params(spec, seed=2, prefix="lstm")
    x, h, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    got = run_cell(spec, store["lstm.W"], store["lstm.b"], x, h, c)
    want = reference_lstm(store["lstm.W"], store["lstm.b"], x, h, c)
    np.testing.assert_allclose(got[0], want[0], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(got[1], want[1], rtol=1e-13, atol=1e-15)


def test_lstm_three_step_unroll_gradients(rng):
    spec = LstmCellSpec(2, 3)
    store = init_params(spec, seed=4, prefix="lstm")
    xs = rng.normal(size=(3, 2, 2))

    def total(w, b, record=True):
        tape = Tape(record=record)
        pw, pb = (tape.leaf(w), tape.leaf(b)) if record else (tape.const(w), tape.const(b))
        h = c = tape.const(np.zeros((2, 3)))
        for x in xs:
            h, c = lstm_step(spec, {"lstm.W": pw, "lstm.b": pb}, tape.const(x), (h, c))
        out = T.sum(T.square(h)) + T.sum(c)
        return tape, {"W": pw, "b": pb}, out

    tape, params, out = total(store["lstm.W"], store["lstm.b"])
    g = tape.gradients(out, params)
    fd_w = central_fd(lambda w: float(total(w, store["lstm.b"], False)[2].value), store["lstm.W"])
    fd_b = central_fd(lambda b: float(total(store["lstm.W"], b, False)[2].value), store["lstm.b"])
    for a, fd in ((g["W"], fd_w), (g["b"], fd_b)):
        mask = np.abs(fd) > 1e-6
        assert np.all(rel_err(a, fd)[mask] < 1e-4)


# --- initialization -------------------------------------------------------------


def test_init_is_seeded_and_bounded():
    spec = LstmCellSpec(2, 8)
    a, b = init_params(spec, seed=5, prefix="lstm"), init_params(spec, seed=5, prefix="lstm")
    assert a.equals(b)
    assert np.all(np.abs(a["lstm.W"]) <= glorot_bound(10, 32))
    assert np.all(a["lstm.b"][8:16] == 1.0)
    assert np.all(a["lstm.b"][:8] == 0.0) and np.all(a["lstm.b"][16:] == 0.0)


def test_mlp_init_bounds():
    spec = MlpSpec(3, (16,), 2)
    store = init_params(spec, seed=0)
    assert np.all(np.abs(store["net.l0.W"]) <= glorot_bound(3, 16))
    assert np.all(np.abs(store["net.l1.W"]) <= glorot_bound(16, 2))


# --- Adam -------------------------------------------------------------------------


def reference_adam(p, g, m, v, t, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    return p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps), m, v


def test_adam_first_step_moves_by_lr():
    store = ParameterStore()
    store.add("w", np.array([1.0, -2.0, 3.0]))
    adam_step(store, {"w": np.array([0.5, -4.0, 1e-3])})
    np.testing.assert_allclose(store["w"] - np.array([1.0, -2.0, 3.0]), [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_adam_matches_reference_over_steps(rng):
    store = ParameterStore()
    p = rng.normal(size=4)
    store.add("w", p.copy())
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(store, {"w": g}, AdamConfig(lr=0.01))
        p, m, v = reference_adam(p, g, m, v, t, lr=0.01)
    np.testing.assert_allclose(store["w"], p, rtol=1e-13)


def test_adam_zero_gradient_only_decays_moments():
    store = ParameterStore()
    store.add("w", np.array([1.0]))
    adam_step(store, {"w": np.array([2.0])})
    before = store["w"].copy()
    m, v = store.adam_m["w"].copy(), store.adam_v["w"].copy()
    store2 = store.copy()
    adam_step(store2, {"w": np.array([0.0])})
    np.testing.assert_allclose(store2.adam_m["w"], 0.9 * m)
    np.testing.assert_allclose(store2.adam_v["w"], 0.999 * v)
    # the parameter still moves with the decayed momentum, but a fresh store does not
    fresh = ParameterStore()
    fresh.add("w", before.copy())
    adam_step(fresh, {"w": np.array([0.0])})
    assert np.array_equal(fresh["w"], before)


def test_adam_gradient_keys_must_match():
    store = ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        adam_step(store, {})
    with pytest.raises(KeyError):
        adam_step(store, {"w": np.zeros(2), "z": np.zeros(1)})


def test_adam_is_deterministic(rng):
    gs = [rng.normal(size=3) for _ in range(4)]
    outs = []
    for _ in range(2):
        store = ParameterStore()
        store.add("w", np.ones(3))
        for g in gs:
            adam_step(store, {"w": g})
        outs.append(store["w"].copy())
    assert np.array_equal(outs[0], outs[1])


# --- parameter store --------------------------------------------------------------


def test_store_rejects_duplicates_and_shape_changes():
    store = ParameterStore()
    store.add("a", np.zeros(3))
    with pytest.raises(KeyError):
        store.add("a", np.zeros(3))
    with pytest.raises(ValueError):
        store["a"] = np.zeros(4)


def test_store_round_trips_through_json(tmp_path, rng):
    store = init_params(MlpSpec(2, (3,), 1), seed=9)
    adam_step(store, {k: rng.normal(size=v.shape) for k, v in store.items()})
    path = tmp_path / "p.json"
    store.save(path)
    back = ParameterStore.load(path)
    assert back.equals(store)
    assert back.step == 1
    assert all(np.array_equal(back.adam_m[k], store.adam_m[k]) for k in store)
    assert json.loads(path.read_text())["version"] == 1


def test_store_rejects_unknown_version():
    with pytest.raises(ValueError):
        ParameterStore.from_dict({"version": 99, "params": {}})
