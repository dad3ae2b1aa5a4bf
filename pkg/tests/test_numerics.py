"""Tape, optimizer, and gradient-checker tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import simcalib.numerics as nm


def quadratic(leaves):
    return nm.tsum(leaves["p"] * leaves["p"])


def test_sum_of_squares_value_and_grad():
    store = nm.ParamStore()
    store.add("p", [1.0, 2.0, 3.0])
    value = nm.value_and_grad(quadratic, store)
    assert value == 14.0
    np.testing.assert_allclose(store.grad("p"), [2.0, 4.0, 6.0])


def test_constant_loss_zero_grads():
    store = nm.ParamStore()
    store.add("p", [1.0, 2.0])
    value = nm.value_and_grad(lambda leaves: nm.Tensor(7.0, needs_grad=False), store)
    assert value == 7.0
    np.testing.assert_array_equal(store.grad("p"), [0.0, 0.0])


def test_temperature_nll_gradient_matches_finite_difference():
    gen = np.random.default_rng(42)
    logits = gen.standard_normal((5, 3))
    labels = gen.integers(0, 3, size=5)
    store = nm.ParamStore()
    store.add("T", [1.3])

    def loss(leaves):
        probs = nm.softmax_rows(nm.Tensor(logits, needs_grad=False) / leaves["T"])
        return nm.mean_nll(probs, labels)

    report = nm.finite_diff_check(loss, store, step=1e-5, tol=1e-4)
    assert report.passed, report


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: nm.matmul(a, b),
    "relu": lambda a, b: nm.relu(a + 0.05),  # nudge off the kink
    "leaky_relu": lambda a, b: nm.leaky_relu(a + 0.05, 0.2),
    "softplus": lambda a, b: nm.softplus(a),
    "softmax": lambda a, b: nm.softmax_rows(a),
    "log": lambda a, b: nm.log(nm.softplus(a) + 1e-3),
    "exp": lambda a, b: nm.exp(a * 0.3),
    "pow": lambda a, b: nm.power(nm.softplus(a) + 0.5, 1.7),
    "clamp": lambda a, b: nm.clamp_min(a, 0.05),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_each_op_matches_finite_differences(name):
    gen = np.random.default_rng(hash(name) % 2**32)
    rows, cols = int(gen.integers(2, 8)), int(gen.integers(2, 8))
    store = nm.ParamStore()
    store.add("a", gen.standard_normal((rows, cols)))
    store.add("b", gen.standard_normal((cols, cols)) if name == "matmul" else gen.standard_normal((rows, cols)))

    def loss(leaves):
        out = OPS[name](leaves["a"], leaves["b"])
        return nm.mean(out * out)

    report = nm.finite_diff_check(loss, store, step=1e-5, tol=1e-4)
    assert report.passed, (name, report)


def test_gather_and_pick_gradients():
    gen = np.random.default_rng(7)
    idx = np.array([0, 2, 2, 4])
    cols = np.array([1, 0, 2, 1])
    store = nm.ParamStore()
    store.add("x", gen.standard_normal((5, 3)))

    def loss(leaves):
        rows = nm.gather_rows(leaves["x"], idx)
        return nm.mean(nm.pick(rows, cols) * 2.0)

    report = nm.finite_diff_check(loss, store, step=1e-5, tol=1e-4)
    assert report.passed, report


def test_spmm_gradient():
    import scipy.sparse as sp

    gen = np.random.default_rng(3)
    op = sp.random(6, 6, density=0.4, random_state=5, format="csr")
    store = nm.ParamStore()
    store.add("x", gen.standard_normal((6, 2)))

    def loss(leaves):
        return nm.mean(nm.power(nm.spmm(op, leaves["x"]), 2.0))

    report = nm.finite_diff_check(loss, store, step=1e-5, tol=1e-4)
    assert report.passed, report


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(2, 9), st.integers(0, 2**32 - 1))
def test_softmax_rows_are_distributions(rows, cols, seed):
    z = np.random.default_rng(seed).standard_normal((rows, cols)) * 5
    s = nm.softmax_rows_np(z)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-60, 60))
def test_softplus_strictly_positive(x):
    assert nm.softplus_np(np.array([x])) > 0.0


def test_nonfinite_loss_names_first_bad_op():
    store = nm.ParamStore()
    store.add("p", [1.0])

    def loss(leaves):
        bad = nm.log(leaves["p"] - 5.0)  # log of a negative number
        return nm.tsum(bad * bad)

    with np.errstate(invalid="ignore"):
        with pytest.raises(nm.NonFiniteLossError, match="log"):
            nm.value_and_grad(loss, store)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradients_leave_params_unchanged():
    store = nm.ParamStore()
    store.add("x", [1.0, -2.0])
    state = nm.AdamState.for_params(store, weight_decay=0.0)
    nm.value_and_grad(lambda leaves: nm.Tensor(0.0, needs_grad=False), store)
    nm.adam_step(store, state)
    np.testing.assert_array_equal(store.value("x"), [1.0, -2.0])
    assert state.step_count == 1


def test_adam_descends_on_square():
    store = nm.ParamStore()
    store.add("x", [1.0])
    state = nm.AdamState.for_params(store, lr=0.1, weight_decay=0.0)
    nm.value_and_grad(lambda leaves: nm.tsum(leaves["x"] * leaves["x"]), store)
    nm.adam_step(store, state)
    assert 0.0 < store.value("x")[0] < 1.0


def test_adam_converges_on_shifted_square():
    store = nm.ParamStore()
    store.add("x", [1.0])
    state = nm.AdamState.for_params(store, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        nm.value_and_grad(lambda leaves: nm.tsum((leaves["x"] - 3.0) * (leaves["x"] - 3.0)), store)
        nm.adam_step(store, state)
    assert abs(store.value("x")[0] - 3.0) < 1e-2


def test_adam_before_any_gradient_errors():
    store = nm.ParamStore()
    store.add("x", [1.0])
    state = nm.AdamState.for_params(store)
    with pytest.raises(RuntimeError):
        nm.adam_step(store, state)


def test_weight_decay_is_decoupled():
    store = nm.ParamStore()
    store.add("x", [2.0])
    state = nm.AdamState.for_params(store, lr=0.1, weight_decay=0.5)
    nm.value_and_grad(lambda leaves: nm.Tensor(0.0, needs_grad=False), store)
    nm.adam_step(store, state)
    # zero gradient: only the decay term moves the parameter
    np.testing.assert_allclose(store.value("x"), [2.0 - 0.1 * 0.5 * 2.0])


# ---------------------------------------------------------------------------
# finite-diff checker


def test_checker_passes_simple_square():
    store = nm.ParamStore()
    store.add("x", [3.0])
    report = nm.finite_diff_check(quadratic_x, store, step=1e-5, tol=1e-4)
    assert report.passed
    assert report.worst_rel_err < 1e-6


def quadratic_x(leaves):
    return nm.tsum(leaves["x"] * leaves["x"])


def test_checker_flags_corrupted_gradient():
    store = nm.ParamStore()
    store.add("x", [3.0])

    def doubled_grad(x):
        # deliberately wrong backward: reports twice the true gradient
        return nm.Tensor(x.value * x.value, (x,), lambda g: (4.0 * x.value * g,), name="bad_square")

    def loss(leaves):
        return nm.tsum(doubled_grad(leaves["x"]))

    report = nm.finite_diff_check(loss, store, step=1e-5, tol=1e-4)
    assert not report.passed
    assert report.worst_rel_err > 0.1


def test_checker_rejects_nonpositive_step():
    store = nm.ParamStore()
    store.add("x", [1.0])
    with pytest.raises(ValueError):
        nm.finite_diff_check(quadratic_x, store, step=0.0)
