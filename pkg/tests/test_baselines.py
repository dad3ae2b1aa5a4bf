"""Tests for the reference calibrators (TS, VS, ETS, GCN-on-logits)."""

import numpy as np
import pytest

from conftest import E2E_CSBM, E2E_GCN, overtrained_subject, random_bundle
from simcalib.baselines import (
    CagcnConfig,
    CagcnModel,
    fit_cagcn,
    fit_ets,
    fit_ts,
    fit_vs,
    project_simplex,
)
from simcalib.classifier import NodeBundle
from simcalib.graph import normalized_adjacency
from simcalib.metrics import compute_report, nll
from simcalib.numerics import softmax_rows_np


def simple_bundle(logits, labels, cal=None):
    n = logits.shape[0]
    cal = np.arange(n) if cal is None else cal
    masks = {"train": cal, "val": cal, "test": cal}
    return NodeBundle(
        features=np.zeros((n, 1)),
        hidden=np.zeros((n, 1)),
        logits=np.asarray(logits, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        masks=masks,
    )


# ---------------------------------------------------------------------------
# temperature scaling


def test_ts_flat_logits_returns_one():
    bundle = simple_bundle(np.zeros((6, 3)), np.array([0, 1, 2, 0, 1, 2]))
    assert fit_ts(bundle, np.arange(6)).temperature == 1.0


def test_ts_softens_overconfident_model():
    gen = np.random.default_rng(0)
    n, k = 400, 4
    labels = gen.integers(0, k, size=n)
    logits = 8.0 * np.eye(k)[labels] + gen.standard_normal((n, k))
    corrupt = gen.choice(n, size=int(0.3 * n), replace=False)
    labels = labels.copy()
    labels[corrupt] = (labels[corrupt] + 1) % k  # confident model, 30% wrong
    bundle = simple_bundle(logits, labels)
    model = fit_ts(bundle, np.arange(n))
    assert model.temperature > 1.0
    assert nll(model.apply(logits), labels) <= nll(softmax_rows_np(logits), labels) + 1e-9


def test_ts_preserves_argmax():
    gen = np.random.default_rng(1)
    logits = gen.standard_normal((200, 5)) * 3
    bundle = simple_bundle(logits, gen.integers(0, 5, size=200))
    model = fit_ts(bundle, np.arange(200))
    np.testing.assert_array_equal(model.apply(logits).argmax(axis=1), logits.argmax(axis=1))


def test_ts_empty_calibration_set_errors():
    bundle = simple_bundle(np.zeros((3, 2)), np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        fit_ts(bundle, np.array([], dtype=np.int64))


# ---------------------------------------------------------------------------
# vector scaling


def test_vs_stationary_at_optimum_returns_identity():
    # zero logits + balanced labels: gradient at (w, b) = (1, 0) vanishes
    labels = np.array([0, 1, 2, 3] * 5)
    bundle = simple_bundle(np.zeros((20, 4)), labels)
    model = fit_vs(bundle, np.arange(20))
    np.testing.assert_allclose(model.scale, np.ones(4), atol=1e-12)
    np.testing.assert_allclose(model.bias, np.zeros(4), atol=1e-12)


def test_vs_bias_compensates_offset_class():
    gen = np.random.default_rng(2)
    n, k = 300, 2
    labels = gen.integers(0, k, size=n)
    logits = 2.0 * np.eye(k)[labels] + 0.3 * gen.standard_normal((n, k))
    logits[:, 1] += 1.5  # class 1 systematically overscored
    bundle = simple_bundle(logits, labels)
    model = fit_vs(bundle, np.arange(n))
    assert model.bias[1] - model.bias[0] < -0.5


def test_vs_can_change_argmax():
    # class-1 logits offset so argmax is always 1, but labels are all 0:
    # the fitted bias must flip predictions
    n = 60
    logits = np.column_stack([np.zeros(n), np.full(n, 0.8)])
    labels = np.zeros(n, dtype=int)
    bundle = simple_bundle(logits, labels)
    model = fit_vs(bundle, np.arange(n))
    before = logits.argmax(axis=1)
    after = model.apply(logits).argmax(axis=1)
    assert (before != after).any()


def test_vs_never_worse_than_identity_nll():
    gen = np.random.default_rng(3)
    logits = gen.standard_normal((150, 3)) * 2
    labels = gen.integers(0, 3, size=150)
    bundle = simple_bundle(logits, labels)
    model = fit_vs(bundle, np.arange(150))
    assert nll(model.apply(logits), labels) <= nll(softmax_rows_np(logits), labels) + 1e-9


# ---------------------------------------------------------------------------
# ensemble temperature scaling


def test_project_simplex_properties():
    gen = np.random.default_rng(4)
    for _ in range(100):
        v = gen.standard_normal(3) * 3
        p = project_simplex(v)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-9)
        np.testing.assert_allclose(project_simplex(p), p, atol=1e-12)
    np.testing.assert_allclose(project_simplex(np.array([0.2, 0.5, 0.3])), [0.2, 0.5, 0.3], atol=1e-12)


def test_ets_pure_ts_weights_reproduce_ts():
    gen = np.random.default_rng(5)
    logits = gen.standard_normal((100, 4)) * 2
    labels = gen.integers(0, 4, size=100)
    bundle = simple_bundle(logits, labels)
    ets = fit_ets(bundle, np.arange(100))
    from simcalib.baselines import EtsModel

    pure = EtsModel(np.array([0.0, 1.0, 0.0]), ets.temperature)
    np.testing.assert_allclose(pure.apply(logits), softmax_rows_np(logits / ets.temperature), atol=1e-12)


def test_ets_weights_concentrate_on_calibrated_ts_component():
    # construct a case where the TS-calibrated component is already perfect
    gen = np.random.default_rng(6)
    n, k = 2000, 2
    logits = gen.standard_normal((n, k)) * 2
    probs = softmax_rows_np(logits)
    labels = (gen.random(n) < probs[:, 1]).astype(int)  # perfectly calibrated at T=1
    bundle = simple_bundle(logits, labels)
    ets = fit_ets(bundle, np.arange(n))
    assert ets.weights[1] >= max(ets.weights[0], ets.weights[2])
    assert nll(ets.apply(logits), labels) <= nll(softmax_rows_np(logits / ets.temperature), labels) + 1e-9


def test_ets_outputs_are_distributions_and_preserve_argmax():
    gen = np.random.default_rng(7)
    logits = gen.standard_normal((120, 5)) * 3
    labels = gen.integers(0, 5, size=120)
    bundle = simple_bundle(logits, labels)
    ets = fit_ets(bundle, np.arange(120))
    out = ets.apply(logits)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(out.argmax(axis=1), logits.argmax(axis=1))
    np.testing.assert_allclose(ets.weights.sum(), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# GCN-on-logits nodewise temperatures


def test_cagcn_zero_output_layer_gives_log_two():
    graph, bundle = random_bundle(0)
    model = CagcnModel(
        w1=np.zeros((bundle.num_classes, 16)),
        b1=np.zeros(16),
        w2=np.zeros((16, 1)),
        b2=np.zeros(1),
    )
    temps = model.temperatures(bundle.logits, normalized_adjacency(graph))
    np.testing.assert_allclose(temps, np.log(2.0))


def test_cagcn_preserves_argmax():
    graph, bundle = random_bundle(1)
    model = fit_cagcn(bundle, graph, bundle.masks["val"], CagcnConfig(max_epochs=40, seed=2))
    out = model.apply(bundle.logits, normalized_adjacency(graph))
    np.testing.assert_array_equal(out.argmax(axis=1), bundle.logits.argmax(axis=1))
    assert model.temperatures(bundle.logits, normalized_adjacency(graph)).min() >= 0.01


def test_cagcn_improves_overtrained_subject_over_five_seeds():
    before, after = [], []
    for seed in range(5):
        graph, bundle = overtrained_subject(seed=100 + seed, num_nodes=400)
        test_idx = bundle.masks["test"]
        probs = softmax_rows_np(bundle.logits)
        before.append(compute_report(probs, bundle.labels, test_idx, 15).ece)
        model = fit_cagcn(
            bundle, graph, bundle.masks["val"], CagcnConfig(seed=seed), selection_idx=bundle.masks["train"]
        )
        out = model.apply(bundle.logits, normalized_adjacency(graph))
        after.append(compute_report(out, bundle.labels, test_idx, 15).ece)
    assert np.mean(after) <= np.mean(before)


def test_fitted_calibrators_deterministic():
    graph, bundle = random_bundle(3)
    a = fit_cagcn(bundle, graph, bundle.masks["val"], CagcnConfig(max_epochs=30, seed=9))
    b = fit_cagcn(bundle, graph, bundle.masks["val"], CagcnConfig(max_epochs=30, seed=9))
    np.testing.assert_array_equal(a.w1, b.w1)
    np.testing.assert_array_equal(a.w2, b.w2)
    ts_a = fit_ts(bundle, bundle.masks["val"]).temperature
    ts_b = fit_ts(bundle, bundle.masks["val"]).temperature
    assert ts_a == ts_b
