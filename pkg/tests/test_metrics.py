"""Calibration metric tests, including the brute-force binning oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simcalib.metrics import (
    ace,
    compute_report,
    confidence_histogram,
    confidences,
    ece,
    nll,
    reliability,
    write_reliability_csv,
)


def brute_force_ece(conf, correct, num_bins):
    """Materialize bins as explicit lists, then apply the weighted-gap sum."""
    bins = [[] for _ in range(num_bins)]
    for c, ok in zip(conf, correct):
        m = int(np.ceil(c * num_bins))
        m = min(max(m, 1), num_bins)
        bins[m - 1].append((c, ok))
    total = len(conf)
    out = 0.0
    for members in bins:
        if not members:
            continue
        cs = [c for c, _ in members]
        oks = [ok for _, ok in members]
        out += len(members) / total * abs(np.mean(oks) - np.mean(cs))
    return out


# ---------------------------------------------------------------------------
# confidences


def test_uniform_row_tie_breaks_low_index():
    conf, pred = confidences(np.full((1, 4), 0.25))
    assert conf[0] == 0.25
    assert pred[0] == 0


def test_one_hot_row():
    conf, pred = confidences(np.array([[0.0, 0.0, 1.0]]))
    assert conf[0] == 1.0
    assert pred[0] == 2


def test_simple_row():
    conf, pred = confidences(np.array([[0.2, 0.5, 0.3]]))
    assert conf[0] == 0.5
    assert pred[0] == 1


def test_non_distribution_rejected():
    with pytest.raises(ValueError):
        confidences(np.array([[0.5, 0.2]]))
    with pytest.raises(ValueError):
        confidences(np.array([[-0.1, 1.1]]))


# ---------------------------------------------------------------------------
# ece


def test_perfect_confident_predictions_zero_ece():
    assert ece(np.ones(5), np.ones(5), 15) == 0.0


def test_hand_computed_two_bin_case():
    value = ece(np.array([0.9, 0.9, 0.6]), np.array([1.0, 0.0, 1.0]), 2)
    np.testing.assert_allclose(value, abs(2.0 / 3.0 - 0.8))


def test_balanced_bins_zero_ece():
    # two bins whose mean confidence equals their accuracy exactly
    conf = np.array([0.75] * 4 + [0.3] * 10)
    correct = np.array([1, 1, 1, 0] + [1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(ece(conf, correct, 2), 0.0, atol=1e-15)


def test_empty_node_set_errors():
    with pytest.raises(ValueError):
        ece(np.array([]), np.array([]), 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_ece_matches_brute_force_oracle(n, bins, seed):
    gen = np.random.default_rng(seed)
    conf = gen.random(n)
    correct = (gen.random(n) < conf).astype(float)
    np.testing.assert_allclose(ece(conf, correct, bins), brute_force_ece(conf, correct, bins), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 200), st.integers(1, 15), st.integers(0, 2**32 - 1))
def test_ece_and_ace_permutation_invariant(n, bins, seed):
    gen = np.random.default_rng(seed)
    conf = gen.random(n)
    correct = (gen.random(n) < 0.5).astype(float)
    perm = gen.permutation(n)
    np.testing.assert_allclose(ece(conf, correct, bins), ece(conf[perm], correct[perm], bins), atol=1e-14)
    if n >= bins:
        np.testing.assert_allclose(ace(conf, correct, bins), ace(conf[perm], correct[perm], bins), atol=1e-14)


# ---------------------------------------------------------------------------
# ace


def test_ace_perfect():
    assert ace(np.ones(4), np.ones(4), 2) == 0.0


def test_ace_hand_computed():
    value = ace(np.array([0.9, 0.9, 0.6, 0.6]), np.array([1.0, 1.0, 1.0, 0.0]), 2)
    np.testing.assert_allclose(value, 0.1)


def test_ace_constant_confidence_equal_accuracy():
    conf = np.full(10, 0.7)
    correct = np.array([1, 1, 1, 1, 1, 1, 1, 0, 0, 0], dtype=float)
    np.testing.assert_allclose(ace(conf, correct, 1), 0.0, atol=1e-15)


def test_ace_requires_enough_nodes():
    with pytest.raises(ValueError):
        ace(np.array([0.5]), np.array([1.0]), 2)


def test_ace_remainder_spread_over_first_bins():
    conf = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    correct = np.zeros(5)
    # sizes (2, 2, 1): bins {0.1,0.2}, {0.3,0.4}, {0.5}
    expected = (0.15 + 0.35 + 0.5) / 3.0
    np.testing.assert_allclose(ace(conf, correct, 3), expected)


# ---------------------------------------------------------------------------
# nll


def test_nll_one_hot_correct_zero():
    probs = np.eye(3)[np.array([0, 1, 2])]
    assert nll(probs, np.array([0, 1, 2])) == 0.0


def test_nll_uniform_log_k():
    probs = np.full((4, 4), 0.25)
    np.testing.assert_allclose(nll(probs, np.zeros(4, dtype=int)), np.log(4.0))


def test_nll_half():
    np.testing.assert_allclose(nll(np.array([[0.5, 0.5]]), np.array([0])), np.log(2.0))


def test_nll_empty_errors():
    with pytest.raises(ValueError):
        nll(np.zeros((0, 2)), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# reliability table


def test_counts_sum_to_n():
    gen = np.random.default_rng(1)
    conf = gen.random(57)
    table = reliability(conf, (gen.random(57) < 0.5).astype(float), 15)
    assert table.counts.sum() == 57


def test_recomposed_ece_identical():
    gen = np.random.default_rng(2)
    conf = gen.random(200)
    correct = (gen.random(200) < conf).astype(float)
    table = reliability(conf, correct, 15)
    assert table.ece() == ece(conf, correct, 15)


def test_single_node_lands_in_bin_11_of_15():
    table = reliability(np.array([0.7]), np.array([1.0]), 15)
    nonempty = np.nonzero(table.counts)[0]
    np.testing.assert_array_equal(nonempty, [10])  # bin 11, zero-indexed 10
    assert table.mean_acc[10] == 1.0
    np.testing.assert_allclose(table.mean_conf[10], 0.7)


def test_reliability_csv_includes_empty_bins(tmp_path):
    table = reliability(np.array([0.7]), np.array([1.0]), 15)
    path = tmp_path / "rel.csv"
    write_reliability_csv(path, table)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "bin,count,mean_conf,mean_acc"
    assert len(lines) == 16
    assert lines[1].startswith("1,0,")


def test_confidence_histogram_matches_binning():
    conf = np.array([0.1, 0.95, 0.7, 0.7])
    hist = confidence_histogram(conf, 15)
    assert hist.sum() == 4
    assert hist[10] == 2


def test_compute_report_ranges():
    gen = np.random.default_rng(3)
    probs = gen.dirichlet(np.ones(4), size=40)
    labels = gen.integers(0, 4, size=40)
    report = compute_report(probs, labels, np.arange(40), 15)
    assert 0.0 <= report.ece <= 1.0
    assert 0.0 <= report.ace <= 1.0
    assert report.nll >= 0.0
    assert 0.0 <= report.accuracy <= 1.0
