"""Calibration metrics: ECE, adaptive calibration error, NLL, accuracy,
and the per-bin reliability table.

ECE uses M equal-width confidence bins ((m-1)/M, m/M]; a node with
confidence c lands in bin clamp(ceil(c*M), 1, M).  The reported value is
the bin-size-weighted mean absolute gap between bin accuracy and bin
confidence.  ACE instead sorts nodes by confidence into M equal-mass bins
and averages the gaps unweighted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CalibReport",
    "ReliabilityTable",
    "ace",
    "compute_report",
    "confidence_histogram",
    "confidences",
    "ece",
    "nll",
    "reliability",
    "write_reliability_csv",
]


@dataclass(frozen=True)
class ReliabilityTable:
    """Per-bin count, mean confidence, and mean accuracy (zeros if empty)."""

    counts: np.ndarray
    mean_conf: np.ndarray
    mean_acc: np.ndarray

    @property
    def num_bins(self) -> int:
        return self.counts.size

    def ece(self) -> float:
        total = self.counts.sum()
        weights = self.counts / total
        return float(np.sum(weights * np.abs(self.mean_acc - self.mean_conf)))


@dataclass(frozen=True)
class CalibReport:
    ece: float
    ace: float
    nll: float
    accuracy: float
    num_bins: int

    def as_dict(self) -> dict:
        return {
            "ece": self.ece,
            "ace": self.ace,
            "nll": self.nll,
            "accuracy": self.accuracy,
            "num_bins": self.num_bins,
        }


def confidences(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-node max probability and argmax (lowest index wins ties)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be N x K")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability distributions")
    return probs.max(axis=1), probs.argmax(axis=1)


def _bin_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    # half-open bins ((m-1)/M, m/M]; confidence 0 clamps into bin 1
    idx = np.ceil(np.asarray(conf, dtype=np.float64) * num_bins).astype(np.int64)
    return np.clip(idx, 1, num_bins)


def reliability(conf, correct, num_bins: int) -> ReliabilityTable:
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if num_bins < 1:
        raise ValueError("need at least one bin")
    if conf.size == 0:
        raise ValueError("empty node set")
    idx = _bin_index(conf, num_bins) - 1
    counts = np.bincount(idx, minlength=num_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    mean_conf = np.zeros(num_bins)
    mean_acc = np.zeros(num_bins)
    nz = counts > 0
    mean_conf[nz] = conf_sum[nz] / counts[nz]
    mean_acc[nz] = acc_sum[nz] / counts[nz]
    return ReliabilityTable(counts, mean_conf, mean_acc)


def ece(conf, correct, num_bins: int) -> float:
    """Equal-width-bin expected calibration error."""
    return reliability(conf, correct, num_bins).ece()


def ace(conf, correct, num_bins: int) -> float:
    """Adaptive (equal-mass-bin) calibration error, bins averaged unweighted."""
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    n = conf.size
    if num_bins < 1:
        raise ValueError("need at least one bin")
    if n < num_bins:
        raise ValueError(f"need at least {num_bins} nodes for {num_bins} equal-mass bins")
    order = np.argsort(conf, kind="stable")
    base, rem = divmod(n, num_bins)
    sizes = np.full(num_bins, base, dtype=np.int64)
    sizes[:rem] += 1
    gaps = []
    start = 0
    for size in sizes:
        sel = order[start : start + size]
        gaps.append(abs(correct[sel].mean() - conf[sel].mean()))
        start += size
    return float(np.mean(gaps))


def nll(probs, labels, node_idx=None) -> float:
    """Mean negative log likelihood; probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if node_idx is not None:
        node_idx = np.asarray(node_idx, dtype=np.int64)
        probs = probs[node_idx]
        labels = labels[node_idx]
    if probs.shape[0] == 0:
        raise ValueError("empty node set")
    p = np.maximum(probs[np.arange(probs.shape[0]), labels], 1e-12)
    return float(-np.log(p).mean())


def compute_report(probs, labels, node_idx, num_bins: int) -> CalibReport:
    """All four metrics on one node subset."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    node_idx = np.asarray(node_idx, dtype=np.int64)
    conf, pred = confidences(probs[node_idx])
    correct = (pred == labels[node_idx]).astype(np.float64)
    return CalibReport(
        ece=ece(conf, correct, num_bins),
        ace=ace(conf, correct, num_bins),
        nll=nll(probs, labels, node_idx),
        accuracy=float(correct.mean()),
        num_bins=num_bins,
    )


def confidence_histogram(conf, num_bins: int) -> np.ndarray:
    """Counts per equal-width confidence bin (same binning as ECE)."""
    idx = _bin_index(conf, num_bins) - 1
    return np.bincount(idx, minlength=num_bins).astype(np.int64)


def write_reliability_csv(path, table: ReliabilityTable) -> None:
    """Emit `bin,count,mean_conf,mean_acc` rows, empty bins included."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "count", "mean_conf", "mean_acc"])
        for m in range(table.num_bins):
            writer.writerow(
                [m + 1, int(table.counts[m]), f"{table.mean_conf[m]:.9g}", f"{table.mean_acc[m]:.9g}"]
            )
