"""Contextual stochastic block model generator.

Produces desk-scale graphs with controllable homophily (p_in vs p_out),
Gaussian class-conditional features around equidistant class anchors, and
a random disjoint train/val/test split.  Output is a pure function of the
parameter record, including its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .graph import Graph, build_graph

__all__ = ["CsbmParams", "CsbmSample", "gen_csbm"]


@dataclass(frozen=True)
class CsbmParams:
    num_nodes: int = 1000
    num_classes: int = 4
    p_in: float = 0.10
    p_out: float = 0.01
    feature_dim: int = 8
    class_separation: float = 4.0
    feature_noise: float = 1.0
    train_frac: float = 0.15
    val_frac: float = 0.15
    test_frac: float = 0.70
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be >= num_classes (one anchor axis per class)")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0.0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        if self.feature_noise < 0.0:
            raise ValueError("feature_noise must be nonnegative")


@dataclass(frozen=True)
class CsbmSample:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    masks: dict


def _split_counts(params: CsbmParams) -> tuple[int, int, int]:
    n = params.num_nodes
    n_train = int(round(n * params.train_frac))
    n_val = int(round(n * params.val_frac))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split fractions leave an empty split at this node count")
    return n_train, n_val, n_test


def gen_csbm(params: CsbmParams) -> CsbmSample:
    """Sample one CSBM instance (bit-identical for a fixed parameter record)."""
    params.validate()
    n, k = params.num_nodes, params.num_classes

    labels = rng.generator(params.seed, "csbm", "labels").integers(0, k, size=n)

    # each unordered pair linked independently; probability by label agreement
    edge_gen = rng.generator(params.seed, "csbm", "edges")
    chunks = []
    for i in range(n - 1):
        p = np.where(labels[i + 1 :] == labels[i], params.p_in, params.p_out)
        hits = np.where(edge_gen.random(n - 1 - i) < p)[0]
        if hits.size:
            chunks.append(np.column_stack([np.full(hits.size, i), hits + i + 1]))
    edges = np.concatenate(chunks, axis=0) if chunks else np.empty((0, 2), dtype=np.int64)
    graph = build_graph(edges, n)

    # class anchors on scaled one-hot axes; pairwise distance = class_separation
    anchors = np.eye(k, params.feature_dim) * (params.class_separation / np.sqrt(2.0))
    noise = rng.generator(params.seed, "csbm", "features").standard_normal((n, params.feature_dim))
    features = anchors[labels] + params.feature_noise * noise

    n_train, n_val, _ = _split_counts(params)
    perm = rng.generator(params.seed, "csbm", "masks").permutation(n)
    masks = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    features.setflags(write=False)
    labels.setflags(write=False)
    for m in masks.values():
        m.setflags(write=False)
    return CsbmSample(graph, features, labels, masks)
