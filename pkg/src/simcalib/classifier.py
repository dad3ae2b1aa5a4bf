"""Two-layer GCN node classifier.

The classifier exists to produce the frozen inputs the calibrators work
on: first-layer hidden features H and logits Z.  Training minimizes
cross-entropy on the train mask with Adam and (optionally) early-stops on
validation NLL.  After ``make_bundle`` the classifier parameters are
discarded; calibration only ever sees the bundle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import rng
from .graph import Graph, normalized_adjacency

__all__ = ["GcnConfig", "GcnParams", "NodeBundle", "gcn_forward", "make_bundle", "train_gcn"]


@dataclass(frozen=True)
class GcnConfig:
    hidden_dim: int = 16
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 30
    early_stop: bool = True
    seed: int = 0


@dataclass(frozen=True)
class GcnParams:
    w1: np.ndarray  # d x h
    w2: np.ndarray  # h x K

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class NodeBundle:
    """Frozen per-node data handed to the calibrators.

    ``hidden`` is the classifier's first-layer feature map; ``logits`` its
    output.  Masks are disjoint sorted index arrays.
    """

    features: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    labels: np.ndarray
    masks: dict

    @property
    def num_nodes(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


def _glorot(generator: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return generator.uniform(-limit, limit, size=(fan_in, fan_out))


def gcn_forward(params: GcnParams, features: np.ndarray, a_hat) -> tuple[np.ndarray, np.ndarray]:
    """H = relu(A (X W1)); Z = A (H W2)."""
    if features.shape[1] != params.w1.shape[0]:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match W1 rows {params.w1.shape[0]}"
        )
    hidden = np.maximum(a_hat @ (features @ params.w1), 0.0)
    logits = a_hat @ (hidden @ params.w2)
    return hidden, logits


def train_gcn(features, graph: Graph, labels, masks, config: GcnConfig, num_classes=None) -> GcnParams:
    """Train by Adam on train-mask cross-entropy; deterministic per seed."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train_idx = np.asarray(masks["train"], dtype=np.int64)
    val_idx = np.asarray(masks["val"], dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("train mask is empty")
    k = int(num_classes if num_classes is not None else labels.max() + 1)

    init_gen = rng.generator(config.seed, "gcn", "init")
    params = nm.ParamStore()
    params.add("w1", _glorot(init_gen, features.shape[1], config.hidden_dim))
    params.add("w2", _glorot(init_gen, config.hidden_dim, k))

    a_hat = normalized_adjacency(graph)
    ax = a_hat @ features  # A(X W1) == (A X) W1, so propagate features once

    def loss_fn(leaves):
        h = nm.relu(nm.matmul(nm.Tensor(ax, needs_grad=False, name="AX"), leaves["w1"]))
        z = nm.spmm(a_hat, nm.matmul(h, leaves["w2"]))
        probs = nm.softmax_rows(nm.gather_rows(z, train_idx))
        return nm.mean_nll(probs, labels[train_idx])

    def val_nll(p: nm.ParamStore) -> float:
        _, z = gcn_forward(GcnParams(p.value("w1"), p.value("w2")), features, a_hat)
        probs = nm.softmax_rows_np(z[val_idx])
        picked = np.maximum(probs[np.arange(val_idx.size), labels[val_idx]], 1e-12)
        return float(-np.log(picked).mean())

    state = nm.AdamState.for_params(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )
    best = params.snapshot()
    best_val = val_nll(params) if config.early_stop and val_idx.size else np.inf
    stale = 0
    for _ in range(config.max_epochs):
        nm.value_and_grad(loss_fn, params)
        nm.adam_step(params, state)
        if config.early_stop and val_idx.size:
            cur = val_nll(params)
            if cur < best_val - 1e-12:
                best_val = cur
                best = params.snapshot()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if config.early_stop and val_idx.size:
        params.restore(best)
    return GcnParams(params.value("w1").copy(), params.value("w2").copy())


def make_bundle(params: GcnParams, features, graph: Graph, labels, masks) -> NodeBundle:
    """Run the frozen classifier and package its outputs; parameters are not kept."""
    features = np.array(features, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    hidden, logits = gcn_forward(params, features, normalized_adjacency(graph))
    masks = {name: np.array(idx, dtype=np.int64) for name, idx in masks.items()}
    for arr in (features, hidden, logits, labels, *masks.values()):
        arr.setflags(write=False)
    return NodeBundle(features, hidden, logits, labels, masks)
