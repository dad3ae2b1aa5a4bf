"""Shared fixtures: random bundles, the miscalibrated end-to-end subject."""

import numpy as np
import pytest

from simcalib.classifier import GcnConfig, NodeBundle, make_bundle, train_gcn
from simcalib.datagen import CsbmParams, gen_csbm
from simcalib.graph import build_graph

# the end-to-end subject: easy task + strong weight decay drives the
# overtrained classifier to an underconfident equilibrium, which is the
# miscalibration mode nodewise calibrators are built for
E2E_CSBM = dict(num_nodes=1000, class_separation=2.0, p_in=0.05, p_out=0.01)
E2E_GCN = dict(early_stop=False, max_epochs=2000, weight_decay=1.0)


def random_graph(gen: np.random.Generator, n: int, avg_degree: float = 4.0):
    num_edges = int(n * avg_degree / 2)
    edges = gen.integers(0, n, size=(num_edges, 2))
    return build_graph(edges[edges[:, 0] != edges[:, 1]], n)


def random_bundle(seed: int, n: int = 30, k: int = 4, h: int = 8) -> tuple:
    """Random graph + gaussian hidden/logits; masks split ~30/30/40."""
    gen = np.random.default_rng(seed)
    graph = random_graph(gen, n)
    perm = gen.permutation(n)
    n_tr = max(2, int(0.3 * n))
    n_val = max(2, int(0.3 * n))
    masks = {
        "train": np.sort(perm[:n_tr]),
        "val": np.sort(perm[n_tr : n_tr + n_val]),
        "test": np.sort(perm[n_tr + n_val :]),
    }
    labels = np.concatenate([np.arange(k), gen.integers(0, k, size=n - k)])
    gen.shuffle(labels)
    # make sure every class appears in train and val (prototype fitting)
    for mask_name in ("train", "val"):
        idx = masks[mask_name]
        labels[idx[:k]] = np.arange(k)
    hidden = gen.standard_normal((n, h))
    logits = 2.0 * gen.standard_normal((n, k))
    features = gen.standard_normal((n, h))
    bundle = NodeBundle(features, hidden, logits, labels.astype(np.int64), masks)
    return graph, bundle


def overtrained_subject(seed: int, num_nodes: int = 1000):
    """CSBM + overtrained (underconfident) classifier, frozen into a bundle.

    Edge probabilities are rescaled with node count so expected degrees
    (and with them the subject's calibration profile) match the 1000-node
    reference at any size.
    """
    scale = E2E_CSBM["num_nodes"] / num_nodes
    params = CsbmParams(
        seed=seed,
        **{
            **E2E_CSBM,
            "num_nodes": num_nodes,
            "p_in": min(E2E_CSBM["p_in"] * scale, 1.0),
            "p_out": min(E2E_CSBM["p_out"] * scale, 1.0),
        },
    )
    sample = gen_csbm(params)
    gcn = train_gcn(
        sample.features,
        sample.graph,
        sample.labels,
        sample.masks,
        GcnConfig(seed=seed, **E2E_GCN),
    )
    bundle = make_bundle(gcn, sample.features, sample.graph, sample.labels, sample.masks)
    return sample.graph, bundle


@pytest.fixture(scope="session")
def small_subject():
    """One 400-node miscalibrated subject shared by cheaper tests."""
    return overtrained_subject(seed=11, num_nodes=400)
