"""Undirected graph storage (CSR) and the structural node statistics used
by the calibrators: degrees, hop distance to the training set, node
homophily, mean relative degree, and the normalized adjacency operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Graph",
    "StructuralProfile",
    "build_graph",
    "hop_distance_to_set",
    "mean_relative_degree",
    "node_homophily",
    "normalized_adjacency",
    "read_edge_list",
    "structural_profile",
    "write_edge_list",
]


@dataclass(frozen=True)
class Graph:
    """Immutable undirected graph in CSR form.

    Neighbor lists are sorted, deduplicated, self-loop free, and symmetric
    (j in N(i) iff i in N(j)).
    """

    num_nodes: int
    offsets: np.ndarray
    neighbors: np.ndarray

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neighbors[self.offsets[i] : self.offsets[i + 1]]

    @property
    def num_edges(self) -> int:
        return self.neighbors.size // 2

    def edge_array(self) -> np.ndarray:
        """Each undirected edge once as a (m, 2) array with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        mask = rows < self.neighbors
        return np.column_stack([rows[mask], self.neighbors[mask]])


def build_graph(edges, num_nodes: int) -> Graph:
    """Build a symmetric, deduplicated, self-loop-free CSR graph.

    ``edges`` may contain duplicates, self-loops, or only one direction of
    an edge; all are normalized away.  Out-of-range endpoints raise with
    the offending pair.
    """
    if num_nodes < 0:
        raise ValueError("num_nodes must be nonnegative")
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("edges must be pairs of node ids")
    bad = np.where((arr < 0) | (arr >= num_nodes))[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"edge {i}: endpoint out of range: {tuple(arr[i])}")
    arr = arr[arr[:, 0] != arr[:, 1]]
    both = np.concatenate([arr, arr[:, ::-1]], axis=0)
    if both.size:
        both = np.unique(both, axis=0)
    src, dst = both[:, 0], both[:, 1]
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    np.cumsum(offsets, out=offsets)
    neighbors = np.ascontiguousarray(dst)  # unique() already sorted per row
    neighbors.setflags(write=False)
    offsets.setflags(write=False)
    return Graph(num_nodes, offsets, neighbors)


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetrically normalized adjacency with self-loops.

    Entry (i, j) is 1/sqrt((d_i+1)(d_j+1)) for j in N(i) or j = i, the
    standard propagation operator for graph convolutions.
    """
    deg = g.degrees().astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
    rows = np.concatenate([np.repeat(np.arange(g.num_nodes), g.degrees()), np.arange(g.num_nodes)])
    cols = np.concatenate([g.neighbors, np.arange(g.num_nodes)])
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(g.num_nodes, g.num_nodes))
    return mat.tocsr()


def hop_distance_to_set(g: Graph, sources) -> np.ndarray:
    """1 + BFS hop count to the nearest source node, per node.

    Sources themselves get 1.  Unreachable nodes get the finite sentinel
    1 + num_nodes so downstream arithmetic stays total.
    """
    sources = np.asarray(sources, dtype=np.int64)
    if sources.size == 0:
        raise ValueError("source set must be nonempty")
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    frontier = np.unique(sources)
    dist[frontier] = 0
    level = 0
    while frontier.size:
        level += 1
        nxt = []
        for u in frontier:
            nxt.append(g.neighbors_of(u))
        cand = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, dtype=np.int64)
        cand = cand[dist[cand] < 0]
        dist[cand] = level
        frontier = cand
    eta = np.where(dist < 0, g.num_nodes, dist) + 1
    return eta.astype(np.int64)


def node_homophily(g: Graph, labels) -> np.ndarray:
    """Fraction of each node's neighbors sharing its label (0 if isolated)."""
    labels = np.asarray(labels)
    deg = g.degrees()
    rows = np.repeat(np.arange(g.num_nodes), deg)
    same = (labels[rows] == labels[g.neighbors]).astype(np.float64)
    agree = np.bincount(rows, weights=same, minlength=g.num_nodes)
    out = np.zeros(g.num_nodes)
    nz = deg > 0
    out[nz] = agree[nz] / deg[nz]
    return out


def mean_relative_degree(g: Graph) -> np.ndarray:
    """Mean over neighbors of sqrt((d_i+1)/(d_j+1)) (1 if isolated)."""
    deg = g.degrees().astype(np.float64)
    rows = np.repeat(np.arange(g.num_nodes), g.degrees())
    ratio = np.sqrt((deg[rows] + 1.0) / (deg[g.neighbors] + 1.0))
    total = np.bincount(rows, weights=ratio, minlength=g.num_nodes)
    out = np.ones(g.num_nodes)
    nz = deg > 0
    out[nz] = total[nz] / deg[nz]
    return out


@dataclass(frozen=True)
class StructuralProfile:
    """Per-node structural quantities consumed by the movement branch."""

    degrees: np.ndarray
    eta: np.ndarray
    homophily: np.ndarray
    mean_rel_degree: np.ndarray


def structural_profile(g: Graph, labels, train_nodes) -> StructuralProfile:
    return StructuralProfile(
        degrees=g.degrees(),
        eta=hop_distance_to_set(g, train_nodes),
        homophily=node_homophily(g, labels),
        mean_rel_degree=mean_relative_degree(g),
    )


def read_edge_list(path) -> list[tuple[int, int]]:
    """Parse a `u v` per line edge file; `#` lines are comments."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected `u v`, got {text!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-integer endpoint in {text!r}") from exc
            edges.append((u, v))
    return edges


def write_edge_list(path, g: Graph) -> None:
    with open(path, "w") as fh:
        for u, v in g.edge_array():
            fh.write(f"{u} {v}\n")
