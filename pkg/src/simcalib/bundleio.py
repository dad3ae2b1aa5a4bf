"""On-disk bundle formats.

A bundle directory holds:

* ``graph.txt``     - edge list, one ``u v`` pair per line, `#` comments
* ``features.csv``  - N rows, comma-separated, no header, 9 significant digits
* ``hidden.csv``    - classifier first-layer features (after pretrain)
* ``logits.csv``    - classifier logits (after pretrain)
* ``labels.txt``    - one integer per line
* ``masks.json``    - {"train": [...], "val": [...], "test": [...]}
* ``meta.json``     - N, K, d, h, classifier accuracy/calibration numbers
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .classifier import NodeBundle
from .graph import Graph, build_graph, read_edge_list, write_edge_list

__all__ = [
    "load_bundle",
    "load_graph_and_inputs",
    "read_labels",
    "read_masks",
    "read_matrix_csv",
    "read_meta",
    "save_inputs",
    "save_pretrain_outputs",
    "write_labels",
    "write_masks",
    "write_matrix_csv",
    "write_meta",
]

FLOAT_FORMAT = "{:.9g}"


def write_matrix_csv(path, matrix) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(FLOAT_FORMAT.format(x) for x in row))
            fh.write("\n")


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split(",")])
    return np.asarray(rows, dtype=np.float64)


def write_labels(path, labels) -> None:
    with open(path, "w") as fh:
        for y in np.asarray(labels, dtype=np.int64):
            fh.write(f"{y}\n")


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


def write_masks(path, masks: dict) -> None:
    payload = {name: [int(i) for i in idx] for name, idx in masks.items()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_masks(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    return {name: np.asarray(idx, dtype=np.int64) for name, idx in payload.items()}


def write_meta(path, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_meta(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _require(directory: Path, names) -> list[Path]:
    paths = [directory / name for name in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError("missing bundle files: " + ", ".join(missing))
    return paths


def load_graph_and_inputs(directory) -> tuple[Graph, np.ndarray, np.ndarray, dict, dict]:
    """Read the pre-training half of a bundle (graph, X, y, masks, meta)."""
    directory = Path(directory)
    _require(directory, ["graph.txt", "features.csv", "labels.txt", "masks.json", "meta.json"])
    meta = read_meta(directory / "meta.json")
    graph = build_graph(read_edge_list(directory / "graph.txt"), meta["num_nodes"])
    features = read_matrix_csv(directory / "features.csv")
    labels = read_labels(directory / "labels.txt")
    masks = read_masks(directory / "masks.json")
    return graph, features, labels, masks, meta


def load_bundle(directory) -> tuple[Graph, NodeBundle, dict]:
    """Read a complete bundle (graph plus frozen classifier outputs)."""
    directory = Path(directory)
    graph, features, labels, masks, meta = load_graph_and_inputs(directory)
    _require(directory, ["hidden.csv", "logits.csv"])
    hidden = read_matrix_csv(directory / "hidden.csv")
    logits = read_matrix_csv(directory / "logits.csv")
    for arr in (features, hidden, logits, labels, *masks.values()):
        arr.setflags(write=False)
    return graph, NodeBundle(features, hidden, logits, labels, masks), meta


def save_inputs(directory, graph: Graph, features, labels, masks, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_edge_list(directory / "graph.txt", graph)
    write_matrix_csv(directory / "features.csv", features)
    write_labels(directory / "labels.txt", labels)
    write_masks(directory / "masks.json", masks)
    write_meta(directory / "meta.json", meta)


def save_pretrain_outputs(directory, hidden, logits, meta: dict) -> None:
    directory = Path(directory)
    write_matrix_csv(directory / "hidden.csv", hidden)
    write_matrix_csv(directory / "logits.csv", logits)
    write_meta(directory / "meta.json", meta)
