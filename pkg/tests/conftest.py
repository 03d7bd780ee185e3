import json

import numpy as np
import pytest

from cfc.graph import Graph, canonical_edges


def random_graph(rng, n=None, p=0.2, n_classes=3, with_features=True,
                 unlabeled_frac=0.0, dim=4):
    """Random undirected graph with class labels, for oracle-style tests."""
    if n is None:
        n = int(rng.integers(2, 25))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((i, j))
    names = tuple(f"class {k}" for k in range(n_classes))
    labels = []
    for _ in range(n):
        if unlabeled_frac and rng.random() < unlabeled_frac:
            labels.append(None)
        else:
            labels.append(names[int(rng.integers(n_classes))])
    feats = rng.standard_normal((n, dim)) if with_features else None
    texts = tuple(f"node {i} text" for i in range(n))
    return Graph(
        num_nodes=n,
        edges=canonical_edges(edges),
        node_text=texts,
        labels=tuple(labels),
        class_names=names,
        features=feats,
    )


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
