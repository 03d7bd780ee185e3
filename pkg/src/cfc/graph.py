"""Graph container, CSR sparse matrices, adjacency normalizations and data splits.

Functions:
    load_graph: read a node/edge JSONL pair (plus optional feature file) into a Graph
    save_graph: write a Graph back out in the same formats
    canonical_edges: dedupe and canonicalize an undirected edge list
    sym_normalize_adjacency: D^{-1/2} (A + I) D^{-1/2} with self loops
    rw_normalize_adjacency: D^{-1} A, no self loops, zero rows for isolated nodes
    spmm: sparse @ dense product
    split_dataset: stratified train / val / test assignment over labeled nodes
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE_MAGIC = b"CFCF"


@dataclass(frozen=True)
class SparseMatrix:
    """CSR matrix (float64). Column indices are strictly increasing inside each
    row and explicit zeros are never stored."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative matrix dimension")
        if self.indptr.shape != (self.rows + 1,):
            raise ValueError("indptr must have rows+1 entries")
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise ValueError("indptr endpoints inconsistent with indices")
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values length mismatch")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            seg = self.indices[self.indptr[r]:self.indptr[r + 1]]
            if len(seg) > 1 and np.any(np.diff(seg) <= 0):
                raise ValueError(f"row {r}: column indices not strictly increasing")
        if np.any(self.values == 0.0):
            raise ValueError("explicit zero stored in sparse matrix")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_entries(cls, rows: int, cols: int, entries) -> "SparseMatrix":
        """Build from an iterable of (i, j, value). Duplicate coordinates are an error."""
        by_row: dict[int, dict[int, float]] = {}
        for i, j, v in entries:
            row = by_row.setdefault(int(i), {})
            if int(j) in row:
                raise ValueError(f"duplicate entry at ({i}, {j})")
            if v != 0.0:
                row[int(j)] = float(v)
        indptr = np.zeros(rows + 1, dtype=np.int64)
        idx: list[int] = []
        val: list[float] = []
        for r in range(rows):
            cols_here = sorted(by_row.get(r, {}).items())
            idx.extend(c for c, _ in cols_here)
            val.extend(v for _, v in cols_here)
            indptr[r + 1] = len(idx)
        return cls(rows, cols, indptr,
                   np.asarray(idx, dtype=np.int64),
                   np.asarray(val, dtype=np.float64))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        entries = [(i, j, dense[i, j])
                   for i in range(dense.shape[0])
                   for j in range(dense.shape[1])
                   if dense[i, j] != 0.0]
        return cls.from_entries(dense.shape[0], dense.shape[1], entries)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=np.float64)
        for r in range(self.rows):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            out[r, self.indices[lo:hi]] = self.values[lo:hi]
        return out

    def zero_rows(self) -> np.ndarray:
        """Indices of rows with no stored entries."""
        return np.flatnonzero(np.diff(self.indptr) == 0)


def spmm(m: SparseMatrix, dense: np.ndarray) -> np.ndarray:
    """Sparse @ dense. dense must be 2-D with m.cols rows.

    Summation order inside a row follows the stored column order, so repeated
    calls on identical inputs are bitwise reproducible.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise ValueError("dense operand must be 2-D")
    if dense.shape[0] != m.cols:
        raise ValueError(f"shape mismatch: sparse is {m.rows}x{m.cols}, dense has {dense.shape[0]} rows")
    out = np.zeros((m.rows, dense.shape[1]), dtype=np.float64)
    if m.nnz == 0:
        return out
    row_of = np.repeat(np.arange(m.rows, dtype=np.int64), np.diff(m.indptr))
    np.add.at(out, row_of, m.values[:, None] * dense[m.indices])
    return out


def canonical_edges(edges) -> tuple[tuple[int, int], ...]:
    """Canonicalize an undirected edge list: (min, max) per edge, sorted, deduped.
    Self loops are rejected."""
    seen = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            raise ValueError(f"self loop on node {a}")
        seen.add((a, b) if a < b else (b, a))
    return tuple(sorted(seen))


@dataclass(frozen=True)
class Graph:
    """Undirected text-attributed graph. Immutable after construction.

    edges are canonical (src < dst, sorted, unique). features is an (N, d)
    float64 array or None when no feature source was supplied yet. labels may
    contain None for unlabeled nodes. class_names lists every distinct label.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    node_text: tuple[str, ...]
    labels: tuple[str | None, ...]
    class_names: tuple[str, ...]
    features: np.ndarray | None = None

    def __post_init__(self):
        n = self.num_nodes
        if n < 1:
            raise ValueError("graph must have at least one node")
        if len(self.node_text) != n or len(self.labels) != n:
            raise ValueError("node_text/labels length must equal num_nodes")
        prev = None
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a node outside [0, {n})")
            if a >= b:
                raise ValueError(f"edge ({a}, {b}) not canonical (need src < dst)")
            if prev is not None and (a, b) <= prev:
                raise ValueError("edges not sorted/unique")
            prev = (a, b)
        known = set(self.class_names)
        for i, lab in enumerate(self.labels):
            if lab is not None and lab not in known:
                raise ValueError(f"node {i} has label {lab!r} missing from class_names")
        if self.features is not None:
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ValueError("features must be (num_nodes, d)")
            if self.features.shape[1] < 1:
                raise ValueError("feature dimension must be >= 1")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self) -> list[list[int]]:
        """Sorted adjacency lists (no self loops)."""
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for lst in adj:
            lst.sort()
        return adj

    def nodes_of_class(self, name: str) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab == name]


def _read_jsonl(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc


def _load_features_binary(path: str, num_nodes: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
    n, d = struct.unpack("<II", blob[4:12])
    if n != num_nodes:
        raise ValueError(f"{path}: feature row count {n} != node count {num_nodes}")
    if d < 1:
        raise ValueError(f"{path}: feature dimension must be >= 1")
    expect = 12 + 8 * n * d
    if len(blob) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(blob)}")
    mat = np.frombuffer(blob, dtype="<f8", offset=12).reshape(n, d)
    return np.ascontiguousarray(mat, dtype=np.float64)


def _load_features_jsonl(path: str, num_nodes: int) -> np.ndarray:
    rows: dict[int, list[float]] = {}
    dim = None
    for lineno, rec in _read_jsonl(path):
        if not isinstance(rec, dict) or "id" not in rec or "vec" not in rec:
            raise ValueError(f"{path}:{lineno}: feature record needs id and vec")
        i = rec["id"]
        vec = rec["vec"]
        if not isinstance(i, int) or i in rows:
            raise ValueError(f"{path}:{lineno}: bad or duplicate feature id {i!r}")
        if dim is None:
            dim = len(vec)
        if len(vec) != dim or dim < 1:
            raise ValueError(f"{path}:{lineno}: inconsistent feature dimension")
        rows[i] = [float(x) for x in vec]
    if len(rows) != num_nodes:
        raise ValueError(f"{path}: found {len(rows)} feature rows for {num_nodes} nodes")
    if set(rows) != set(range(num_nodes)):
        raise ValueError(f"{path}: feature ids are not exactly 0..{num_nodes - 1}")
    return np.asarray([rows[i] for i in range(num_nodes)], dtype=np.float64)


def load_features(path: str, num_nodes: int) -> np.ndarray:
    """Load a feature matrix, binary (magic header) or JSONL {id, vec}."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return _load_features_binary(path, num_nodes)
    return _load_features_jsonl(path, num_nodes)


def save_features(path: str, mat: np.ndarray) -> None:
    """Write a feature matrix in the binary format load_features reads."""
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.astype("<f8").tobytes(order="C"))


def load_graph(nodes_path: str, edges_path: str, features_path: str | None = None) -> Graph:
    """Read node records {"id", "text", "label"} and edge records {"src", "dst"}.

    Node ids must be exactly 0..N-1. label may be null for unlabeled nodes.
    Duplicate undirected edges collapse to one; self loops are an error.
    """
    texts: dict[int, str] = {}
    labels: dict[int, str | None] = {}
    for lineno, rec in _read_jsonl(nodes_path):
        if not isinstance(rec, dict) or not {"id", "text", "label"} <= rec.keys():
            raise ValueError(f"{nodes_path}:{lineno}: node record needs id, text, label")
        i, text, lab = rec["id"], rec["text"], rec["label"]
        if not isinstance(i, int) or isinstance(i, bool):
            raise ValueError(f"{nodes_path}:{lineno}: id must be an integer")
        if i in texts:
            raise ValueError(f"{nodes_path}:{lineno}: duplicate node id {i}")
        if not isinstance(text, str):
            raise ValueError(f"{nodes_path}:{lineno}: text must be a string")
        if lab is not None and not isinstance(lab, str):
            raise ValueError(f"{nodes_path}:{lineno}: label must be a string or null")
        texts[i] = text
        labels[i] = lab
    n = len(texts)
    if n == 0:
        raise ValueError(f"{nodes_path}: no node records")
    if set(texts) != set(range(n)):
        raise ValueError(f"{nodes_path}: node ids are not contiguous 0..{n - 1}")

    raw_edges = []
    for lineno, rec in _read_jsonl(edges_path):
        if not isinstance(rec, dict) or not {"src", "dst"} <= rec.keys():
            raise ValueError(f"{edges_path}:{lineno}: edge record needs src and dst")
        a, b = rec["src"], rec["dst"]
        if not isinstance(a, int) or not isinstance(b, int):
            raise ValueError(f"{edges_path}:{lineno}: src/dst must be integers")
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"{edges_path}:{lineno}: edge ({a}, {b}) references unknown node")
        if a == b:
            raise ValueError(f"{edges_path}:{lineno}: self loop on node {a}")
        raw_edges.append((a, b))
    edges = canonical_edges(raw_edges)

    features = load_features(features_path, n) if features_path else None
    class_names = tuple(sorted({lab for lab in labels.values() if lab is not None}))
    return Graph(
        num_nodes=n,
        edges=edges,
        node_text=tuple(texts[i] for i in range(n)),
        labels=tuple(labels[i] for i in range(n)),
        class_names=class_names,
        features=features,
    )


def save_graph(g: Graph, nodes_path: str, edges_path: str,
               features_path: str | None = None) -> None:
    """Inverse of load_graph: load_graph(save_graph(g)) reproduces g."""
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for i in range(g.num_nodes):
            fh.write(json.dumps({"id": i, "text": g.node_text[i], "label": g.labels[i]},
                                ensure_ascii=False) + "\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for a, b in g.edges:
            fh.write(json.dumps({"src": a, "dst": b}) + "\n")
    if features_path is not None:
        if g.features is None:
            raise ValueError("graph has no features to save")
        save_features(features_path, g.features)


def sym_normalize_adjacency(g: Graph) -> SparseMatrix:
    """Symmetric GCN propagation matrix: self loops added, entry (i, j) equals
    1/sqrt((deg_i + 1) (deg_j + 1))."""
    adj = g.neighbors()
    dhat = np.array([len(a) + 1 for a in adj], dtype=np.float64)
    inv_sqrt = 1.0 / np.sqrt(dhat)
    entries = []
    for i, nbrs in enumerate(adj):
        for j in sorted(nbrs + [i]):
            entries.append((i, j, inv_sqrt[i] * inv_sqrt[j]))
    return SparseMatrix.from_entries(g.num_nodes, g.num_nodes, entries)


def rw_normalize_adjacency(g: Graph) -> SparseMatrix:
    """Row-stochastic propagation matrix D^{-1} A without self loops. Isolated
    nodes keep an empty row (their rows multiply to zero, callers reset them)."""
    adj = g.neighbors()
    entries = []
    for i, nbrs in enumerate(adj):
        if not nbrs:
            continue
        w = 1.0 / len(nbrs)
        for j in nbrs:
            entries.append((i, j, w))
    return SparseMatrix.from_entries(g.num_nodes, g.num_nodes, entries)


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test node id tuples plus the class partition that
    produced them. train draws only from id_classes; val and test share the
    leftover ID nodes and every OOD node."""

    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    id_classes: tuple[str, ...]
    ood_classes: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        a, b, c = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if a & b or a & c or b & c:
            raise ValueError("train/val/test sets overlap")
        if set(self.id_classes) & set(self.ood_classes):
            raise ValueError("id_classes and ood_classes overlap")

    def class_index(self) -> dict[str, int]:
        """ID class name -> model class index, in id_classes order."""
        return {name: k for k, name in enumerate(self.id_classes)}

    def to_dict(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
            "id_classes": list(self.id_classes),
            "ood_classes": list(self.ood_classes),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(
            train_ids=tuple(d["train_ids"]),
            val_ids=tuple(d["val_ids"]),
            test_ids=tuple(d["test_ids"]),
            id_classes=tuple(d["id_classes"]),
            ood_classes=tuple(d["ood_classes"]),
            seed=int(d.get("seed", 0)),
        )


def split_dataset(g: Graph, id_classes, ood_classes, seed: int,
                  train_frac: float = 0.5, val_frac: float = 0.4) -> SplitAssignment:
    """Stratified open-set split.

    Per ID class, floor(train_frac * count) nodes go to train. The leftover ID
    nodes and all OOD nodes form a pool that is split per class into
    floor(val_frac * count) validation nodes, remainder test. Unlabeled nodes
    join no set. Deterministic in (graph, seed).
    """
    id_classes = tuple(id_classes)
    ood_classes = tuple(ood_classes)
    if set(id_classes) & set(ood_classes):
        raise ValueError("id_classes and ood_classes overlap")
    if not id_classes:
        raise ValueError("need at least one ID class")
    if not (0.0 < train_frac < 1.0) or not (0.0 < val_frac < 1.0):
        raise ValueError("train_frac and val_frac must lie in (0, 1)")
    declared = set(id_classes) | set(ood_classes)
    observed = {lab for lab in g.labels if lab is not None}
    stray = observed - declared
    if stray:
        raise ValueError(f"labels not covered by id/ood classes: {sorted(stray)}")

    rng = np.random.default_rng(seed)
    train: list[int] = []
    pool_by_class: dict[str, list[int]] = {}

    for name in sorted(id_classes):
        members = g.nodes_of_class(name)
        if len(members) < 2:
            raise ValueError(f"ID class {name!r} has {len(members)} nodes, need >= 2 to stratify")
        perm = rng.permutation(len(members))
        n_train = int(train_frac * len(members))
        n_train = max(1, n_train)
        picked = [members[k] for k in perm]
        train.extend(picked[:n_train])
        pool_by_class[name] = picked[n_train:]
    for name in sorted(ood_classes):
        members = g.nodes_of_class(name)
        if members:
            perm = rng.permutation(len(members))
            pool_by_class[name] = [members[k] for k in perm]

    val: list[int] = []
    test: list[int] = []
    for name in sorted(pool_by_class):
        pool = pool_by_class[name]
        n_val = int(val_frac * len(pool))
        val.extend(pool[:n_val])
        test.extend(pool[n_val:])

    return SplitAssignment(
        train_ids=tuple(sorted(train)),
        val_ids=tuple(sorted(val)),
        test_ids=tuple(sorted(test)),
        id_classes=id_classes,
        ood_classes=ood_classes,
        seed=seed,
    )
