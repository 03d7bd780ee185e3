"""Label-propagation denoising of coarse OOD candidates, plus manifold-mixup
synthesis of extra OOD training points.

The coarse detector is noisy. We spread the training one-hots and candidate
OOD marks over the graph with the row-stochastic walk matrix D^{-1} A,
resetting training rows to their initial values after every step, and keep
only the candidates whose propagated row still peaks on the OOD column.
Synthetic OOD points are then drawn on the segments between low-confidence
training nodes (boundary nodes) and the centroid of the surviving candidates
in hidden space: x = alpha * h_boundary + (1 - alpha) * h_center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import SparseMatrix, load_features, save_features, spmm


@dataclass(frozen=True)
class PropagationConfig:
    steps: int = 10

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.5
    boundary_count: int = 10
    synth_count: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.boundary_count < 1:
            raise ValueError("boundary_count must be >= 1")
        if self.synth_count < 1:
            raise ValueError("synth_count must be >= 1")


@dataclass(frozen=True)
class LabelMatrix:
    """N x (C+1) soft label matrix. Column C is the OOD column. Rows listed in
    clamp_ids are training nodes and must stay one-hot."""

    values: np.ndarray
    clamp_ids: frozenset
    class_count: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[1] != self.class_count + 1:
            raise ValueError("label matrix must be N x (class_count + 1)")
        if np.any(v < 0):
            raise ValueError("label matrix entries must be non-negative")
        for i in self.clamp_ids:
            if not (0 <= i < v.shape[0]):
                raise ValueError(f"clamped id {i} outside node range")
            row = v[i]
            if not (np.count_nonzero(row) == 1 and row.max() == 1.0):
                raise ValueError(f"clamped row {i} is not one-hot")

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]


def initial_label_matrix(num_nodes: int, class_count: int,
                         train_labels: dict[int, int],
                         ood_candidates) -> LabelMatrix:
    """One-hot ID rows for training nodes, OOD one-hots for coarse candidates,
    zero rows elsewhere."""
    if class_count < 1:
        raise ValueError("need at least one ID class")
    candidates = {int(i) for i in ood_candidates}
    overlap = candidates & set(train_labels)
    if overlap:
        raise ValueError(f"nodes both trained and OOD candidates: {sorted(overlap)}")
    values = np.zeros((num_nodes, class_count + 1), dtype=np.float64)
    for i, cls in train_labels.items():
        if not (0 <= i < num_nodes):
            raise ValueError(f"train node {i} outside node range")
        if not (0 <= cls < class_count):
            raise ValueError(f"train node {i} has class index {cls} outside [0, {class_count})")
        values[i, cls] = 1.0
    for i in candidates:
        if not (0 <= i < num_nodes):
            raise ValueError(f"candidate {i} outside node range")
        values[i, class_count] = 1.0
    return LabelMatrix(values, frozenset(train_labels), class_count)


def label_propagate(rw_adj: SparseMatrix, init: LabelMatrix,
                    cfg: PropagationConfig) -> np.ndarray:
    """Run cfg.steps rounds of Y <- D^{-1} A Y with clamping.

    After every multiplication the clamped rows are reset to their initial
    one-hots, and rows of isolated nodes (all-zero rows of the walk matrix)
    are reset to their initial values rather than decaying to zero.
    """
    n = init.num_nodes
    if rw_adj.rows != n or rw_adj.cols != n:
        raise ValueError("walk matrix shape does not match the label matrix")
    clamped = sorted(init.clamp_ids)
    isolated = rw_adj.zero_rows()
    y = init.values.copy()
    for _ in range(cfg.steps):
        y = spmm(rw_adj, y)
        if len(isolated):
            y[isolated] = init.values[isolated]
        if clamped:
            y[clamped] = init.values[clamped]
    return y


def denoise_ood(propagated: np.ndarray, candidate_ids) -> tuple[int, ...]:
    """Candidates whose propagated row still peaks on the OOD column (last).
    Ties keep the candidate."""
    survivors = []
    for i in sorted({int(i) for i in candidate_ids}):
        row = propagated[i]
        if row[-1] >= row.max():
            survivors.append(i)
    return tuple(survivors)


def select_boundary_nodes(confidence_by_node: dict[int, float], k: int) -> tuple[int, ...]:
    """The k lowest-confidence nodes; ties broken by ascending node id. Asking
    for more than exist returns them all."""
    if not confidence_by_node:
        raise ValueError("confidence map is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(confidence_by_node.items(), key=lambda kv: (kv[1], kv[0]))
    return tuple(i for i, _ in ranked[:k])


def ood_center(hidden: np.ndarray, ood_ids) -> np.ndarray:
    """Mean hidden vector of the given nodes."""
    ids = sorted({int(i) for i in ood_ids})
    if not ids:
        raise ValueError("cannot take the center of an empty set")
    for i in ids:
        if not (0 <= i < hidden.shape[0]):
            raise ValueError(f"node {i} outside hidden matrix")
    return hidden[ids].mean(axis=0)


def mix_row(h_boundary: np.ndarray, h_center: np.ndarray, alpha: float) -> np.ndarray:
    """The one mixing expression, shared by synthesis and by reconstruction
    checks so both produce bitwise identical rows."""
    return alpha * h_boundary + (1.0 - alpha) * h_center


@dataclass(frozen=True)
class SyntheticOODSet:
    """Mixup-generated OOD points in hidden space. Every row carries its
    provenance (source boundary node and alpha); downstream training treats
    each row as one extra sample of the OOD class."""

    embeddings: np.ndarray            # (synth_count, hidden_dim)
    boundary_ids: tuple[int, ...]     # per row
    alphas: tuple[float, ...]         # per row
    center: np.ndarray                # (hidden_dim,)
    seed: int

    def __post_init__(self):
        s = self.embeddings.shape[0]
        if len(self.boundary_ids) != s or len(self.alphas) != s:
            raise ValueError("provenance length must match embedding rows")
        if self.center.shape != (self.embeddings.shape[1],):
            raise ValueError("center dimension mismatch")

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]


def mixup_augment(hidden: np.ndarray, boundary_ids, h_center: np.ndarray,
                  cfg: MixupConfig) -> SyntheticOODSet:
    """Generate cfg.synth_count rows alpha * h_b + (1 - alpha) * h_center.

    Boundary nodes are shuffled once with cfg.seed and consumed cyclically, so
    every boundary node contributes before any repeats.
    """
    ids = [int(i) for i in boundary_ids]
    if not ids:
        raise ValueError("boundary node list is empty")
    for i in ids:
        if not (0 <= i < hidden.shape[0]):
            raise ValueError(f"boundary node {i} outside hidden matrix")
    if h_center.shape != (hidden.shape[1],):
        raise ValueError("center dimension mismatch")
    rng = np.random.default_rng(cfg.seed)
    order = [ids[k] for k in rng.permutation(len(ids))]
    rows = np.empty((cfg.synth_count, hidden.shape[1]), dtype=np.float64)
    sources = []
    for r in range(cfg.synth_count):
        b = order[r % len(order)]
        rows[r] = mix_row(hidden[b], h_center, cfg.alpha)
        sources.append(b)
    return SyntheticOODSet(
        embeddings=rows,
        boundary_ids=tuple(sources),
        alphas=tuple([cfg.alpha] * cfg.synth_count),
        center=h_center.astype(np.float64, copy=True),
        seed=cfg.seed,
    )


def reconstruct_rows(boundary_ids, alphas, center: np.ndarray,
                     hidden: np.ndarray) -> np.ndarray:
    """Rebuild mixup rows from provenance; bitwise equal to the originals."""
    rows = np.empty((len(boundary_ids), hidden.shape[1]), dtype=np.float64)
    for r, (b, a) in enumerate(zip(boundary_ids, alphas)):
        rows[r] = mix_row(hidden[int(b)], center, float(a))
    return rows


# --------------------------------------------------------------- persistence

def save_synthetic(s: SyntheticOODSet, matrix_path: str, sidecar_path: str) -> None:
    save_features(matrix_path, s.embeddings)
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "header", "seed": s.seed,
                             "center": list(s.center)}) + "\n")
        for r in range(s.count):
            fh.write(json.dumps({"kind": "row", "row": r,
                                 "boundary_id": s.boundary_ids[r],
                                 "alpha": s.alphas[r]}) + "\n")


def load_synthetic(matrix_path: str, sidecar_path: str) -> SyntheticOODSet:
    header = None
    rows: dict[int, tuple[int, float]] = {}
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "header":
                header = rec
            elif rec.get("kind") == "row":
                rows[int(rec["row"])] = (int(rec["boundary_id"]), float(rec["alpha"]))
    if header is None:
        raise ValueError(f"{sidecar_path}: missing header record")
    count = len(rows)
    if set(rows) != set(range(count)):
        raise ValueError(f"{sidecar_path}: row records are not 0..{count - 1}")
    emb = load_features(matrix_path, count)
    return SyntheticOODSet(
        embeddings=emb,
        boundary_ids=tuple(rows[r][0] for r in range(count)),
        alphas=tuple(rows[r][1] for r in range(count)),
        center=np.asarray(header["center"], dtype=np.float64),
        seed=int(header["seed"]),
    )
