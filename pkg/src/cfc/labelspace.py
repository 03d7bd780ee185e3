"""Post-processing of the open label space.

The coarse detector logs a free-form suggested category per rejected node.
Those raw names are deduplicated here: TF-IDF vectors over the category names,
union-find over pairs whose cosine similarity clears a threshold, one label
per group (the most frequent member), and rare groups dropped entirely. The
surviving labels form the space an LLM then classifies each detected OOD node
into; answers that fall outside the space snap to the nearest label by the
same similarity, so every node ends up classified.

cluster_accuracy scores such assignments against ground truth under the best
injective mapping from predicted labels to true classes.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .coarse import (
    ParseError,
    _first_object,
    _parse_confidence,
    load_template,
    normalize_category,
    render_label_list,
    truncate_text,
    _render,
    DEFAULT_TEXT_BUDGET,
)
from .gateway import GatewayError, LLMGateway

DISCARDED = "DISCARDED"


class OODClassifyError(RuntimeError):
    """Classification aborted partway; .partial holds finished assignments."""

    def __init__(self, message: str, partial: "tuple[OODAssignment, ...]" = ()):
        super().__init__(message)
        self.partial = partial


def tokenize(name: str) -> list[str]:
    """Lowercase word tokens; any non-alphanumeric run separates."""
    return [t for t in re.split(r"[^a-z0-9]+", name.lower()) if t]


def tfidf_vectors(names) -> np.ndarray:
    """TF-IDF rows over the given name corpus.

    Vocabulary is the sorted token set, tf is the raw in-name count, and
    idf = ln((1 + n) / (1 + df)) + 1. Rows are L2-normalized; a name with no
    tokens keeps a zero row.
    """
    names = list(names)
    if not names:
        raise ValueError("empty name corpus")
    docs = [tokenize(n) for n in names]
    vocab = sorted({t for d in docs for t in d})
    col = {t: j for j, t in enumerate(vocab)}
    n = len(names)
    df = np.zeros(len(vocab))
    for d in docs:
        for t in set(d):
            df[col[t]] += 1
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    mat = np.zeros((n, len(vocab)))
    for i, d in enumerate(docs):
        for t in d:
            mat[i, col[t]] += 1.0
    mat *= idf[None, :]
    norms = np.linalg.norm(mat, axis=1)
    nz = norms > 0
    mat[nz] /= norms[nz, None]
    return mat


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero whenever either vector is zero."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


@dataclass(frozen=True)
class PostLabelSpace:
    """Deduplicated OOD label space. raw_to_merged maps every input category
    to its surviving label or to DISCARDED; merged_labels is ordered by
    descending total count (ties alphabetical)."""

    merged_labels: tuple[str, ...]
    raw_to_merged: dict
    counts: dict                       # merged label -> summed raw count
    sim_threshold: float
    min_count: int

    def __post_init__(self):
        if not self.merged_labels:
            raise ValueError("post label space is empty")
        targets = set(self.merged_labels) | {DISCARDED}
        for raw, merged in self.raw_to_merged.items():
            if merged not in targets:
                raise ValueError(f"{raw!r} maps to unknown label {merged!r}")

    def to_dict(self) -> dict:
        return {
            "merged_labels": list(self.merged_labels),
            "raw_to_merged": dict(self.raw_to_merged),
            "counts": dict(self.counts),
            "sim_threshold": self.sim_threshold,
            "min_count": self.min_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PostLabelSpace":
        return cls(
            merged_labels=tuple(d["merged_labels"]),
            raw_to_merged=dict(d["raw_to_merged"]),
            counts=dict(d["counts"]),
            sim_threshold=float(d["sim_threshold"]),
            min_count=int(d["min_count"]),
        )


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def merge_categories(category_counts: dict, sim_threshold: float = 0.5,
                     min_count: int | None = None) -> PostLabelSpace:
    """Collapse similar raw categories into one label space.

    Names are processed in sorted order, so the outcome is independent of the
    input dict's iteration order. Any pair at or above sim_threshold lands in
    the same group (transitively). Each group is labeled by its most frequent
    member, ties broken alphabetically; groups whose summed count stays below
    min_count are discarded. min_count defaults to max(2, ceil(1% of the
    total logged count)).
    """
    if not category_counts:
        raise ValueError("no categories to merge")
    if not (0.0 <= sim_threshold <= 1.0):
        raise ValueError("sim_threshold must lie in [0, 1]")
    for name, cnt in category_counts.items():
        if cnt < 1:
            raise ValueError(f"category {name!r} has non-positive count")
    total = sum(category_counts.values())
    if min_count is None:
        min_count = max(2, int(np.ceil(0.01 * total)))
    if min_count < 1:
        raise ValueError("min_count must be >= 1")

    names = sorted(category_counts)
    vecs = tfidf_vectors(names)
    uf = _UnionFind(len(names))
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            if cosine(vecs[i], vecs[j]) >= sim_threshold:
                uf.union(i, j)

    groups: dict[int, list[str]] = {}
    for i, name in enumerate(names):
        groups.setdefault(uf.find(i), []).append(name)

    raw_to_merged: dict[str, str] = {}
    counts: dict[str, int] = {}
    for members in groups.values():
        group_total = sum(category_counts[m] for m in members)
        label = sorted(members, key=lambda m: (-category_counts[m], m))[0]
        target = label if group_total >= min_count else DISCARDED
        for m in members:
            raw_to_merged[m] = target
        if target != DISCARDED:
            counts[label] = group_total

    if not counts:
        raise ValueError(f"every category group fell below min_count={min_count}")
    merged = tuple(sorted(counts, key=lambda l: (-counts[l], l)))
    return PostLabelSpace(
        merged_labels=merged,
        raw_to_merged=raw_to_merged,
        counts=counts,
        sim_threshold=sim_threshold,
        min_count=min_count,
    )


# --------------------------------------------------------------- classification

@dataclass(frozen=True)
class OODAssignment:
    node_id: int
    label: str                  # one of the merged labels
    confidence: float
    raw_response: str

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "label": self.label,
            "confidence": self.confidence,
            "raw_response": self.raw_response,
        }


def build_ood_classification_prompt(node_text: str, post: PostLabelSpace,
                                    text_budget: int = DEFAULT_TEXT_BUDGET,
                                    template_dir: str | None = None) -> str:
    if not node_text.strip():
        raise ValueError("node text is empty")
    return _render(load_template("ood_classification", template_dir), {
        "TEXT": truncate_text(node_text, text_budget),
        "MERGED_LABELS": render_label_list(post.merged_labels),
    })


def parse_classification_response(raw: str) -> tuple[str, float]:
    obj = _first_object(raw)
    if "answer" not in obj:
        raise ParseError("classification reply has no answer field")
    answer = normalize_category(str(obj["answer"]))
    if not answer:
        raise ParseError("classification answer is empty")
    return answer, _parse_confidence(obj.get("confidence"))


def match_label(answer: str, post: PostLabelSpace) -> str:
    """Resolve a free-form answer to a merged label.

    Token-sequence equality first (so punctuation and case differences match),
    then nearest label by TF-IDF cosine; ties and token-less answers fall to
    the first label in merged order.
    """
    answer_tokens = tokenize(answer)
    for label in post.merged_labels:
        if tokenize(label) == answer_tokens:
            return label
    corpus = list(post.merged_labels) + [answer]
    vecs = tfidf_vectors(corpus)
    sims = [cosine(vecs[-1], vecs[k]) for k in range(len(post.merged_labels))]
    return post.merged_labels[int(np.argmax(sims))]


def _classify_single(gateway: LLMGateway, prompt: str, post: PostLabelSpace,
                     retries: int):
    raw = ""
    for _ in range(retries + 1):
        raw = gateway.complete(prompt).response_text
        try:
            answer, conf = parse_classification_response(raw)
        except ParseError:
            continue
        return match_label(answer, post), conf, raw
    return post.merged_labels[0], 0.0, raw


def classify_ood(node_ids, g, post: PostLabelSpace, gateway: LLMGateway,
                 text_budget: int = DEFAULT_TEXT_BUDGET,
                 template_dir: str | None = None,
                 max_parse_retries: int = 2) -> tuple[OODAssignment, ...]:
    """Ask the LLM for a label in the merged space for every given node.

    Off-space answers snap to the nearest merged label; a reply that never
    parses falls back to the first merged label with confidence 0, so every
    node receives an assignment. Gateway failure raises OODClassifyError
    carrying whatever finished.
    """
    ids = sorted({int(i) for i in node_ids})
    if not ids:
        raise ValueError("node_ids is empty")
    for i in ids:
        if not (0 <= i < g.num_nodes):
            raise ValueError(f"node id {i} outside node range")

    prompts = {i: build_ood_classification_prompt(g.node_text[i], post,
                                                  text_budget, template_dir)
               for i in ids}
    results: dict[int, OODAssignment] = {}
    failures: list[tuple[int, Exception]] = []
    with ThreadPoolExecutor(max_workers=gateway.cfg.max_concurrent) as pool:
        futures = {i: pool.submit(_classify_single, gateway, prompts[i], post,
                                  max_parse_retries) for i in ids}
        for i in ids:
            try:
                label, conf, raw = futures[i].result()
            except GatewayError as exc:
                failures.append((i, exc))
                continue
            results[i] = OODAssignment(i, label, conf, raw)

    done = tuple(results[i] for i in sorted(results))
    if failures:
        node, exc = failures[0]
        raise OODClassifyError(
            f"gateway failed on node {node}: {exc} "
            f"({len(done)}/{len(ids)} nodes finished)", partial=done)
    return done


# --------------------------------------------------------------- evaluation

def cluster_accuracy(assignments, true_labels: dict) -> float:
    """Accuracy under the best injective map from predicted to true labels.

    assignments is a sequence of OODAssignment (or (node_id, label) pairs);
    true_labels maps node id to its true class name. The optimal assignment
    over the predicted x true contingency table is solved exactly.
    """
    pairs = []
    for a in assignments:
        node, label = (a.node_id, a.label) if isinstance(a, OODAssignment) else a
        pairs.append((int(node), label))
    if not pairs:
        raise ValueError("no assignments to score")
    for node, _ in pairs:
        if node not in true_labels:
            raise ValueError(f"node {node} has no true label")
    pred_names = sorted({label for _, label in pairs})
    true_names = sorted({true_labels[node] for node, _ in pairs})
    table = np.zeros((len(pred_names), len(true_names)), dtype=np.int64)
    pi = {p: k for k, p in enumerate(pred_names)}
    ti = {t: k for k, t in enumerate(true_names)}
    for node, label in pairs:
        table[pi[label], ti[true_labels[node]]] += 1
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / len(pairs))


# --------------------------------------------------------------- persistence

def save_post_label_space(post: PostLabelSpace, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(post.to_dict(), fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def load_post_label_space(path: str) -> PostLabelSpace:
    with open(path, "r", encoding="utf-8") as fh:
        return PostLabelSpace.from_dict(json.load(fh))


def save_assignments(assignments, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in assignments:
            fh.write(json.dumps(a.to_dict(), ensure_ascii=False) + "\n")


def load_assignments(path: str) -> tuple[OODAssignment, ...]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                out.append(OODAssignment(rec["node_id"], rec["label"],
                                         rec["confidence"], rec["raw_response"]))
    return tuple(out)
