"""Staged, resumable orchestration of the full open-set pipeline.

A run is nine stages over one artifacts directory:

    ingest        load the graph, draw the train/val/test split
    coarse        LLM screening of test nodes for OOD suspects
    denoise       label propagation prunes false OOD candidates
    train-prelim  closed-set GCN on the ID training nodes
    augment       mixup synthesis of OOD rows in hidden space
    train-fine    (C+1)-class GCN with the synthetic OOD samples
    detect        fine-model predictions + OOD scores on test nodes
    classify-ood  merge logged categories, LLM-label the detected set
    eval          reports for the pipeline and threshold baselines

Each stage records a hash of everything it read (scoped config, dataset
bytes, upstream artifacts) in manifest.json and is skipped when that hash
matches and its outputs still exist, so LLM-backed stages never recompute
by accident. Config validation is strict: unknown keys are rejected and the
fully-defaulted config is echoed to resolved.json.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .coarse import CoarseConfig, CoarseDetectError, coarse_detect, \
    load_coarse_result, save_coarse_result
from .denoise import MixupConfig, PropagationConfig, denoise_ood, \
    initial_label_matrix, label_propagate, load_synthetic, mixup_augment, \
    ood_center, save_synthetic, select_boundary_nodes
from .gateway import BASE_URL_ENV, GatewayConfig, LLMGateway
from .gcn import TrainConfig, TrainingDiverged, hidden_states, \
    load_checkpoint, predict, save_checkpoint, train
from .graph import Graph, load_graph, rw_normalize_adjacency, \
    split_dataset, sym_normalize_adjacency, SplitAssignment
from .labelspace import OODClassifyError, classify_ood, cluster_accuracy, \
    load_assignments, merge_categories, save_assignments, \
    save_post_label_space
from .metrics import accuracy_report, auroc, threshold_baseline, \
    tune_threshold

SPLIT_FILE = "split.json"
COARSE_FILE = "coarse.jsonl"
COARSE_LOG_FILE = "coarse_exchanges.jsonl"
COARSE_PARTIAL_FILE = "coarse.partial.jsonl"
DENOISED_FILE = "denoised.jsonl"
SYNTH_BIN_FILE = "synth.bin"
SYNTH_META_FILE = "synth.jsonl"
PRELIM_CKPT = "prelim.ckpt"
FINE_CKPT = "fine.ckpt"
DETECT_FILE = "detect.jsonl"
POST_LABELS_FILE = "post_labels.json"
ASSIGN_FILE = "ood_assignments.jsonl"
ASSIGN_PARTIAL_FILE = "ood_assignments.partial.jsonl"
CLASSIFY_LOG_FILE = "classify_exchanges.jsonl"
EVAL_FILE = "eval.json"
MANIFEST_FILE = "manifest.json"
RESOLVED_FILE = "resolved.json"
LOCK_FILE = ".lock"

SIGMOID_FIXED_TAU = 0.5

METHOD_ORDER = ("CFC", "GCN_softmax", "GCN_softmax_tau",
                "GCN_sigmoid", "GCN_sigmoid_tau")


class ConfigError(ValueError):
    """Bad config, bad dataset, or a stage invoked out of order."""


class StageError(RuntimeError):
    """A stage failed while executing."""


# ------------------------------------------------------------------ config

_REQUIRED = object()

_SCHEMA = {
    "seed": ("int", _REQUIRED),
    "artifacts_dir": ("str", "artifacts"),
    "dataset": {
        "nodes": ("str", _REQUIRED),
        "edges": ("str", _REQUIRED),
        "features": ("str", _REQUIRED),
    },
    "split": {
        "id_classes": ("list[str]", _REQUIRED),
        "ood_classes": ("list[str]", _REQUIRED),
        "train_frac": ("number", 0.5),
        "val_frac": ("number", 0.4),
    },
    "coarse": {
        "mode": ("str", "easy_reject"),
        "confidence_threshold": ("number", 0.7),
        "candidate_count": ("int", 10),
        "max_parse_retries": ("int", 2),
        "node_budget": ("int|null", None),
        "text_budget": ("int", 4000),
        "template_dir": ("str|null", None),
    },
    "propagation": {
        "steps": ("int", 10),
    },
    "mixup": {
        "alpha": ("number", 0.5),
        "boundary_count": ("int", 10),
        "synth_count": ("int", 100),
    },
    "train": {
        "learning_rate": ("number", 0.01),
        "weight_decay": ("number", 5e-4),
        "epochs": ("int", 200),
        "hidden_dim": ("int", 64),
        "early_stop_patience": ("int", 30),
    },
    "merge": {
        "sim_threshold": ("number", 0.5),
        "min_count": ("int|null", None),
    },
    "gateway": {
        "mode": ("str", "mock"),
        "base_url": ("str", ""),
        "model_name": ("str", "mock-model"),
        "temperature": ("number", 0.0),
        "max_retries": ("int", 3),
        "request_timeout": ("number", 30.0),
        "max_concurrent": ("int", 4),
        "mock_fixture_path": ("str|null", None),
        "embed_dim": ("int", 64),
    },
}


def _check_kind(value, kind: str, path: str):
    def fail(expected):
        raise ConfigError(f"{path}: expected {expected}, got {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        return value
    if kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail("a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            fail("a string")
        return value
    if kind == "list[str]":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            fail("a list of strings")
        return list(value)
    if kind == "int|null":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer or null")
        return value
    if kind == "str|null":
        if value is None or isinstance(value, str):
            return value
        fail("a string or null")
    raise AssertionError(f"unhandled schema kind {kind}")


def _validate_block(raw: dict, schema: dict, prefix: str) -> dict:
    for key in raw:
        if key not in schema:
            dotted = f"{prefix}{key}"
            raise ConfigError(f"unknown config key {dotted!r}")
    out = {}
    for key, spec in schema.items():
        dotted = f"{prefix}{key}"
        if isinstance(spec, dict):
            sub = raw.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{dotted}: expected an object")
            out[key] = _validate_block(sub, spec, dotted + ".")
            continue
        kind, default = spec
        if key not in raw:
            if default is _REQUIRED:
                raise ConfigError(f"missing required config key {dotted!r}")
            out[key] = default
        else:
            out[key] = _check_kind(raw[key], kind, dotted)
    return out


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run: resolved paths, constructed sub-configs, and
    the resolved plain dict that stage input hashing draws from."""

    seed: int
    nodes_path: str
    edges_path: str
    features_path: str
    id_classes: tuple[str, ...]
    ood_classes: tuple[str, ...]
    train_frac: float
    val_frac: float
    coarse_cfg: CoarseConfig
    prop_cfg: PropagationConfig
    mixup_cfg: MixupConfig
    train_cfg: TrainConfig
    merge_sim_threshold: float
    merge_min_count: int | None
    gateway_cfg: GatewayConfig
    artifacts_dir: str
    resolved: dict

    def artifact(self, name: str) -> str:
        return os.path.join(self.artifacts_dir, name)


def _resolve_path(value: str, base_dir: str) -> str:
    return value if os.path.isabs(value) else os.path.normpath(
        os.path.join(base_dir, value))


def validate_config(path: str, artifacts_override: str | None = None) -> RunConfig:
    """Load, schema-check, and default-fill a JSON run config.

    Relative paths are taken relative to the config file. The resolved
    config (every default made explicit, paths absolute) is echoed to
    <artifacts_dir>/resolved.json.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    resolved = _validate_block(raw, _SCHEMA, "")
    base_dir = os.path.dirname(os.path.abspath(path))

    if artifacts_override is not None:
        resolved["artifacts_dir"] = artifacts_override
    resolved["artifacts_dir"] = _resolve_path(resolved["artifacts_dir"], base_dir)
    for key in ("nodes", "edges", "features"):
        resolved["dataset"][key] = _resolve_path(resolved["dataset"][key], base_dir)
        if not os.path.isfile(resolved["dataset"][key]):
            raise ConfigError(f"dataset.{key}: no such file "
                              f"{resolved['dataset'][key]}")
    if resolved["coarse"]["template_dir"] is not None:
        resolved["coarse"]["template_dir"] = _resolve_path(
            resolved["coarse"]["template_dir"], base_dir)
        if not os.path.isdir(resolved["coarse"]["template_dir"]):
            raise ConfigError("coarse.template_dir: no such directory "
                              f"{resolved['coarse']['template_dir']}")

    split = resolved["split"]
    id_classes = tuple(split["id_classes"])
    ood_classes = tuple(split["ood_classes"])
    if len(id_classes) < 2:
        raise ConfigError("split.id_classes needs at least two classes")
    if not ood_classes:
        raise ConfigError("split.ood_classes must not be empty")
    if len(set(id_classes)) != len(id_classes) or \
            len(set(ood_classes)) != len(ood_classes):
        raise ConfigError("duplicate class names in split config")
    if set(id_classes) & set(ood_classes):
        raise ConfigError("id_classes and ood_classes overlap")

    gw = resolved["gateway"]
    if gw["mode"] == "mock":
        if gw["mock_fixture_path"] is None:
            raise ConfigError("gateway.mock_fixture_path is required in mock mode")
        gw["mock_fixture_path"] = _resolve_path(gw["mock_fixture_path"], base_dir)
        if not os.path.isfile(gw["mock_fixture_path"]):
            raise ConfigError("gateway.mock_fixture_path: no such file "
                              f"{gw['mock_fixture_path']}")
    elif not gw["base_url"] and not os.environ.get(BASE_URL_ENV):
        raise ConfigError(f"gateway.base_url (or ${BASE_URL_ENV}) is required "
                          "in live mode")

    try:
        coarse_cfg = CoarseConfig(seed=resolved["seed"], id_labels=id_classes,
                                  **resolved["coarse"])
        prop_cfg = PropagationConfig(**resolved["propagation"])
        mixup_cfg = MixupConfig(seed=resolved["seed"] + 1, **resolved["mixup"])
        train_cfg = TrainConfig(seed=resolved["seed"] + 2, **resolved["train"])
        gateway_cfg = GatewayConfig(**gw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    merge = resolved["merge"]
    if not (0.0 <= merge["sim_threshold"] <= 1.0):
        raise ConfigError("merge.sim_threshold must lie in [0, 1]")
    if merge["min_count"] is not None and merge["min_count"] < 1:
        raise ConfigError("merge.min_count must be >= 1 when set")
    if not (0.0 < split["train_frac"] < 1.0) or not (0.0 < split["val_frac"] < 1.0):
        raise ConfigError("split fractions must lie in (0, 1)")

    rc = RunConfig(
        seed=resolved["seed"],
        nodes_path=resolved["dataset"]["nodes"],
        edges_path=resolved["dataset"]["edges"],
        features_path=resolved["dataset"]["features"],
        id_classes=id_classes,
        ood_classes=ood_classes,
        train_frac=split["train_frac"],
        val_frac=split["val_frac"],
        coarse_cfg=coarse_cfg,
        prop_cfg=prop_cfg,
        mixup_cfg=mixup_cfg,
        train_cfg=train_cfg,
        merge_sim_threshold=merge["sim_threshold"],
        merge_min_count=merge["min_count"],
        gateway_cfg=gateway_cfg,
        artifacts_dir=resolved["artifacts_dir"],
        resolved=resolved,
    )
    os.makedirs(rc.artifacts_dir, exist_ok=True)
    with open(rc.artifact(RESOLVED_FILE), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rc


# ------------------------------------------------------------------ hashing

def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def full_config_hash(rc: RunConfig) -> str:
    return _json_hash(rc.resolved)


# ------------------------------------------------------------------ stages

STAGE_ORDER = ("ingest", "coarse", "denoise", "train-prelim", "augment",
               "train-fine", "detect", "classify-ood", "eval")

_UPSTREAM = {
    "ingest": (),
    "coarse": ("ingest",),
    "denoise": ("coarse",),
    "train-prelim": ("ingest",),
    "augment": ("denoise", "train-prelim"),
    "train-fine": ("denoise", "augment"),
    "detect": ("train-fine",),
    "classify-ood": ("coarse", "detect"),
    "eval": ("train-prelim", "detect", "classify-ood"),
}

_OUTPUTS = {
    "ingest": (SPLIT_FILE,),
    "coarse": (COARSE_FILE, COARSE_LOG_FILE),
    "denoise": (DENOISED_FILE,),
    "train-prelim": (PRELIM_CKPT,),
    "augment": (SYNTH_BIN_FILE, SYNTH_META_FILE),
    "train-fine": (FINE_CKPT,),
    "detect": (DETECT_FILE,),
    "classify-ood": (POST_LABELS_FILE, ASSIGN_FILE, CLASSIFY_LOG_FILE),
    "eval": (EVAL_FILE,),
}

# artifacts each stage reads, hashed into its input fingerprint
_CONSUMES = {
    "ingest": (),
    "coarse": (SPLIT_FILE,),
    "denoise": (SPLIT_FILE, COARSE_FILE),
    "train-prelim": (SPLIT_FILE,),
    "augment": (SPLIT_FILE, DENOISED_FILE, PRELIM_CKPT),
    "train-fine": (SPLIT_FILE, DENOISED_FILE, SYNTH_BIN_FILE, SYNTH_META_FILE),
    "detect": (SPLIT_FILE, FINE_CKPT),
    "classify-ood": (COARSE_FILE, DETECT_FILE),
    "eval": (SPLIT_FILE, DETECT_FILE, ASSIGN_FILE, PRELIM_CKPT),
}


def _scoped_config(rc: RunConfig, stage: str) -> dict:
    r = rc.resolved
    if stage == "ingest":
        return {"seed": r["seed"], "split": r["split"]}
    if stage == "coarse":
        return {"seed": r["seed"], "coarse": r["coarse"],
                "gateway": r["gateway"], "id_classes": r["split"]["id_classes"]}
    if stage == "denoise":
        return {"propagation": r["propagation"]}
    if stage in ("train-prelim", "train-fine"):
        return {"seed": r["seed"], "train": r["train"]}
    if stage == "augment":
        return {"seed": r["seed"], "mixup": r["mixup"]}
    if stage == "detect":
        return {}
    if stage == "classify-ood":
        return {"merge": r["merge"], "gateway": r["gateway"],
                "text_budget": r["coarse"]["text_budget"],
                "max_parse_retries": r["coarse"]["max_parse_retries"]}
    if stage == "eval":
        return {"seed": r["seed"], "train": r["train"]}
    raise AssertionError(f"unknown stage {stage}")


def _stage_inputs(rc: RunConfig, stage: str) -> dict:
    inputs = {"config": _json_hash(_scoped_config(rc, stage))}
    inputs["dataset"] = _json_hash([_file_hash(rc.nodes_path),
                                    _file_hash(rc.edges_path),
                                    _file_hash(rc.features_path)])
    for name in _CONSUMES[stage]:
        inputs[name] = _file_hash(rc.artifact(name))
    uses_gateway = stage in ("coarse", "classify-ood")
    if uses_gateway and rc.gateway_cfg.mode == "mock":
        inputs["mock_fixture"] = _file_hash(rc.gateway_cfg.mock_fixture_path)
    if uses_gateway and rc.coarse_cfg.template_dir is not None:
        tdir = rc.coarse_cfg.template_dir
        inputs["templates"] = _json_hash(
            {f: _file_hash(os.path.join(tdir, f))
             for f in sorted(os.listdir(tdir)) if f.endswith(".txt")})
    return inputs


class _Runtime:
    """Per-command cache of expensive shared state (graph, split, A-hat)."""

    def __init__(self, rc: RunConfig):
        self.rc = rc
        self._graph: Graph | None = None
        self._split: SplitAssignment | None = None
        self._a_hat = None

    @property
    def graph(self) -> Graph:
        if self._graph is None:
            try:
                self._graph = load_graph(self.rc.nodes_path, self.rc.edges_path,
                                         self.rc.features_path)
            except ValueError as exc:
                raise ConfigError(f"dataset rejected: {exc}") from exc
        return self._graph

    @property
    def a_hat(self):
        if self._a_hat is None:
            self._a_hat = sym_normalize_adjacency(self.graph)
        return self._a_hat

    def split(self) -> SplitAssignment:
        if self._split is None:
            with open(self.rc.artifact(SPLIT_FILE), "r", encoding="utf-8") as fh:
                self._split = SplitAssignment.from_dict(json.load(fh))
        return self._split

    def id_train_targets(self) -> np.ndarray:
        """Full-length target array with ID class indices on labeled ID nodes
        and -1 elsewhere (train/val restricted to ID classes)."""
        g, split = self.graph, self.split()
        cindex = split.class_index()
        y = np.full(g.num_nodes, -1, dtype=np.int64)
        for i in range(g.num_nodes):
            lab = g.labels[i]
            if lab in cindex:
                y[i] = cindex[lab]
        return y

    def id_val_ids(self) -> list[int]:
        g, split = self.graph, self.split()
        cindex = split.class_index()
        return [i for i in split.val_ids if g.labels[i] in cindex]


def _remove_if_exists(path: str) -> None:
    try:
        os.remove(path)
    except FileNotFoundError:
        pass


def _stage_ingest(rt: _Runtime) -> None:
    rc = rt.rc
    try:
        split = split_dataset(rt.graph, rc.id_classes, rc.ood_classes, rc.seed,
                              rc.train_frac, rc.val_frac)
    except ValueError as exc:
        raise ConfigError(f"split rejected: {exc}") from exc
    with open(rc.artifact(SPLIT_FILE), "w", encoding="utf-8") as fh:
        json.dump(split.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    rt._split = split


def _stage_coarse(rt: _Runtime) -> None:
    rc = rt.rc
    log_path = rc.artifact(COARSE_LOG_FILE)
    _remove_if_exists(log_path)
    gateway = LLMGateway(rc.gateway_cfg, log_path=log_path)
    try:
        result = coarse_detect(rt.graph, rt.split().test_ids, rc.coarse_cfg,
                               gateway)
    except CoarseDetectError as exc:
        partial_path = rc.artifact(COARSE_PARTIAL_FILE)
        with open(partial_path, "w", encoding="utf-8") as fh:
            for ann in exc.partial:
                fh.write(json.dumps(ann.to_dict(), ensure_ascii=False) + "\n")
        raise StageError(f"coarse detection failed: {exc} "
                         f"(partial annotations in {partial_path})") from exc
    if not os.path.exists(log_path):        # budget of zero queried nodes
        open(log_path, "w").close()
    save_coarse_result(result, rc.artifact(COARSE_FILE))
    _remove_if_exists(rc.artifact(COARSE_PARTIAL_FILE))


def _load_denoised(path: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    candidates, survivors = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") != "candidate":
                continue
            candidates.append(int(rec["node_id"]))
            if rec["kept"]:
                survivors.append(int(rec["node_id"]))
    return tuple(candidates), tuple(survivors)


def _stage_denoise(rt: _Runtime) -> None:
    rc = rt.rc
    g, split = rt.graph, rt.split()
    coarse = load_coarse_result(rc.artifact(COARSE_FILE))
    cindex = split.class_index()
    train_labels = {i: cindex[g.labels[i]] for i in split.train_ids}
    candidates = coarse.ood_ids

    survivors: tuple[int, ...] = ()
    if candidates:
        init = initial_label_matrix(g.num_nodes, len(split.id_classes),
                                    train_labels, candidates)
        propagated = label_propagate(rw_normalize_adjacency(g), init, rc.prop_cfg)
        survivors = denoise_ood(propagated, candidates)

    kept = set(survivors)
    with open(rc.artifact(DENOISED_FILE), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "summary", "steps": rc.prop_cfg.steps,
                             "candidate_count": len(candidates),
                             "survivor_count": len(survivors)}) + "\n")
        for i in candidates:
            fh.write(json.dumps({"kind": "candidate", "node_id": i,
                                 "kept": i in kept}) + "\n")


def _stage_train_prelim(rt: _Runtime) -> None:
    rc = rt.rc
    split = rt.split()
    y = rt.id_train_targets()
    cfg = replace(rc.train_cfg, seed=rc.seed + 2)
    try:
        params, _ = train(rt.a_hat, rt.graph.features, y, split.train_ids,
                          rt.id_val_ids(), out_dim=len(split.id_classes),
                          cfg=cfg)
    except TrainingDiverged as exc:
        raise StageError(f"preliminary training diverged: {exc}") from exc
    save_checkpoint(params, rc.artifact(PRELIM_CKPT))


def _stage_augment(rt: _Runtime) -> None:
    rc = rt.rc
    split = rt.split()
    _, survivors = _load_denoised(rc.artifact(DENOISED_FILE))
    if not survivors:
        raise StageError("no denoised OOD candidates survive; nothing to "
                         "augment (coarse stage found too few OOD nodes)")
    params = load_checkpoint(rc.artifact(PRELIM_CKPT))
    hidden = hidden_states(params, rt.a_hat, rt.graph.features)
    probs = predict(params, rt.a_hat, rt.graph.features)
    confidence = {i: float(probs[i].max()) for i in split.train_ids}
    boundary = select_boundary_nodes(confidence, rc.mixup_cfg.boundary_count)
    center = ood_center(hidden, survivors)
    synth = mixup_augment(hidden, boundary, center, rc.mixup_cfg)
    save_synthetic(synth, rc.artifact(SYNTH_BIN_FILE), rc.artifact(SYNTH_META_FILE))


def _stage_train_fine(rt: _Runtime) -> None:
    rc = rt.rc
    g, split = rt.graph, rt.split()
    _, survivors = _load_denoised(rc.artifact(DENOISED_FILE))
    synth = load_synthetic(rc.artifact(SYNTH_BIN_FILE), rc.artifact(SYNTH_META_FILE))
    c = len(split.id_classes)
    cindex = split.class_index()

    y = rt.id_train_targets()
    for i in survivors:
        y[i] = c
    for i in split.val_ids:
        if g.labels[i] not in cindex:
            y[i] = c
    train_ids = sorted(set(split.train_ids) | set(survivors))
    cfg = replace(rc.train_cfg, seed=rc.seed + 3)
    try:
        params, _ = train(rt.a_hat, g.features, y, train_ids, split.val_ids,
                          out_dim=c + 1, synth=synth, cfg=cfg)
    except TrainingDiverged as exc:
        raise StageError(f"fine training diverged: {exc}") from exc
    save_checkpoint(params, rc.artifact(FINE_CKPT))


def _load_detect(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _stage_detect(rt: _Runtime) -> None:
    rc = rt.rc
    split = rt.split()
    params = load_checkpoint(rc.artifact(FINE_CKPT))
    probs = predict(params, rt.a_hat, rt.graph.features)
    ood_index = probs.shape[1] - 1
    with open(rc.artifact(DETECT_FILE), "w", encoding="utf-8") as fh:
        for i in sorted(split.test_ids):
            fh.write(json.dumps({"node_id": i,
                                 "pred": int(np.argmax(probs[i])),
                                 "ood_score": float(probs[i, ood_index])}) + "\n")


def _stage_classify_ood(rt: _Runtime) -> None:
    rc = rt.rc
    coarse = load_coarse_result(rc.artifact(COARSE_FILE))
    if not coarse.category_log:
        raise StageError("coarse stage logged no OOD categories; cannot build "
                         "a label space")
    try:
        post = merge_categories(coarse.category_log, rc.merge_sim_threshold,
                                rc.merge_min_count)
    except ValueError as exc:
        raise StageError(f"category merge failed: {exc}") from exc
    save_post_label_space(post, rc.artifact(POST_LABELS_FILE))

    c = len(rt.split().id_classes)
    ood_nodes = [r["node_id"] for r in _load_detect(rc.artifact(DETECT_FILE))
                 if r["pred"] == c]

    log_path = rc.artifact(CLASSIFY_LOG_FILE)
    _remove_if_exists(log_path)
    if not ood_nodes:
        open(log_path, "w").close()
        open(rc.artifact(ASSIGN_FILE), "w").close()
        _remove_if_exists(rc.artifact(ASSIGN_PARTIAL_FILE))
        return

    gateway = LLMGateway(rc.gateway_cfg, log_path=log_path)
    try:
        assignments = classify_ood(
            ood_nodes, rt.graph, post, gateway,
            text_budget=rc.coarse_cfg.text_budget,
            template_dir=rc.coarse_cfg.template_dir,
            max_parse_retries=rc.coarse_cfg.max_parse_retries)
    except OODClassifyError as exc:
        partial_path = rc.artifact(ASSIGN_PARTIAL_FILE)
        save_assignments(exc.partial, partial_path)
        raise StageError(f"OOD classification failed: {exc} "
                         f"(partial assignments in {partial_path})") from exc
    save_assignments(assignments, rc.artifact(ASSIGN_FILE))
    _remove_if_exists(rc.artifact(ASSIGN_PARTIAL_FILE))


def _baseline_report(probs: np.ndarray, test_ids, truth: dict, tau: float,
                     mode: str, ood_index: int):
    # probs has one column per ID class, so threshold_baseline's reject
    # index (the column count) coincides with the pipeline's OOD index
    preds_arr = threshold_baseline(probs, mode, tau)
    preds = {node: int(preds_arr[k]) for k, node in enumerate(test_ids)}
    scores = {node: 1.0 - float(probs[k].max()) for k, node in enumerate(test_ids)}
    return accuracy_report(preds, truth, ood_index,
                           auroc_value=_safe_auroc(scores, truth, ood_index))


def _safe_auroc(scores: dict, truth: dict, ood_index: int):
    flags = {n: truth[n] == ood_index for n in scores}
    if all(flags.values()) or not any(flags.values()):
        return None
    return auroc(scores, flags)


def _stage_eval(rt: _Runtime) -> None:
    rc = rt.rc
    g, split = rt.graph, rt.split()
    c = len(split.id_classes)
    cindex = split.class_index()
    test_ids = sorted(split.test_ids)
    truth = {i: cindex.get(g.labels[i], c) for i in test_ids}

    detect_records = _load_detect(rc.artifact(DETECT_FILE))
    cfc_preds = {r["node_id"]: r["pred"] for r in detect_records}
    cfc_scores = {r["node_id"]: r["ood_score"] for r in detect_records}
    cfc = accuracy_report(cfc_preds, truth, c,
                          auroc_value=_safe_auroc(cfc_scores, truth, c))

    assignments = load_assignments(rc.artifact(ASSIGN_FILE))
    ood_pairs = [(a.node_id, a.label) for a in assignments
                 if truth.get(a.node_id) == c]
    cluster = (cluster_accuracy(ood_pairs, {n: g.labels[n] for n, _ in ood_pairs})
               if ood_pairs else None)

    prelim = load_checkpoint(rc.artifact(PRELIM_CKPT))
    probs_soft = predict(prelim, rt.a_hat, g.features)

    y = rt.id_train_targets()
    sig_cfg = replace(rc.train_cfg, head="sigmoid", seed=rc.seed + 4)
    try:
        sigmoid_params, _ = train(rt.a_hat, g.features, y, split.train_ids,
                                  rt.id_val_ids(), out_dim=c, cfg=sig_cfg)
    except TrainingDiverged as exc:
        raise StageError(f"sigmoid baseline training diverged: {exc}") from exc
    probs_sig = predict(sigmoid_params, rt.a_hat, g.features, head="sigmoid")

    val_ids = sorted(split.val_ids)
    truth_val = np.array([cindex.get(g.labels[i], c) for i in val_ids])
    tau_soft, _ = tune_threshold(probs_soft[val_ids], truth_val, "softmax")
    tau_sig, _ = tune_threshold(probs_sig[val_ids], truth_val, "sigmoid")

    methods = {
        "CFC": cfc,
        "GCN_softmax": _baseline_report(probs_soft[test_ids], test_ids, truth,
                                        0.0, "softmax", c),
        "GCN_softmax_tau": _baseline_report(probs_soft[test_ids], test_ids,
                                            truth, tau_soft, "softmax", c),
        "GCN_sigmoid": _baseline_report(probs_sig[test_ids], test_ids, truth,
                                        SIGMOID_FIXED_TAU, "sigmoid", c),
        "GCN_sigmoid_tau": _baseline_report(probs_sig[test_ids], test_ids,
                                            truth, tau_sig, "sigmoid", c),
    }
    doc = {
        "ood_class_index": c,
        "cluster_accuracy": cluster,
        "tuned_tau": {"softmax": tau_soft, "sigmoid": tau_sig},
        "methods": {name: rep.to_dict() for name, rep in methods.items()},
    }
    with open(rc.artifact(EVAL_FILE), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


_STAGE_FN = {
    "ingest": _stage_ingest,
    "coarse": _stage_coarse,
    "denoise": _stage_denoise,
    "train-prelim": _stage_train_prelim,
    "augment": _stage_augment,
    "train-fine": _stage_train_fine,
    "detect": _stage_detect,
    "classify-ood": _stage_classify_ood,
    "eval": _stage_eval,
}


# ------------------------------------------------------------------ manifest

def load_manifest(art_dir: str) -> dict:
    path = os.path.join(art_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        return {"version": __version__, "config_hash": None, "stages": {}}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _save_manifest(art_dir: str, manifest: dict) -> None:
    with open(os.path.join(art_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_complete(rc: RunConfig, manifest: dict, stage: str) -> bool:
    entry = manifest["stages"].get(stage)
    if entry is None:
        return False
    return all(os.path.exists(rc.artifact(name)) for name in entry["outputs"])


def _transitive_upstream(stage: str) -> list[str]:
    seen: set[str] = set()

    def walk(s: str):
        for up in _UPSTREAM[s]:
            if up not in seen:
                seen.add(up)
                walk(up)

    walk(stage)
    return [s for s in STAGE_ORDER if s in seen]


def check_strict(rc: RunConfig, strict: bool) -> None:
    if not strict:
        return
    manifest = load_manifest(rc.artifacts_dir)
    recorded = manifest.get("config_hash")
    if recorded is not None and recorded != full_config_hash(rc):
        raise ConfigError(
            "config hash mismatch: these artifacts were produced by a "
            "different configuration (drop --strict to let stages rerun)")


@contextmanager
def artifacts_lock(art_dir: str):
    """Exclusive ownership of an artifacts directory for one command."""
    os.makedirs(art_dir, exist_ok=True)
    path = os.path.join(art_dir, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"artifacts directory is locked by another run "
                         f"({path}); remove the file if that run is gone") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        _remove_if_exists(path)


def _execute(rt: _Runtime, stage: str, manifest: dict) -> bool:
    """Run one stage if its inputs changed; returns True when it executed."""
    rc = rt.rc
    for upstream in _transitive_upstream(stage):
        if not _stage_complete(rc, manifest, upstream):
            raise ConfigError(f"missing artifact: {upstream}")

    inputs = _stage_inputs(rc, stage)
    input_hash = _json_hash(inputs)
    entry = manifest["stages"].get(stage)
    if entry is not None and entry["input_hash"] == input_hash and \
            all(os.path.exists(rc.artifact(n)) for n in entry["outputs"]):
        return False

    start = time.monotonic()
    _STAGE_FN[stage](rt)
    manifest["stages"][stage] = {
        "input_hash": input_hash,
        "inputs": inputs,
        "outputs": list(_OUTPUTS[stage]),
        "wall_time_s": round(time.monotonic() - start, 3),
        "completed_at": datetime.now(timezone.utc).isoformat(),
    }
    manifest["config_hash"] = full_config_hash(rc)
    manifest["version"] = __version__
    _save_manifest(rc.artifacts_dir, manifest)
    return True


def run_stage(rc: RunConfig, stage: str, strict: bool = False,
              runtime: _Runtime | None = None) -> bool:
    """Execute (or skip) a single stage. Caller holds the artifacts lock."""
    if stage not in STAGE_ORDER:
        raise ConfigError(f"unknown stage {stage!r}")
    check_strict(rc, strict)
    rt = runtime if runtime is not None else _Runtime(rc)
    manifest = load_manifest(rc.artifacts_dir)
    return _execute(rt, stage, manifest)


def run_all(rc: RunConfig, strict: bool = False) -> dict:
    """Run every stage in order; returns {stage: executed?}."""
    check_strict(rc, strict)
    rt = _Runtime(rc)
    manifest = load_manifest(rc.artifacts_dir)
    executed = {}
    for stage in STAGE_ORDER:
        executed[stage] = _execute(rt, stage, manifest)
    return executed


# ------------------------------------------------------------------ reporting

def emit_report(rc: RunConfig) -> str:
    """Text table of every method's ID/OOD/overall accuracy (in percent)."""
    path = rc.artifact(EVAL_FILE)
    if not os.path.exists(path):
        raise ConfigError("missing artifact: eval")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    names = [m for m in METHOD_ORDER if m in doc["methods"]]
    names += sorted(set(doc["methods"]) - set(names))
    lines = [f"{'method':<18}{'ID':>8}{'OOD':>8}{'overall':>9}{'AUROC':>8}"]
    for name in names:
        rep = doc["methods"][name]
        roc = f"{rep['auroc']:.3f}" if rep.get("auroc") is not None else "-"
        lines.append(f"{name:<18}"
                     f"{100 * rep['id_accuracy']:>8.2f}"
                     f"{100 * rep['ood_accuracy']:>8.2f}"
                     f"{100 * rep['overall_accuracy']:>9.2f}"
                     f"{roc:>8}")
    cluster = doc.get("cluster_accuracy")
    lines.append("")
    lines.append("OOD cluster accuracy: "
                 + (f"{100 * cluster:.2f}" if cluster is not None else "-"))
    tuned = doc.get("tuned_tau", {})
    if tuned:
        lines.append(f"tuned tau: softmax={tuned.get('softmax')} "
                     f"sigmoid={tuned.get('sigmoid')}")
    return "\n".join(lines)
