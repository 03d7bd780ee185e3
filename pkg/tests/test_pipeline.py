"""End-to-end pipeline behavior: config validation, stage caching and
resumability, failure handling, locking, and the command line wrapper.

Most tests share one module-scoped synthetic corpus (fixture_tools) and a
completed reference run of all nine stages over it. Tests that mutate
artifacts run in their own artifact directories against the same dataset.
"""

import json
import os
import subprocess
import sys

import pytest

import fixture_tools
from cfc.pipeline import (
    ASSIGN_FILE,
    COARSE_FILE,
    COARSE_PARTIAL_FILE,
    DENOISED_FILE,
    EVAL_FILE,
    MANIFEST_FILE,
    RESOLVED_FILE,
    SPLIT_FILE,
    STAGE_ORDER,
    ConfigError,
    StageError,
    artifacts_lock,
    emit_report,
    full_config_hash,
    load_manifest,
    run_all,
    run_stage,
    validate_config,
)


@pytest.fixture(scope="module")
def fix(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    return fixture_tools.write_fixture(str(root))


@pytest.fixture(scope="module")
def primary(fix):
    """One completed run over the corpus, in the fixture's own artifacts dir."""
    rc = validate_config(fix["config"])
    executed = run_all(rc)
    return rc, executed


def _variant_config(fix, name, mutate):
    """Copy the fixture config, apply mutate(dict), write next to the original
    so relative dataset paths keep resolving."""
    with open(fix["config"], "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    mutate(cfg)
    path = os.path.join(os.path.dirname(fix["config"]), name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2)
    return path


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ------------------------------------------------------------ config checks


def test_validate_config_fills_defaults(fix):
    rc = validate_config(fix["config"])
    assert rc.coarse_cfg.confidence_threshold == 0.7
    assert rc.coarse_cfg.mode == "easy_reject"
    assert rc.coarse_cfg.candidate_count == 10
    assert rc.prop_cfg.steps == 10
    assert rc.mixup_cfg.alpha == 0.5
    assert rc.mixup_cfg.boundary_count == 10
    assert rc.mixup_cfg.synth_count == 100
    assert rc.train_cfg.learning_rate == 0.01
    assert rc.train_cfg.weight_decay == 5e-4
    assert rc.train_cfg.epochs == 200
    assert rc.train_cfg.hidden_dim == 64
    assert rc.merge_sim_threshold == 0.5
    assert rc.merge_min_count is None
    assert rc.train_frac == 0.5 and rc.val_frac == 0.4
    assert rc.gateway_cfg.max_concurrent == 4

    # derived seeds: one offset per consumer so streams never collide
    assert rc.coarse_cfg.seed == rc.seed
    assert rc.mixup_cfg.seed == rc.seed + 1
    assert rc.train_cfg.seed == rc.seed + 2

    # relative paths resolve against the config's directory
    base = os.path.dirname(os.path.abspath(fix["config"]))
    assert rc.artifacts_dir == os.path.join(base, "artifacts")
    assert os.path.isabs(rc.nodes_path) and os.path.isfile(rc.nodes_path)

    with open(rc.artifact(RESOLVED_FILE), "r", encoding="utf-8") as fh:
        assert json.load(fh) == rc.resolved


def test_validate_config_rejects_unknown_keys(fix):
    bad = _variant_config(fix, "bad_key.json",
                          lambda c: c.setdefault("coarse", {}).update(banana=1))
    with pytest.raises(ConfigError, match="unknown config key 'coarse.banana'"):
        validate_config(bad)
    bad = _variant_config(fix, "bad_top.json",
                          lambda c: c.update(frobnicate=True))
    with pytest.raises(ConfigError, match="unknown config key 'frobnicate'"):
        validate_config(bad)


def test_validate_config_requires_seed(fix):
    bad = _variant_config(fix, "no_seed.json", lambda c: c.pop("seed"))
    with pytest.raises(ConfigError, match="missing required config key 'seed'"):
        validate_config(bad)


def test_validate_config_type_errors(fix):
    bad = _variant_config(fix, "str_seed.json",
                          lambda c: c.update(seed="7"))
    with pytest.raises(ConfigError, match="seed: expected an integer"):
        validate_config(bad)
    # bool is not an acceptable integer
    bad = _variant_config(fix, "bool_seed.json",
                          lambda c: c.update(seed=True))
    with pytest.raises(ConfigError, match="seed: expected an integer"):
        validate_config(bad)
    bad = _variant_config(
        fix, "float_steps.json",
        lambda c: c.setdefault("propagation", {}).update(steps=2.5))
    with pytest.raises(ConfigError, match="propagation.steps: expected an integer"):
        validate_config(bad)
    bad = _variant_config(
        fix, "scalar_classes.json",
        lambda c: c["split"].update(id_classes="circuit design"))
    with pytest.raises(ConfigError, match="expected a list of strings"):
        validate_config(bad)


def test_validate_config_checks_dataset_paths(fix):
    bad = _variant_config(fix, "gone_nodes.json",
                          lambda c: c["dataset"].update(nodes="gone.jsonl"))
    with pytest.raises(ConfigError, match="dataset.nodes: no such file"):
        validate_config(bad)
    bad = _variant_config(
        fix, "no_mock.json",
        lambda c: c["gateway"].update(mock_fixture_path=None))
    with pytest.raises(ConfigError, match="required in mock mode"):
        validate_config(bad)


def test_validate_config_class_rules(fix):
    bad = _variant_config(fix, "one_id.json",
                          lambda c: c["split"].update(id_classes=["solo"]))
    with pytest.raises(ConfigError, match="at least two"):
        validate_config(bad)
    bad = _variant_config(fix, "no_ood.json",
                          lambda c: c["split"].update(ood_classes=[]))
    with pytest.raises(ConfigError, match="must not be empty"):
        validate_config(bad)
    bad = _variant_config(
        fix, "overlap.json",
        lambda c: c["split"].update(
            ood_classes=[c["split"]["id_classes"][0], "volcanology"]))
    with pytest.raises(ConfigError, match="overlap"):
        validate_config(bad)
    bad = _variant_config(
        fix, "dupes.json",
        lambda c: c["split"].update(id_classes=["twice", "twice"]))
    with pytest.raises(ConfigError, match="duplicate class names"):
        validate_config(bad)


def test_validate_config_artifacts_override(fix, tmp_path):
    override = tmp_path / "elsewhere"
    rc = validate_config(fix["config"], artifacts_override=str(override))
    assert rc.artifacts_dir == str(override)
    assert os.path.isfile(override / RESOLVED_FILE)


# ------------------------------------------------------------ stage caching


def test_run_all_executes_every_stage(primary):
    rc, executed = primary
    assert list(executed) == list(STAGE_ORDER)
    assert all(executed.values())
    manifest = load_manifest(rc.artifacts_dir)
    assert set(manifest["stages"]) == set(STAGE_ORDER)
    assert manifest["config_hash"] == full_config_hash(rc)
    for stage in STAGE_ORDER:
        for name in manifest["stages"][stage]["outputs"]:
            assert os.path.isfile(rc.artifact(name)), (stage, name)


def test_rerun_is_fully_cached(primary):
    rc, _ = primary
    before = _read_bytes(rc.artifact(MANIFEST_FILE))
    executed = run_all(rc)
    assert not any(executed.values())
    # a cached pass must not rewrite the manifest (timestamps preserved)
    assert _read_bytes(rc.artifact(MANIFEST_FILE)) == before


def test_eval_json_reproducible(primary, fix, tmp_path):
    rc, _ = primary
    rc2 = validate_config(fix["config"], artifacts_override=str(tmp_path / "b"))
    run_all(rc2)
    assert _read_bytes(rc2.artifact(EVAL_FILE)) == _read_bytes(rc.artifact(EVAL_FILE))
    doc = json.loads(_read_bytes(rc.artifact(EVAL_FILE)))
    assert set(doc["methods"]) == {"CFC", "GCN_softmax", "GCN_softmax_tau",
                                   "GCN_sigmoid", "GCN_sigmoid_tau"}
    assert doc["ood_class_index"] == len(rc.id_classes)
    assert doc["cluster_accuracy"] is not None


def test_artifact_deletion_reruns_only_that_stage(fix, tmp_path):
    rc = validate_config(fix["config"], artifacts_override=str(tmp_path / "a"))
    run_all(rc)
    saved = _read_bytes(rc.artifact(DENOISED_FILE))
    os.remove(rc.artifact(DENOISED_FILE))
    executed = run_all(rc)
    assert executed["denoise"]
    assert not any(ran for stage, ran in executed.items() if stage != "denoise")
    # deterministic regeneration, so downstream hashes still matched
    assert _read_bytes(rc.artifact(DENOISED_FILE)) == saved


def test_stages_refuse_to_run_out_of_order(fix, tmp_path):
    rc = validate_config(fix["config"], artifacts_override=str(tmp_path / "a"))
    with pytest.raises(ConfigError, match="missing artifact: ingest"):
        run_stage(rc, "denoise")
    assert run_stage(rc, "ingest") is True
    with pytest.raises(ConfigError, match="missing artifact: coarse"):
        run_stage(rc, "denoise")
    assert run_stage(rc, "coarse") is True
    assert run_stage(rc, "denoise") is True
    assert os.path.isfile(rc.artifact(DENOISED_FILE))


def test_run_stage_rejects_unknown_stage(primary):
    rc, _ = primary
    with pytest.raises(ConfigError, match="unknown stage"):
        run_stage(rc, "polish")


def test_strict_mode_flags_config_drift(fix, tmp_path):
    arts = str(tmp_path / "a")
    rc = validate_config(fix["config"], artifacts_override=arts)
    run_all(rc)
    changed = _variant_config(
        fix, "steps3.json",
        lambda c: c.setdefault("propagation", {}).update(steps=3))
    rc2 = validate_config(changed, artifacts_override=arts)
    with pytest.raises(ConfigError, match="config hash mismatch"):
        run_all(rc2, strict=True)
    # without --strict the affected stage simply reruns
    executed = run_all(rc2)
    assert executed["denoise"]
    assert not executed["ingest"] and not executed["coarse"]


def test_lock_blocks_concurrent_runs(tmp_path):
    arts = str(tmp_path / "arts")
    with artifacts_lock(arts):
        assert os.path.isfile(os.path.join(arts, ".lock"))
        with pytest.raises(StageError, match="locked by another run"):
            with artifacts_lock(arts):
                pass
    assert not os.path.exists(os.path.join(arts, ".lock"))
    with artifacts_lock(arts):
        pass


# ------------------------------------------------------------ failure paths


def test_coarse_failure_keeps_partial_annotations(tmp_path):
    paths = fixture_tools.write_fixture(str(tmp_path))
    with open(paths["mock"], "r", encoding="utf-8") as fh:
        original = fh.read()
    rules = [json.loads(line) for line in original.splitlines() if line.strip()]
    # drop the last few detection rules and every fallback, so a handful of
    # screening prompts have no mock answer at all
    hash_rules = [r for r in rules if r["match"].startswith("hash:")]
    with open(paths["mock"], "w", encoding="utf-8") as fh:
        for rule in hash_rules[:-5]:
            fh.write(json.dumps(rule) + "\n")

    rc = validate_config(paths["config"])
    assert run_stage(rc, "ingest") is True
    with pytest.raises(StageError, match="partial annotations"):
        run_stage(rc, "coarse")

    partial = rc.artifact(COARSE_PARTIAL_FILE)
    assert os.path.isfile(partial)
    with open(partial, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    assert len(lines) >= 1
    assert all("node_id" in rec for rec in lines)
    assert not os.path.exists(rc.artifact(COARSE_FILE))
    assert "coarse" not in load_manifest(rc.artifacts_dir)["stages"]

    # restoring the fixture lets the stage complete and clears the partial
    with open(paths["mock"], "w", encoding="utf-8") as fh:
        fh.write(original)
    assert run_stage(rc, "coarse") is True
    assert os.path.isfile(rc.artifact(COARSE_FILE))
    assert not os.path.exists(partial)


def test_report_needs_a_finished_eval(fix, tmp_path):
    rc = validate_config(fix["config"], artifacts_override=str(tmp_path / "a"))
    with pytest.raises(ConfigError, match="missing artifact: eval"):
        emit_report(rc)


# ------------------------------------------------------------ command line


def _cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "cfc.cli", *args],
                          capture_output=True, text=True, cwd=cwd)


def test_cli_run_all_report_and_caching(tmp_path):
    paths = fixture_tools.write_fixture(str(tmp_path))
    base = ["--config", paths["config"]]

    first = _cli(["run-all", *base], cwd=str(tmp_path))
    assert first.returncode == 0, first.stderr
    for stage in STAGE_ORDER:
        assert f"{stage}: done" in first.stdout
    assert "method" in first.stdout and "CFC" in first.stdout

    again = _cli(["run-all", "--strict", *base], cwd=str(tmp_path))
    assert again.returncode == 0, again.stderr
    for stage in STAGE_ORDER:
        assert f"{stage}: cached" in again.stdout

    one = _cli(["denoise", *base], cwd=str(tmp_path))
    assert one.returncode == 0 and "denoise: cached" in one.stdout

    report = _cli(["report", *base], cwd=str(tmp_path))
    assert report.returncode == 0
    assert "GCN_softmax_tau" in report.stdout
    assert "OOD cluster accuracy" in report.stdout


def test_cli_error_exit_codes(fix, tmp_path):
    # unreadable config -> validation failure
    missing = _cli(["run-all", "--config", str(tmp_path / "nope.json")],
                   cwd=str(tmp_path))
    assert missing.returncode == 1
    assert "error:" in missing.stderr

    # report before eval has ever run -> missing artifact
    fresh = str(tmp_path / "fresh")
    report = _cli(["report", "--config", fix["config"], "--artifacts", fresh],
                  cwd=str(tmp_path))
    assert report.returncode == 1
    assert "missing artifact: eval" in report.stderr

    # a held lock is a runtime failure, not a config problem
    locked = str(tmp_path / "locked")
    os.makedirs(locked)
    open(os.path.join(locked, ".lock"), "w").close()
    blocked = _cli(["run-all", "--config", fix["config"], "--artifacts", locked],
                   cwd=str(tmp_path))
    assert blocked.returncode == 2
    assert "locked by another run" in blocked.stderr

    # argparse rejects unknown commands with the usual usage error
    bogus = _cli(["polish", "--config", fix["config"]], cwd=str(tmp_path))
    assert bogus.returncode == 2
    assert "invalid choice" in bogus.stderr
