import json

import pandas as pd
import pytest

from mutual_taught import storage
from mutual_taught.env import Environment, build_environment
from mutual_taught.errors import EXIT_OK, EXIT_RUNTIME
from mutual_taught.experiments import (
    ABLATION_AXES,
    ablation_variants,
    method_schedule,
    run_ablation,
    run_experiment,
    run_seed,
)
from mutual_taught.schemas import CheckpointRecord, EnvironmentRecord, IterationRecord

from .conftest import tiny_config


def _summary(out):
    return pd.read_csv(out / storage.SUMMARY, float_precision="round_trip")


def _records(out):
    lines = (out / storage.ITERATIONS).read_text().splitlines()
    return [IterationRecord.model_validate_json(line) for line in lines]


def _with_dpo(cfg, **dpo):
    loop = cfg.loop.model_copy(update={"dpo": cfg.loop.dpo.model_copy(update=dpo)})
    return cfg.model_copy(update={"loop": loop})


def test_run_writes_artifacts(tmp_path):
    cfg = tiny_config()
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    for name in (storage.CONFIG_ECHO, storage.ITERATIONS, storage.SUMMARY):
        assert (tmp_path / name).exists()
    status = json.loads((tmp_path / storage.STATUS).read_text())
    assert status["complete"] is True

    summary = _summary(tmp_path)
    assert list(summary.columns) == storage.SUMMARY_COLUMNS
    base = summary[
        (summary.iteration == 0) & (summary.metric == "expected_true_reward")
    ]
    assert sorted(base.seed) == [0, 1]
    assert {r.seed for r in _records(tmp_path)} == {0, 1}


def test_rerun_from_config_echo_is_identical(tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    run_experiment(tiny_config(), first)
    echoed = storage.load_config(first / storage.CONFIG_ECHO)
    run_experiment(echoed, second)
    for name in (storage.SUMMARY, storage.ITERATIONS):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_process_pool_matches_serial_run(tmp_path):
    cfg = tiny_config(seeds=[0, 1, 2])
    run_experiment(cfg, tmp_path / "serial", workers=1)
    run_experiment(cfg, tmp_path / "pool", workers=2)
    serial = (tmp_path / "serial" / storage.SUMMARY).read_bytes()
    assert serial == (tmp_path / "pool" / storage.SUMMARY).read_bytes()


def test_offline_dpo_without_updates_keeps_every_metric(tmp_path):
    cfg = _with_dpo(tiny_config(method="offline-dpo"), learning_rate=0.0)
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    summary = _summary(tmp_path)
    table = summary.pivot_table(
        index=["seed", "metric"], columns="iteration", values="value"
    )
    assert list(table.columns) == [0, 1]
    assert (table[0] == table[1]).all()


def test_offline_dpo_schedule():
    cfg = tiny_config(method="offline-dpo")
    env = build_environment(cfg.env.model_copy(update={"partition_scope": "disjoint"}))
    schedule, prompt_sets = method_schedule(cfg, env)
    assert schedule.iterations_per_round == 1
    assert schedule.rm_update_after == []
    assert not schedule.model_selection
    assert prompt_sets == [sorted(env.policy_split_1 + env.policy_split_2)]


def test_fixed_reward_model_baseline_never_updates(tmp_path):
    cfg = tiny_config(method="iter-dpo-fixed-rm")
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    reports = [r.report for r in _records(tmp_path) if r.report is not None]
    assert reports
    assert not any(r.rm_updated for r in reports)
    assert max(r.round_iteration for r in reports) <= 3


def test_saved_environment_matches_fingerprint(tmp_path):
    cfg = tiny_config(seeds=[3], save_env=True)
    run_experiment(cfg, tmp_path)
    record = EnvironmentRecord.model_validate_json(
        (tmp_path / "env-3.json").read_text()
    )
    status = json.loads((tmp_path / storage.STATUS).read_text())
    env = Environment.from_record(record)
    assert env.fingerprint() == status["seeds"][0]["env_fingerprint"]


def test_saved_checkpoints_follow_accepted_iterations(tmp_path):
    cfg = tiny_config(seeds=[3], save_env=True)
    cfg = cfg.model_copy(
        update={"loop": cfg.loop.model_copy(update={"model_selection": False})}
    )
    run_experiment(cfg, tmp_path)
    lines = (tmp_path / "checkpoints-3.jsonl").read_text().splitlines()
    checkpoints = [CheckpointRecord.model_validate_json(line) for line in lines]
    reports = [r.report for r in _records(tmp_path) if r.report is not None]
    assert len(checkpoints) == len(reports) == 2
    assert [c.step for c in checkpoints] == [r.selected_step for r in reports]
    assert all(len(c.policy.logits) == cfg.env.num_prompts for c in checkpoints)


def test_checkpoints_need_save_env(tmp_path):
    run_experiment(tiny_config(seeds=[3]), tmp_path)
    assert not list(tmp_path.glob("checkpoints-*.jsonl"))


def test_saved_pairs(tmp_path):
    run_experiment(tiny_config(seeds=[0]), tmp_path, save_pairs=True)
    assert (tmp_path / storage.PAIRS).exists()


def test_failed_seed_is_reported(tmp_path):
    cfg = tiny_config(
        env={"num_prompts": 4, "num_responses": 1, "init_rm_pairs_per_prompt": 0}
    )
    assert run_experiment(cfg, tmp_path) == EXIT_RUNTIME
    status = json.loads((tmp_path / storage.STATUS).read_text())
    assert status["complete"] is False
    assert all(s["exit_code"] == EXIT_RUNTIME for s in status["seeds"])


def test_run_seed_uses_the_seed_as_world_seed():
    cfg = tiny_config()
    a = run_seed(cfg, 5)
    reseeded = cfg.model_copy(update={"env": cfg.env.model_copy(update={"seed": 9})})
    b = run_seed(reseeded, 5)
    assert a.status.env_fingerprint == b.status.env_fingerprint
    assert a.rows == b.rows


def test_ablation_variants_hold_everything_else_fixed():
    cfg = tiny_config()
    variants = ablation_variants(cfg, "rm_data")
    assert [v for v, _ in variants] == ABLATION_AXES["rm_data"]
    for value, variant in variants:
        assert variant.loop.rm_data == value
        assert variant.env == cfg.env
        assert variant.loop.dpo == cfg.loop.dpo
    with pytest.raises(ValueError):
        ablation_variants(cfg, "bogus")


def test_filter_ablation(tmp_path):
    cfg = tiny_config()
    assert run_ablation(cfg, "filter", tmp_path) == EXIT_OK
    summary = _summary(tmp_path)
    assert set(summary.variant) == {"lqf", "hqs", "dst", "none"}
    base = summary[
        (summary.iteration == 0) & (summary.metric == "expected_true_reward")
    ]
    assert len(base) == 8
    assert (base.groupby("seed")["value"].nunique() == 1).all()

    tests = pd.read_csv(tmp_path / storage.SIGN_TESTS)
    assert tests.variant.tolist() == ["hqs", "dst", "none"]
    assert (tests.reference == "lqf").all()
    assert (tests.seeds == 2).all()
    assert ((tests.p_value >= 0) & (tests.p_value <= 1)).all()
