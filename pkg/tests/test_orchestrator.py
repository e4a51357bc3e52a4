import math

import jax.random as jran
import numpy as np
import pytest

from app.fl import simulate
from app.fl.run import validate_config
from models import aggregators
from utils.common import RoundFailure
from utils.types import AttackConfig, ExperimentConfig, FLConfig


def _config(**attack) -> ExperimentConfig:
    return ExperimentConfig(
        fl=FLConfig(total_agents=10, agents_per_round=4, rounds=20),
        attack=AttackConfig(type="fta", malicious_agents=2, **attack),
    )


def _rosters(cfg: ExperimentConfig, KEY):
    ledger = simulate.AttackLedger()
    malicious_ids = simulate.choose_malicious(KEY, cfg)
    out = []
    for t in range(cfg.fl.rounds):
        roster, malicious_id = simulate.schedule(t, cfg, jran.fold_in(KEY, t), malicious_ids, ledger)
        if malicious_id is not None:
            ledger.attacks += 1
        out.append((roster, malicious_id))
    return malicious_ids, out


def test_malicious_agents_are_distinct_and_sorted(KEY):
    cfg = _config()
    ids = simulate.choose_malicious(KEY, cfg)
    assert len(ids) == 2 and len(set(ids)) == 2 and list(ids) == sorted(ids)
    assert all(0 <= i < 10 for i in ids)
    assert simulate.choose_malicious(KEY, cfg.replace(attack=AttackConfig())) == ()


def test_rosters_are_well_formed(KEY):
    malicious_ids, rounds = _rosters(_config(), KEY)
    for roster, malicious_id in rounds:
        assert len(roster) == 4 and len(set(roster)) == 4 and list(roster) == sorted(roster)
        assert malicious_id in malicious_ids
        # exactly one malicious agent per attack round
        assert len(set(roster) & set(malicious_ids)) == 1


def test_schedule_is_reproducible(KEY):
    assert _rosters(_config(), KEY) == _rosters(_config(), KEY)


def test_no_attack_means_all_benign_rounds(KEY):
    cfg = _config().replace(attack=AttackConfig())
    _, rounds = _rosters(cfg, KEY)
    assert all(malicious_id is None for _, malicious_id in rounds)


def test_fixed_frequency_with_warm_up(KEY):
    cfg = _config(start_round=5, attack_every=10)
    _, rounds = _rosters(cfg, KEY)
    attacked = [t for t, (_, malicious_id) in enumerate(rounds) if malicious_id is not None]
    assert attacked == [5, 15]


def test_one_attack_then_nine_benign_rounds(KEY):
    cfg = _config(attack_every=10).replace(fl=FLConfig(total_agents=10, agents_per_round=4, rounds=10))
    _, rounds = _rosters(cfg, KEY)
    assert [malicious_id is not None for _, malicious_id in rounds] == [True] + [False] * 9


def test_few_shot_budget(KEY):
    _, rounds = _rosters(_config(mode="few-shot", attack_num=3), KEY)
    assert [malicious_id is not None for _, malicious_id in rounds[:4]] == [True, True, True, False]
    assert sum(malicious_id is not None for _, malicious_id in rounds) == 3

    _, rounds = _rosters(_config(mode="few-shot", attack_num=0), KEY)
    assert all(malicious_id is None for _, malicious_id in rounds)


def test_few_shot_stops_once_reached():
    cfg = _config(mode="few-shot", attack_num=5)
    assert simulate.is_attack_round(0, cfg, simulate.AttackLedger(attacks=1))
    assert not simulate.is_attack_round(0, cfg, simulate.AttackLedger(attacks=1, stopped=True))
    assert not simulate.is_attack_round(0, cfg, simulate.AttackLedger(attacks=5))


def test_worker_count_comes_from_the_environment(monkeypatch):
    monkeypatch.delenv("FLSIM_MAX_WORKERS", raising=False)
    assert simulate.max_workers() == 1
    monkeypatch.setenv("FLSIM_MAX_WORKERS", "3")
    assert simulate.max_workers() == 3
    for bad in ("0", "many"):
        monkeypatch.setenv("FLSIM_MAX_WORKERS", bad)
        with pytest.raises(ValueError):
            simulate.max_workers()


def _rows(result: simulate.SimulationResult):
    return [report.csv_row(with_wall_time=False) for report in result.reports]


def test_zero_rounds_return_the_initial_model(small_config):
    small_config["fl"]["rounds"] = 0
    small_config["attack"]["attack_num"] = 0
    result = simulate.run_experiment(validate_config(small_config), progress=False)
    assert result.reports == ()
    np.testing.assert_array_equal(result.global_net.flat_params, result.initial_net.flat_params)


def test_runs_are_deterministic(small_config):
    cfg = validate_config(small_config)
    a = simulate.run_experiment(cfg, progress=False)
    b = simulate.run_experiment(cfg, progress=False)
    assert _rows(a) == _rows(b)
    np.testing.assert_array_equal(a.global_net.flat_params, b.global_net.flat_params)
    np.testing.assert_array_equal(a.generator.flat_params, b.generator.flat_params)


def test_threaded_agents_give_the_same_run(small_config, monkeypatch):
    cfg = validate_config(small_config)
    sequential = simulate.run_experiment(cfg, progress=False)
    monkeypatch.setenv("FLSIM_MAX_WORKERS", "3")
    threaded = simulate.run_experiment(cfg, progress=False)
    assert _rows(sequential) == _rows(threaded)


def test_round_reports(small_config):
    result = simulate.run_experiment(validate_config(small_config), progress=False)
    assert [r.round for r in result.reports] == [0, 1, 2]
    for report in result.reports:
        assert 0 <= report.benign_acc <= 1
        assert set(report.accepted) <= set(report.roster)
        assert [i for i, _ in report.update_norms] == list(report.roster)
    attacked = [r for r in result.reports if r.malicious_id is not None]
    # attack_num=2 under fixed frequency still attacks every round
    assert len(attacked) == 3
    assert all(0 <= r.backdoor_acc <= 1 and -1 <= r.cosine_sim <= 1 for r in attacked)
    assert result.generator is not None


def test_benign_run_has_no_backdoor_column(small_config):
    small_config["attack"] = {"type": "none"}
    result = simulate.run_experiment(validate_config(small_config), progress=False)
    assert result.generator is None and result.malicious_ids == ()
    for report in result.reports:
        assert report.malicious_id is None
        assert math.isnan(report.backdoor_acc) and math.isnan(report.cosine_sim)


def test_few_shot_stops_after_the_threshold(small_config):
    small_config["attack"].update(mode="few-shot", attack_num=3, ba_stop_threshold=0.)
    result = simulate.run_experiment(validate_config(small_config), progress=False)
    assert [r.malicious_id is not None for r in result.reports] == [True, False, False]


def test_patch_attack_runs(small_config):
    small_config["attack"]["type"] = "patch"
    result = simulate.run_experiment(validate_config(small_config), progress=False)
    assert result.generator is None
    assert all(not math.isnan(r.backdoor_acc) for r in result.reports)


@pytest.mark.parametrize("rule", ["median", "multi-krum", "flame"])
def test_robust_aggregators_run(small_config, rule):
    small_config["aggregator"] = {"rule": rule, "krum_byzantine": 0}
    result = simulate.run_experiment(validate_config(small_config), progress=False)
    assert len(result.reports) == 3


def test_errors_inside_a_round_carry_the_round(small_config, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("overflow")
    monkeypatch.setattr(aggregators, "aggregate", boom)
    with pytest.raises(RoundFailure) as e:
        simulate.run_experiment(validate_config(small_config), progress=False)
    assert e.value.round == 0
