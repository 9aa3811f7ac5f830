import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rank_correlation
from load_model import ChargeLog
import simulator
from simulator import (ConfigError, GridCell, RunningStats, SimConfig, bootstrap, max_ratio, rsd, run_cycle,
                       run_experiment, run_trial, with_params)


def test_defaults_match_the_reference_setup():
    cfg = SimConfig()
    assert cfg.network_size == 4096
    assert (cfg.arrival_ratio, cfg.departure_ratio) == (0.01, 0.01)
    assert cfg.items_per_node == 10
    assert cfg.node_request_rate == 0.025
    assert (cfg.params.alpha, cfg.params.beta, cfg.params.gamma) == (1.4, 0.25, 2.0)
    assert cfg.params.k_schedule == ((1, 4), (11, 2), (21, 1))
    assert cfg.cycles == 50


@pytest.mark.parametrize('changes', [
    {'network_size': 1},
    {'arrival_ratio': 1.5},
    {'capacity_shape': 1.0},
    {'join_policy': 'nearest'},
    {'m_bits': 4},
])
def test_invalid_configs_are_rejected(changes):
    with pytest.raises(ConfigError):
        SimConfig(**changes)


def test_with_params_reaches_balance_params():
    cfg = with_params(SimConfig(), beta=0.1, cycles=7)
    assert cfg.params.beta == 0.1
    assert cfg.cycles == 7
    with pytest.raises(ConfigError, match='γ ≥ 2'):
        with_params(SimConfig(), gamma=1.0)


def test_bootstrap_builds_the_population(tiny_config):
    state = bootstrap(tiny_config)
    assert len(state.nodes) == 128
    assert len(state.ring) == 8
    assert state.items_published == 512 == state.ring.item_count()
    assert all(not n.msg_counters for n in state.nodes.values())
    state.ring.check_invariants()


def test_same_seed_same_state(tiny_config):
    first, second = bootstrap(tiny_config), bootstrap(tiny_config)
    assert first.digest() == second.digest()
    for cycle in range(1, 4):
        assert repr(run_cycle(first, cycle)) == repr(run_cycle(second, cycle))
    assert first.digest() == second.digest()


def test_different_seeds_differ(tiny_config):
    assert bootstrap(tiny_config, seed=1).digest() != bootstrap(tiny_config, seed=2).digest()


def test_quiet_network_has_uniform_load(tiny_config):
    cfg = replace(tiny_config, items_per_node=0, node_request_rate=0, arrival_ratio=0, departure_ratio=0,
                  inter_balancing=False, intra_balancing=False)
    state = bootstrap(cfg)
    record = run_cycle(state, 1)
    assert record.max_cluster_load_ratio == 1.0
    assert record.rsd_cluster_load == 0.0
    assert record.lookups == 0
    assert math.isnan(record.hit_rate)


def test_balancing_toggles_are_respected(tiny_config):
    cfg = replace(tiny_config, inter_balancing=False, intra_balancing=False)
    trial = run_trial(cfg)
    assert all(r.items_moved_inter == 0 and r.splits == 0 and r.moves == 0 for r in trial.records)
    assert all(r.items_moved_intra == 0 for r in trial.records)


def test_records_carry_every_cycle(tiny_config):
    seen = []
    trial = run_trial(tiny_config, on_cycle=seen.append)
    assert [r.cycle for r in trial.records] == list(range(1, 7))
    assert seen == trial.records
    assert sum(r.lookups for r in trial.records) > 0
    for record in trial.records:
        assert record.max_cluster_load_ratio >= 1.0
        assert record.total_items == 512
        assert math.isnan(record.hit_rate) or 0.0 <= record.hit_rate <= 1.0


def test_churn_follows_the_ledger(tiny_config):
    cfg = replace(tiny_config, arrival_ratio=0.05, departure_ratio=0.02, cycles=5)
    state = bootstrap(cfg)
    expected = len(state.nodes)
    for cycle in range(1, 6):
        arrivals = round(0.05 * expected)
        departures = round(0.02 * expected)
        record = run_cycle(state, cycle)
        expected += arrivals - departures
        assert record.n_nodes == expected
    assert state.ring.item_count() == state.items_published


def test_departures_never_empty_the_network():
    cfg = SimConfig(network_size=4, cluster_size=2, items_per_node=2, departure_ratio=1.0, arrival_ratio=0,
                    cycles=3, m_bits=32, check_invariants=True)
    trial = run_trial(cfg)
    assert trial.records[-1].n_nodes == 1


def test_publish_on_join_grows_the_item_count(tiny_config):
    cfg = replace(tiny_config, arrival_ratio=0.1, departure_ratio=0.0, publish_on_join=True, cycles=3)
    state = bootstrap(cfg)
    record = run_cycle(state, 1)
    assert record.total_items == 512 + round(0.1 * 128) * 4


def test_aggregates_average_the_final_cycles(tiny_config):
    trial = run_trial(replace(tiny_config, cycles=12))
    tail = trial.records[-10:]
    expected = sum(r.max_cluster_load_ratio for r in tail) / 10
    assert trial.aggregates['max_cluster_load_ratio'] == pytest.approx(expected)


def test_failed_cell_does_not_stop_the_others(tiny_config, monkeypatch):
    real_run_trial = simulator.run_trial

    def flaky(cfg, seed=None, on_cycle=None):
        if cfg.fanout == 2:
            raise RuntimeError("boom")
        return real_run_trial(cfg, seed, on_cycle)

    monkeypatch.setattr(simulator, 'run_trial', flaky)
    cfg = replace(tiny_config, cycles=2)
    grid = [GridCell('ok', cfg), GridCell('bad', replace(cfg, fanout=2))]
    results = run_experiment(grid, trials=2, jobs=1)
    assert results[0].error is None
    assert [t.seed for t in results[0].trials] == [cfg.seed, cfg.seed + 1]
    assert 'boom' in results[1].error
    assert results[1].trials == []


def test_experiment_stats_span_trials(tiny_config):
    cfg = replace(tiny_config, cycles=3)
    (result,) = run_experiment([GridCell('base', cfg)], trials=2, jobs=1)
    rows = result.cycle_stats()
    assert [cycle for cycle, _, _ in rows] == [1, 2, 3]
    _, means, sds = rows[0]
    values = [t.records[0].rsd_cluster_load for t in result.trials]
    assert means['rsd_cluster_load'] == pytest.approx(sum(values) / 2)
    assert sds['rsd_cluster_load'] == pytest.approx(abs(values[0] - values[1]) / 2)


def test_empty_grid_is_rejected():
    with pytest.raises(ConfigError):
        run_experiment([], trials=1)


def test_ratio_of_all_zero_loads_is_undefined():
    assert math.isnan(max_ratio([0, 0, 0]))
    assert max_ratio([1, 1, 4]) == 2.0


@settings(max_examples=100)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 1e4)), min_size=1, max_size=200))
def test_streaming_and_two_pass_rsd_agree(values):
    stats = RunningStats()
    for value in values:
        stats.push(value)
    assert stats.rsd == pytest.approx(rsd(values), rel=1e-6, abs=1e-9)


def test_capacities_follow_the_pareto_mean():
    cfg = SimConfig(capacity_shape=2.0, capacity_scale=50.0)
    state = simulator.SimulationState(cfg, seed=3)
    capacities = [state.new_node().capacity for _ in range(20_000)]
    expected = cfg.capacity_scale * cfg.capacity_shape / (cfg.capacity_shape - 1)
    assert min(capacities) >= cfg.capacity_scale
    assert abs(sum(capacities) / len(capacities) - expected) <= 0.05 * expected


def test_node_load_tracks_held_items(tiny_config):
    cfg = replace(tiny_config, items_per_node=10, node_request_rate=0.01, arrival_ratio=0, departure_ratio=0,
                  inter_balancing=False, intra_balancing=False)
    state = bootstrap(cfg)
    run_cycle(state, 1)
    ordinary = [n for c in state.ring for n in c.members.values() if n not in c.supernodes]
    loads = [n.window.node_load for n in ordinary]
    items = [len(n.held_items) for n in ordinary]
    assert rank_correlation(items, loads) > 0.9


def test_trial_records_charges_when_given_a_log(tiny_config):
    log = ChargeLog()
    trial = run_trial(replace(tiny_config, cycles=3), charge_log=log)
    assert len(trial.records) == 3
    assert {1, 2, 3} <= {cycle for cycle, _, _, _ in log.entries}
    assert log.replay(2)


@pytest.mark.slow
def test_inter_balancing_does_not_cascade_splits():
    cfg = SimConfig(network_size=1024, cluster_size=64, cycles=15, items_per_node=10, m_bits=32)
    trial = run_trial(cfg)
    initial = round(cfg.network_size / cfg.cluster_size)
    assert max(r.n_clusters for r in trial.records) <= 2 * initial
    assert sum(r.splits for r in trial.records[5:]) <= initial // 2
