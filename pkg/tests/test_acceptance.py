"""Desk-scale statistical checks: 4096 nodes, 50 cycles, several seeds."""
from dataclasses import replace

import numpy as np
import pytest

from conftest import rank_correlation
from metrics_io import build_table, write_results
from simulator import GridCell, SimConfig, run_experiment, run_trial, with_params

pytestmark = pytest.mark.slow

TRIALS = 5
BASE = SimConfig()


def final_mean(result, name):
    return float(np.nanmean([trial.aggregates[name] for trial in result.trials]))


def run_cells(cells):
    results = run_experiment(cells, TRIALS)
    assert all(r.error is None for r in results), [r.error for r in results]
    return {r.cell.label: r for r in results}


@pytest.fixture(scope='module')
def inter_on_off():
    return run_cells([GridCell('on', BASE), GridCell('off', replace(BASE, inter_balancing=False))])


@pytest.fixture(scope='module')
def intra_on_off():
    return run_cells([GridCell('on', BASE), GridCell('off', replace(BASE, intra_balancing=False))])


def test_inter_balancing_bounds_the_heaviest_cluster(inter_on_off):
    assert final_mean(inter_on_off['on'], 'max_cluster_load_ratio') <= 2.2
    assert final_mean(inter_on_off['off'], 'max_cluster_load_ratio') >= 3.0


def test_inter_balancing_halves_load_dispersion(inter_on_off):
    on = final_mean(inter_on_off['on'], 'rsd_cluster_load')
    off = final_mean(inter_on_off['off'], 'rsd_cluster_load')
    assert on < 0.5 * off


def test_inter_balancing_compresses_item_counts(inter_on_off):
    assert final_mean(inter_on_off['on'], 'max_cluster_items_ratio') <= 2.0
    assert final_mean(inter_on_off['off'], 'max_cluster_items_ratio') >= 3.0


def test_ratio_holds_across_request_rates():
    cells = [GridCell(str(rate), replace(BASE, node_request_rate=rate)) for rate in (0.0125, 0.025, 0.05)]
    for label, result in run_cells(cells).items():
        assert final_mean(result, 'max_cluster_load_ratio') <= 1.8, label


def test_larger_beta_moves_fewer_items():
    betas = [0.1, 0.2, 0.3, 0.4, 0.5]
    results = run_cells([GridCell(str(beta), with_params(BASE, beta=beta)) for beta in betas])
    moved = [final_mean(results[str(beta)], 'items_moved_inter') for beta in betas]
    assert rank_correlation(betas, moved) <= -0.9 + 1e-9


def test_intra_balancing_bounds_the_heaviest_node(intra_on_off):
    assert final_mean(intra_on_off['on'], 'node_rate_ratio') <= 2.5
    assert final_mean(intra_on_off['off'], 'node_rate_ratio') >= 3.0


def test_alpha_trades_balance_for_movement():
    alphas = [1.2, 1.4, 1.6, 1.8]
    results = run_cells([GridCell(str(alpha), with_params(BASE, alpha=alpha)) for alpha in alphas])
    ratios = [final_mean(results[str(a)], 'node_rate_ratio') for a in alphas]
    rsds = [final_mean(results[str(a)], 'node_rate_rsd') for a in alphas]
    moved = [final_mean(results[str(a)], 'items_moved_intra') for a in alphas]
    assert ratios == sorted(ratios)
    assert rsds == sorted(rsds)
    assert moved == sorted(moved, reverse=True)


@pytest.mark.parametrize('arrival, departure', [(0.03, 0.01), (0.01, 0.03)])
def test_population_follows_churn(arrival, departure):
    cfg = replace(BASE, arrival_ratio=arrival, departure_ratio=departure, check_invariants=True)
    trial = run_trial(cfg)
    expected = BASE.network_size * (1 + arrival - departure) ** BASE.cycles
    assert abs(trial.records[-1].n_nodes - expected) <= 0.1 * expected


def test_equal_seeds_give_identical_csv(tmp_path):
    cfg = replace(BASE, cycles=10)
    paths = []
    for name in ('first.csv', 'second.csv'):
        (result,) = run_experiment([GridCell('base', cfg)], trials=2, jobs=2)
        path = tmp_path / name
        write_results(build_table('determinism', [result]), str(path))
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
