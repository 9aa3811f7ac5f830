import math
import os

import pytest

from metrics_io import (ResultRow, ResultTable, ResultsError, build_table, dump_config, load_config, load_manifest,
                        parse_k_schedule, read_results, summarize, write_results)
from simulator import (METRIC_FIELDS, CellResult, ConfigError, GridCell, SimConfig, TrialResult, run_trial,
                       with_params)


def write(path, text):
    path.write_text(text)
    return str(path)


def metric_row(cell, cycle, value=1.5, delta=None):
    means = {name: value for name in METRIC_FIELDS}
    sds = {name: 0.25 for name in METRIC_FIELDS}
    return ResultRow(cell, cycle, dict(delta or {}), means, sds)


def test_empty_config_gives_defaults(tmp_path):
    assert load_config(write(tmp_path / "empty.conf", "")) == SimConfig()


def test_config_keys_override_defaults(tmp_path):
    cfg = load_config(write(tmp_path / "c.conf", "# comment\nnetwork_size = 1024\nbeta = 0.3\n"
                                                 "inter_balancing = false\nk_schedule = 1:3, 5:1\n"))
    assert cfg.network_size == 1024
    assert cfg.params.beta == 0.3
    assert cfg.inter_balancing is False
    assert cfg.params.k_schedule == ((1, 3), (5, 1))


def test_beta_out_of_range_names_the_bound(tmp_path):
    with pytest.raises(ConfigError, match=r"β ∈ \[0,0.5\)"):
        load_config(write(tmp_path / "c.conf", "beta = 0.6\n"))


def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(write(tmp_path / "c.conf", "netwrok_size = 10\n"))


def test_badly_typed_value_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "c.conf", "cycles = many\n"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "d.conf", "check_invariants = maybe\n"))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        load_config(str(tmp_path / "absent.conf"))


def test_config_round_trip(tmp_path):
    cfg = with_params(SimConfig(), network_size=2048, alpha=1.6, beta=0.5, publish_on_join=True,
                      k_schedule=((1, 5), (7, 3)), join_policy='proportional-to-size')
    path = str(tmp_path / "round.conf")
    dump_config(cfg, path)
    assert load_config(path) == cfg


def test_shipped_default_config_is_the_default():
    here = os.path.dirname(__file__)
    assert load_config(os.path.join(here, '..', 'configs', 'default.conf')) == SimConfig()


def test_k_schedule_format():
    assert parse_k_schedule("1:4, 11:2, 21:1") == ((1, 4), (11, 2), (21, 1))
    with pytest.raises(ConfigError):
        parse_k_schedule("1-4")


def test_manifest_cells_and_sweeps(tmp_path):
    write(tmp_path / "base.conf", "network_size = 512\n")
    path = write(tmp_path / "m.manifest", "name = demo\nfigure_ref = demo plot\ntrials = 3\nbase = base.conf\n"
                                          "base.cycles = 20\nsweep.beta = 0.1, 0.3\n"
                                          "cell.on.inter_balancing = true\ncell.off.inter_balancing = false\n")
    manifest = load_manifest(path)
    assert manifest.name == "demo"
    assert manifest.trials == 3
    labels = [cell.label for cell in manifest.grid]
    assert labels == ["on/beta=0.1", "on/beta=0.3", "off/beta=0.1", "off/beta=0.3"]
    off_high = manifest.grid[3].config
    assert off_high.network_size == 512
    assert off_high.cycles == 20
    assert off_high.params.beta == 0.3
    assert off_high.inter_balancing is False
    assert manifest.grid[3].delta == {'inter_balancing': 'false', 'beta': '0.3'}


def test_manifest_without_cells_runs_the_base(tmp_path):
    manifest = load_manifest(write(tmp_path / "m.manifest", "name = plain\n"))
    assert [c.label for c in manifest.grid] == ["base"]
    assert manifest.grid[0].config == SimConfig()


def test_manifest_rejects_invalid_cells_up_front(tmp_path):
    with pytest.raises(ConfigError, match="cell"):
        load_manifest(write(tmp_path / "m.manifest", "name = x\nsweep.gamma = 1.5, 2.5\n"))
    with pytest.raises(ConfigError, match="unknown key"):
        load_manifest(write(tmp_path / "n.manifest", "name = x\ncolour = blue\n"))


def test_shipped_manifests_are_valid():
    directory = os.path.join(os.path.dirname(__file__), '..', 'manifests')
    names = sorted(os.listdir(directory))
    assert names
    for name in names:
        assert load_manifest(os.path.join(directory, name)).grid


def test_beta_sweep_crosses_gamma_and_grows_by_size():
    path = os.path.join(os.path.dirname(__file__), '..', 'manifests', 'beta_sweep.manifest')
    grid = load_manifest(path).grid
    assert len(grid) == 3 * 5 * 3
    assert {c.config.params.gamma for c in grid} == {2.0, 2.5, 3.0}
    assert {c.config.params.beta for c in grid} == {0.1, 0.2, 0.3, 0.4, 0.5}
    policies = {c.label.split('/')[0]: c.config.join_policy for c in grid}
    assert policies == {'stable': 'uniform', 'shrinking': 'uniform', 'growing': 'proportional-to-size'}


def test_split_floor_round_trips_through_config(tmp_path):
    cfg = load_config(write(tmp_path / "c.conf", "split_min_members = 12\n"))
    assert cfg.params.split_min_members == 12
    dump_config(cfg, str(tmp_path / "out.conf"))
    assert load_config(str(tmp_path / "out.conf")) == cfg


def test_empty_table_is_not_written(tmp_path):
    path = tmp_path / "out.csv"
    with pytest.raises(ResultsError):
        write_results(ResultTable("x"), str(path))
    assert not path.exists()


def test_one_row_table_has_two_lines(tmp_path):
    path = tmp_path / "out.csv"
    write_results(ResultTable("x", [], [metric_row("base", 1)]), str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("experiment,cell,cycle,n_nodes,n_nodes_sd")


def test_numbers_use_six_significant_digits(tmp_path):
    path = tmp_path / "out.csv"
    write_results(ResultTable("x", [], [metric_row("base", 1, value=1 / 3)]), str(path))
    assert ",0.333333,0.25," in path.read_text()


def test_unwritable_path_leaves_nothing(tmp_path):
    with pytest.raises(ResultsError):
        write_results(ResultTable("x", [], [metric_row("base", 1)]), str(tmp_path / "missing" / "out.csv"))
    assert not (tmp_path / "missing").exists()


def test_write_then_read_gives_the_same_table(tmp_path):
    table = ResultTable("sweep", ["beta"], [metric_row("a", 1, 2.5, {"beta": "0.1"}),
                                            metric_row("a", 2, 3.25, {"beta": "0.1"}),
                                            metric_row("b", 1, math.nan, {"beta": "0.3"})])
    path = str(tmp_path / "out.csv")
    write_results(table, path)
    parsed = read_results(path)
    assert parsed.experiment == "sweep"
    assert parsed.delta_keys == ["beta"]
    assert [(r.cell, r.cycle, r.delta) for r in parsed.rows] == [(r.cell, r.cycle, r.delta) for r in table.rows]
    assert parsed.rows[1].means == table.rows[1].means
    assert math.isnan(parsed.rows[2].means['hit_rate'])

    again = str(tmp_path / "again.csv")
    write_results(parsed, again)
    with open(path, 'rb') as a, open(again, 'rb') as b:
        assert a.read() == b.read()


def test_reading_a_foreign_csv_fails(tmp_path):
    with pytest.raises(ResultsError):
        read_results(write(tmp_path / "x.csv", "a,b\n1,2\n"))


def test_build_table_skips_failed_cells(tiny_config):
    trial = run_trial(tiny_config)
    ok = CellResult(GridCell("ok", tiny_config, {"beta": "0.25"}), trials=[trial])
    bad = CellResult(GridCell("bad", tiny_config, {"alpha": "1.2"}), error="boom")
    table = build_table("demo", [ok, bad])
    assert table.delta_keys == ["beta", "alpha"]
    assert table.cells() == ["ok"]
    assert len(table) == tiny_config.cycles


def test_summary_averages_final_cycles():
    rows = [metric_row("a", cycle, value=float(cycle)) for cycle in range(1, 21)]
    summary = summarize(ResultTable("x", [], rows))
    mean, sd = summary["a"]["max_cluster_load_ratio"]
    assert mean == pytest.approx(15.5)
    assert sd == 0.25


def test_trial_without_records_has_undefined_aggregates():
    assert all(math.isnan(v) for v in TrialResult(seed=1, records=[]).aggregates.values())
