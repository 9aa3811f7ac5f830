"""
Config files, experiment manifests and result CSVs.

Configs and manifests are flat `key = value` files with `#` comments, read
through python-dotenv. Results are CSV with one row per (cell, cycle).
"""
import csv
import itertools
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

from dotenv import dotenv_values

from inter_cluster_balancer import BalanceParams
from simulator import (FINAL_WINDOW, METRIC_FIELDS, CellResult, ConfigError, GridCell, SimConfig,
                       with_params)

PARAM_KEYS = tuple(f.name for f in fields(BalanceParams))
CONFIG_KEYS = tuple(f.name for f in fields(SimConfig) if f.name != 'params') + PARAM_KEYS
_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig) if f.name != 'params'}
_FIELD_TYPES.update({'alpha': float, 'beta': float, 'gamma': float, 'k_schedule': tuple,
                     'split_min_members': int})
_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}

SUMMARY_FIELDS = ('max_cluster_load_ratio', 'rsd_cluster_load', 'max_cluster_items_ratio',
                  'node_rate_ratio', 'node_rate_rsd', 'items_moved_inter', 'items_moved_intra',
                  'hit_rate', 'n_nodes')


class ResultsError(ValueError):
    """A result table could not be written or parsed"""


def parse_k_schedule(raw: str) -> Tuple[Tuple[int, int], ...]:
    """'1:4, 11:2, 21:1' -> ((1, 4), (11, 2), (21, 1))"""
    schedule = []
    for part in raw.split(','):
        part = part.strip()
        if not part:
            continue
        try:
            start, k = part.split(':')
            schedule.append((int(start), int(k)))
        except ValueError:
            raise ConfigError(f"k_schedule entry {part!r} is not cycle:k")
    return tuple(schedule)


def format_k_schedule(schedule: Sequence[Tuple[int, int]]) -> str:
    return ', '.join(f"{start}:{k}" for start, k in schedule)


def parse_value(key: str, raw: Optional[str]):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if raw is None:
        raise ConfigError(f"config key {key!r} has no value")
    raw = raw.strip()
    kind = _FIELD_TYPES[key]
    if kind is tuple:
        return parse_k_schedule(raw)
    if kind is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"{key}={raw!r} is not a boolean")
    if kind is str:
        return raw
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}={raw!r} is not a valid {kind.__name__}")


def format_value(key: str, value) -> str:
    if key == 'k_schedule':
        return format_k_schedule(value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_delta(base: SimConfig, delta: Dict[str, Optional[str]]) -> SimConfig:
    """Apply raw `key = value` overrides to a config, validating every key"""
    changes = {key: parse_value(key, raw) for key, raw in delta.items()}
    try:
        return with_params(base, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _read_pairs(path: str) -> Dict[str, Optional[str]]:
    if not os.path.isfile(path):
        raise ConfigError(f"file not found: {path}")
    return dict(dotenv_values(path, interpolate=False))


def load_config(path: str) -> SimConfig:
    return apply_delta(SimConfig(), _read_pairs(path))


def config_items(cfg: SimConfig) -> List[Tuple[str, str]]:
    values = []
    for key in CONFIG_KEYS:
        value = getattr(cfg.params, key) if key in PARAM_KEYS else getattr(cfg, key)
        values.append((key, format_value(key, value)))
    return values


def dump_config(cfg: SimConfig, path: str) -> None:
    with open(path, 'w') as handle:
        handle.write("# simulation config\n")
        for key, value in config_items(cfg):
            handle.write(f"{key} = {value}\n")


@dataclass
class ExperimentManifest:
    name: str
    figure_ref: str
    base: SimConfig
    cells: List[GridCell]
    trials: int = 5

    @property
    def grid(self) -> List[GridCell]:
        return self.cells


def _expand_grid(base: SimConfig, cells: Dict[str, Dict[str, str]],
                 sweeps: Dict[str, List[str]]) -> List[GridCell]:
    labelled = list(cells.items()) or [('base', {})]
    sweep_keys = list(sweeps)
    combos = list(itertools.product(*(sweeps[k] for k in sweep_keys))) if sweep_keys else [()]
    grid = []
    for label, cell_delta in labelled:
        for combo in combos:
            delta = dict(cell_delta)
            delta.update(zip(sweep_keys, combo))
            parts = [label] if cells else []
            parts += [f"{k}={v}" for k, v in zip(sweep_keys, combo)]
            cell_label = '/'.join(parts) or label
            try:
                config = apply_delta(base, delta)
            except ConfigError as e:
                raise ConfigError(f"cell {cell_label!r}: {e}") from e
            grid.append(GridCell(cell_label, config, delta))
    return grid


def load_manifest(path: str) -> ExperimentManifest:
    """Parse a manifest; every cell is validated before anything runs.

    Keys: name, figure_ref, trials, base (config path relative to the
    manifest), base.<key>, sweep.<key> = v1, v2, ..., cell.<label>.<key>.
    """
    pairs = _read_pairs(path)
    name = pairs.pop('name', None) or os.path.splitext(os.path.basename(path))[0]
    figure_ref = pairs.pop('figure_ref', None) or ''
    try:
        trials = int(pairs.pop('trials', None) or 5)
    except ValueError:
        raise ConfigError(f"manifest {path}: trials must be an integer")
    if trials < 1:
        raise ConfigError(f"manifest {path}: trials={trials} violates trials ≥ 1")

    base_path = pairs.pop('base', None)
    base = SimConfig()
    if base_path:
        base = load_config(os.path.join(os.path.dirname(path), base_path))

    overrides: Dict[str, str] = {}
    sweeps: Dict[str, List[str]] = {}
    cells: Dict[str, Dict[str, str]] = {}
    for key, raw in pairs.items():
        head, _, rest = key.partition('.')
        if head == 'base' and rest:
            overrides[rest] = raw
        elif head == 'sweep' and rest:
            values = [v.strip() for v in (raw or '').split(',') if v.strip()]
            if not values:
                raise ConfigError(f"manifest {path}: sweep over {rest!r} has no values")
            parse_value(rest, values[0])
            sweeps[rest] = values
        elif head == 'cell' and '.' in rest:
            label, _, cell_key = rest.partition('.')
            cells.setdefault(label, {})[cell_key] = raw
        else:
            raise ConfigError(f"manifest {path}: unknown key {key!r}")

    base = apply_delta(base, overrides)
    grid = _expand_grid(base, cells, sweeps)
    logging.info(f"manifest {name}: {len(grid)} cells x {trials} trials")
    return ExperimentManifest(name, figure_ref, base, grid, trials)


@dataclass
class ResultRow:
    cell: str
    cycle: int
    delta: Dict[str, str] = field(default_factory=dict)
    means: Dict[str, float] = field(default_factory=dict)
    sds: Dict[str, float] = field(default_factory=dict)


@dataclass
class ResultTable:
    experiment: str
    delta_keys: List[str] = field(default_factory=list)
    rows: List[ResultRow] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def header(self) -> List[str]:
        metric_columns = []
        for name in METRIC_FIELDS:
            metric_columns += [name, f"{name}_sd"]
        return ['experiment', 'cell', *self.delta_keys, 'cycle', *metric_columns]

    def cells(self) -> List[str]:
        return list(dict.fromkeys(row.cell for row in self.rows))

    def cell_rows(self, cell: str) -> List[ResultRow]:
        return [row for row in self.rows if row.cell == cell]


def build_table(experiment: str, results: Sequence[CellResult]) -> ResultTable:
    delta_keys: List[str] = []
    for result in results:
        for key in result.cell.delta:
            if key not in delta_keys:
                delta_keys.append(key)
    table = ResultTable(experiment, delta_keys)
    for result in results:
        if result.error is not None:
            continue
        for cycle, means, sds in result.cycle_stats():
            table.rows.append(ResultRow(result.cell.label, cycle, dict(result.cell.delta), means, sds))
    return table


def format_number(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return 'nan'
    return format(value, '.6g')


def write_results(table: ResultTable, path: str) -> None:
    """Write the table as CSV; the file appears whole or not at all"""
    if not table.rows:
        raise ResultsError(f"refusing to write an empty result table to {path}")
    directory = os.path.dirname(os.path.abspath(path))
    try:
        handle = tempfile.NamedTemporaryFile('w', newline='', dir=directory, suffix='.tmp', delete=False)
    except OSError as e:
        raise ResultsError(f"cannot write {path}: {e}") from e
    try:
        with handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(table.header())
            for row in table.rows:
                values = [table.experiment, row.cell, *(row.delta.get(k, '') for k in table.delta_keys), row.cycle]
                for name in METRIC_FIELDS:
                    values += [format_number(row.means[name]), format_number(row.sds[name])]
                writer.writerow(values)
        os.replace(handle.name, path)
    except Exception as e:
        if os.path.exists(handle.name):
            os.remove(handle.name)
        raise ResultsError(f"cannot write {path}: {e}") from e


def read_results(path: str) -> ResultTable:
    if not os.path.isfile(path):
        raise ResultsError(f"file not found: {path}")
    with open(path, newline='') as handle:
        reader = csv.DictReader(handle)
        columns = reader.fieldnames or []
        try:
            delta_keys = columns[2:columns.index('cycle')]
        except ValueError:
            raise ResultsError(f"{path}: no cycle column")
        missing = [name for name in METRIC_FIELDS if name not in columns]
        if missing:
            raise ResultsError(f"{path}: missing metric columns {missing}")
        table = None
        for line in reader:
            if table is None:
                table = ResultTable(line['experiment'], list(delta_keys))
            try:
                table.rows.append(ResultRow(
                    cell=line['cell'],
                    cycle=int(line['cycle']),
                    delta={k: line[k] for k in delta_keys if line[k] != ''},
                    means={name: float(line[name]) for name in METRIC_FIELDS},
                    sds={name: float(line[f"{name}_sd"]) for name in METRIC_FIELDS},
                ))
            except (TypeError, ValueError) as e:
                raise ResultsError(f"{path}, line {reader.line_num}: {e}") from e
    if table is None:
        raise ResultsError(f"{path}: no result rows")
    return table


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return sum(finite) / len(finite) if finite else math.nan


def summarize(table: ResultTable, names: Sequence[str] = SUMMARY_FIELDS) -> Dict[str, Dict[str, Tuple[float, float]]]:
    """Per cell: (mean, sd) of each metric over the final cycles"""
    summary = {}
    for cell in table.cells():
        tail = sorted(table.cell_rows(cell), key=lambda r: r.cycle)[-FINAL_WINDOW:]
        summary[cell] = {name: (_mean([r.means[name] for r in tail]), _mean([r.sds[name] for r in tail]))
                         for name in names}
    return summary


def format_summary(summary: Dict[str, Dict[str, Tuple[float, float]]]) -> str:
    lines = []
    for cell, metrics in summary.items():
        lines.append(cell)
        for name, (mean, sd) in metrics.items():
            lines.append(f"  {name:<24} {format_number(mean)} ± {format_number(sd)}")
    return '\n'.join(lines)
