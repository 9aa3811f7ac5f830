"""
Command-line entry point: run, experiment, validate, summarize.
"""
import logging
import os
import sys
from argparse import ArgumentParser
from dataclasses import replace
from typing import List, Optional

from dotenv import load_dotenv

from load_model import ChargeLog
from metrics_io import (ResultsError, build_table, format_number, format_summary, load_config,
                        load_manifest, read_results, summarize, write_results)
from overlay import OverlayError
from simulator import (CellResult, ConfigError, GridCell, SimConfig, SimulationError, run_experiment,
                       run_trial)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def configure_logging(level: Optional[str] = None) -> None:
    level = level or os.getenv('MHP2P_LOG_LEVEL', 'WARNING')
    logging.basicConfig(stream=sys.stderr, format='%(levelname)s %(message)s')
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    logging.getLogger().setLevel(numeric_level)


def resolve_seed(flag: Optional[int]) -> Optional[int]:
    """--seed wins over MHP2P_SEED; None keeps the config's seed"""
    if flag is not None:
        return flag
    env_seed = os.getenv('MHP2P_SEED')
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"MHP2P_SEED={env_seed!r} is not an integer")
    return None


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='mhp2p', description='Cycle-driven simulator of a clustered Chord cloudlet overlay')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run one simulation and write its per-cycle CSV')
    run.add_argument('--config', help='Config file (defaults apply when omitted)')
    run.add_argument('--seed', type=int, help='Seed, overrides config and MHP2P_SEED')
    run.add_argument('--out', default='run.csv', help='Result CSV path')
    run.add_argument('--quiet', action='store_true', help='No per-cycle counter line')
    run.add_argument('--charge-log', help='Also write every message charge to this CSV')

    experiment = commands.add_parser('experiment', help='Run a manifest grid')
    experiment.add_argument('--manifest', required=True, help='Experiment manifest file')
    experiment.add_argument('--out', default='results', help='Output directory')
    experiment.add_argument('--jobs', type=int, help='Parallel trial processes')
    experiment.add_argument('--seed', type=int, help='Seed base for every cell')
    experiment.add_argument('--quiet', action='store_true', help='No summary on standard output')

    validate = commands.add_parser('validate', help='Check a config or manifest')
    validate.add_argument('--config', help='Config file')
    validate.add_argument('--manifest', help='Experiment manifest file')

    summary = commands.add_parser('summarize', help='Per-cell means ± sd of a result CSV')
    summary.add_argument('path', help='Result CSV')
    return parser


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else SimConfig()
    seed = resolve_seed(args.seed)
    if seed is not None:
        cfg = replace(cfg, seed=seed)

    def progress(record):
        print(f"\rcycle {record.cycle}/{cfg.cycles} nodes={record.n_nodes} clusters={record.n_clusters}",
              end='', file=sys.stderr, flush=True)

    charge_log = ChargeLog() if args.charge_log else None
    trial = run_trial(cfg, on_cycle=None if args.quiet else progress, charge_log=charge_log)
    if not args.quiet:
        print(file=sys.stderr)
    cell = CellResult(GridCell('run', cfg), trials=[trial])
    write_results(build_table('run', [cell]), args.out)
    if charge_log is not None:
        try:
            charge_log.export_csv(args.charge_log)
        except OSError as e:
            raise ResultsError(f"cannot write charge log {args.charge_log}: {e}") from e
        logging.info(f"wrote {len(charge_log.entries)} charges to {args.charge_log}")
    for name, value in trial.aggregates.items():
        print(f"{name} = {format_number(value)}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    manifest = load_manifest(args.manifest)
    grid = manifest.grid
    seed = resolve_seed(args.seed)
    if seed is not None:
        grid = [GridCell(c.label, replace(c.config, seed=seed), c.delta) for c in grid]
    if args.jobs is not None and args.jobs < 1:
        raise ConfigError(f"--jobs={args.jobs} violates jobs ≥ 1")
    jobs = args.jobs or min(len(grid), os.cpu_count() or 1)

    results = run_experiment(grid, manifest.trials, jobs)
    os.makedirs(args.out, exist_ok=True)
    table = build_table(manifest.name, results)
    path = os.path.join(args.out, f"{manifest.name}.csv")
    if table.rows:
        write_results(table, path)
        logging.info(f"wrote {len(table)} rows to {path}")
        if not args.quiet:
            print(format_summary(summarize(table)))

    failed = [r for r in results if r.error is not None]
    for result in failed:
        print(f"error: cell: {result.cell.label}: {result.error}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_validate(args) -> int:
    if not args.config and not args.manifest:
        raise ConfigError("validate needs --config or --manifest")
    if args.config:
        load_config(args.config)
        print(f"{args.config}: ok")
    if args.manifest:
        manifest = load_manifest(args.manifest)
        print(f"{args.manifest}: ok ({len(manifest.grid)} cells, {manifest.trials} trials)")
    return EXIT_OK


def cmd_summarize(args) -> int:
    table = read_results(args.path)
    print(format_summary(summarize(table)))
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'experiment': cmd_experiment,
    'validate': cmd_validate,
    'summarize': cmd_summarize,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ResultsError as e:
        print(f"error: results: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SimulationError, OverlayError) as e:
        print(f"error: simulation: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logging.error(f"unexpected failure in {args.command}: {e}")
        print(f"error: runtime: {e}", file=sys.stderr)
        return EXIT_RUNTIME
