"""
Cycle-driven simulation engine.

Each cycle runs churn, overlay upkeep, queries and maintenance charges,
then closes the load window and measures, then balances (intra before
inter). Balancing overhead lands on the counters of the following cycle.
"""
import hashlib
import logging
import math
import os
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flooding import DEFAULT_FANOUT, DEFAULT_TTL, MetadataItem, lookup, publish
from identifier_space import IdentifierSpace
from inter_cluster_balancer import BalanceParams, balance_cycle
from intra_cluster_balancer import RECORD_MAX_AGE, intra_balance_cycle
from load_model import ChargeLog, LoadModel, close_window, cluster_load, load_rate
from overlay import (JOIN_POLICIES, DuplicateClusterError, NodeState, OverlayError, Ring,
                     RoutingError, create_cluster, join_node, leave_node)

FINAL_WINDOW = 10


class ConfigError(ValueError):
    """A simulation config or experiment manifest is invalid"""


class SimulationError(RuntimeError):
    """A ledger or structural invariant broke during a run"""


@dataclass(frozen=True)
class SimConfig:
    network_size: int = 4096
    arrival_ratio: float = 0.01
    departure_ratio: float = 0.01
    items_per_node: float = 10.0
    node_request_rate: float = 0.025
    capacity_shape: float = 2.0
    capacity_scale: float = 50.0
    cycles: int = 50
    params: BalanceParams = field(default_factory=BalanceParams)
    seed: int = 1
    inter_balancing: bool = True
    intra_balancing: bool = True
    join_policy: str = 'uniform'
    cluster_size: int = 64
    roster_size: int = 3
    neighbor_degree: int = 6
    fanout: int = DEFAULT_FANOUT
    ttl: int = DEFAULT_TTL
    mu: float = 1.0
    nu: float = 2.0
    m_bits: int = 64
    record_max_age: int = RECORD_MAX_AGE
    publish_on_join: bool = False
    check_invariants: bool = False

    def __post_init__(self):
        checks = [
            (self.network_size >= 2, f"network_size={self.network_size} violates network_size ≥ 2"),
            (0 <= self.arrival_ratio <= 1, f"arrival_ratio={self.arrival_ratio} violates arrival_ratio ∈ [0,1]"),
            (0 <= self.departure_ratio <= 1, f"departure_ratio={self.departure_ratio} violates departure_ratio ∈ [0,1]"),
            (self.items_per_node >= 0, f"items_per_node={self.items_per_node} violates items_per_node ≥ 0"),
            (0 <= self.node_request_rate <= 1,
             f"node_request_rate={self.node_request_rate} violates node_request_rate ∈ [0,1]"),
            (self.capacity_shape > 1, f"capacity_shape={self.capacity_shape} violates capacity_shape > 1"),
            (self.capacity_scale > 0, f"capacity_scale={self.capacity_scale} violates capacity_scale > 0"),
            (self.cycles >= 1, f"cycles={self.cycles} violates cycles ≥ 1"),
            (self.join_policy in JOIN_POLICIES,
             f"join_policy={self.join_policy!r} violates join_policy ∈ {{{', '.join(JOIN_POLICIES)}}}"),
            (self.cluster_size >= 1, f"cluster_size={self.cluster_size} violates cluster_size ≥ 1"),
            (self.roster_size >= 1, f"roster_size={self.roster_size} violates roster_size ≥ 1"),
            (self.neighbor_degree >= 1, f"neighbor_degree={self.neighbor_degree} violates neighbor_degree ≥ 1"),
            (self.fanout >= 1, f"fanout={self.fanout} violates fanout ≥ 1"),
            (self.ttl >= 1, f"ttl={self.ttl} violates ttl ≥ 1"),
            (self.mu > 0, f"mu={self.mu} violates μ > 0"),
            (self.nu >= 0, f"nu={self.nu} violates ν ≥ 0"),
            (8 <= self.m_bits <= 64, f"m_bits={self.m_bits} violates 8 ≤ m_bits ≤ 64"),
            (self.record_max_age >= 0, f"record_max_age={self.record_max_age} violates record_max_age ≥ 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


@dataclass
class MetricsRecord:
    cycle: int
    n_nodes: int
    n_clusters: int
    max_cluster_load_ratio: float
    rsd_cluster_load: float
    max_cluster_items_ratio: float
    rsd_cluster_items: float
    node_rate_ratio: float
    node_rate_rsd: float
    items_moved_inter: int = 0
    items_moved_intra: int = 0
    moves: int = 0
    splits: int = 0
    balancer_messages: int = 0
    items_redistributed: int = 0
    lookups: int = 0
    hit_rate: float = math.nan
    routing_failures: int = 0
    mean_chord_hops: float = math.nan
    total_items: int = 0


METRIC_FIELDS: Tuple[str, ...] = tuple(f.name for f in fields(MetricsRecord) if f.name != 'cycle')


@dataclass
class TrialResult:
    seed: int
    records: List[MetricsRecord]

    @property
    def aggregates(self) -> Dict[str, float]:
        """Means of every metric over the final cycles"""
        tail = self.records[-FINAL_WINDOW:]
        return {name: float(np.nanmean([getattr(r, name) for r in tail])) if _any_number(tail, name)
                else math.nan for name in METRIC_FIELDS}


def _any_number(records: Sequence[MetricsRecord], name: str) -> bool:
    return any(not math.isnan(getattr(r, name)) for r in records)


class RunningStats:
    """Welford accumulator; streaming counterpart of `rsd`"""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (value - self.mean)

    @property
    def rsd(self) -> float:
        if not self.count or self.mean == 0:
            return 0.0
        return math.sqrt(self._m2 / self.count) / self.mean


def rsd(values: Sequence[float]) -> float:
    """Relative standard deviation (population std / mean)"""
    arr = np.asarray(values, dtype=float)
    if not arr.size or arr.mean() == 0:
        return 0.0
    return float(arr.std() / arr.mean())


def max_ratio(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=float)
    if not arr.size or arr.mean() <= 0:
        return math.nan
    return float(arr.max() / arr.mean())


class SimulationState:
    """Everything one trial mutates"""

    def __init__(self, cfg: SimConfig, seed: int, charge_log: Optional[ChargeLog] = None):
        self.cfg = cfg
        self.seed = seed
        self.rng = random.Random(seed)
        self.np_rng = np.random.default_rng(seed)
        self.space = IdentifierSpace(cfg.m_bits)
        self.load_model = LoadModel(mu=cfg.mu, nu=cfg.nu, log=charge_log)
        self.ring = Ring(self.space, self.load_model, self.rng, roster_size=cfg.roster_size,
                         neighbor_degree=cfg.neighbor_degree, join_policy=cfg.join_policy)
        self.nodes: Dict[int, NodeState] = {}
        self.registry: List[MetadataItem] = []
        self.pending: List[MetadataItem] = []
        self.initial_nodes = 0
        self.joined = 0
        self.departed = 0
        self.items_published = 0
        self._serial = 0

    def new_node(self) -> NodeState:
        self._serial += 1
        address = f"mec-{self._serial}".encode()
        node_id = self.space.hash_key(address)
        salt = 0
        while node_id in self.nodes or node_id in self.ring.clusters:
            salt += 1
            node_id = self.space.hash_key(address + f"#{salt}".encode())
        capacity = self.cfg.capacity_scale * (1.0 + self.np_rng.pareto(self.cfg.capacity_shape))
        return NodeState(node_id, capacity, address)

    def rehash(self, node: NodeState) -> None:
        """Give a node a fresh identifier after a cluster-id collision"""
        salt = 0
        node_id = node.node_id
        while node_id in self.nodes or node_id in self.ring.clusters:
            salt += 1
            node_id = self.space.hash_key(node.address + f"#{salt}".encode())
        node.node_id = node_id

    def alive_nodes(self) -> List[NodeState]:
        return list(self.nodes.values())

    def new_item(self, supplier: NodeState) -> MetadataItem:
        name = f"service-{len(self.registry) + len(self.pending):08d}-{self.rng.getrandbits(32):08x}".encode()
        return MetadataItem.create(name, supplier.address, self.space)

    def publish(self, item: MetadataItem, entry: NodeState) -> None:
        try:
            if publish(item, self.ring, entry):
                self.items_published += 1
            self.registry.append(item)
        except RoutingError as e:
            logging.warning(f"publish deferred to next cycle: {e}")
            self.pending.append(item)

    def retry_pending(self) -> None:
        pending, self.pending = self.pending, []
        nodes = self.alive_nodes()
        for item in pending:
            self.publish(item, self.rng.choice(nodes))

    def digest(self) -> str:
        """sha256 over the canonical ring, membership and item placement"""
        h = hashlib.sha256()
        for cluster in self.ring:
            h.update(f"C{cluster.cluster_id}:{cluster.span.start}:{cluster.roster_ids()}".encode())
            for node_id in sorted(cluster.members):
                node = cluster.members[node_id]
                h.update(f"N{node_id}:{node.capacity!r}:{sorted(k for k, _ in node.held_items)}".encode())
        return h.hexdigest()


def bootstrap(cfg: SimConfig, seed: Optional[int] = None, charge_log: Optional[ChargeLog] = None) -> SimulationState:
    """Build the cycle-0 network: clusters, members and published metadata"""
    state = SimulationState(cfg, cfg.seed if seed is None else seed, charge_log)
    ring = state.ring
    target_clusters = max(1, round(cfg.network_size / cfg.cluster_size))

    for index in range(cfg.network_size):
        node = state.new_node()
        if index < target_clusters:
            while True:
                try:
                    create_cluster(node, ring)
                    break
                except DuplicateClusterError:
                    state.rehash(node)
        else:
            join_node(node, ring)
        state.nodes[node.node_id] = node
    state.initial_nodes = len(state.nodes)

    for cluster in ring:
        ring.rewire_neighbors(cluster)
    ring.refresh_finger_tables()

    nodes = state.alive_nodes()
    for _ in range(round(cfg.items_per_node * cfg.network_size)):
        supplier = state.rng.choice(nodes)
        state.publish(state.new_item(supplier), state.rng.choice(nodes))

    # bootstrap traffic is not part of any measured cycle
    for node in nodes:
        node.msg_counters = Counter()
        node.window = None
    logging.info(f"bootstrapped {len(nodes)} nodes in {len(ring)} clusters with {state.items_published} items")
    return state


def _churn(state: SimulationState) -> int:
    cfg = state.cfg
    alive = len(state.nodes)
    departures = min(round(cfg.departure_ratio * alive), alive - 1)
    arrivals = round(cfg.arrival_ratio * alive)
    before = state.ring.items_redistributed

    for node in state.rng.sample(state.alive_nodes(), departures):
        leave_node(node, state.ring)
        del state.nodes[node.node_id]
        state.departed += 1

    for _ in range(arrivals):
        node = state.new_node()
        join_node(node, state.ring)
        state.nodes[node.node_id] = node
        state.joined += 1
        if cfg.publish_on_join:
            for _ in range(round(cfg.items_per_node)):
                state.publish(state.new_item(node), node)
    return state.ring.items_redistributed - before


def _measure(state: SimulationState, cycle: int) -> MetricsRecord:
    ring = state.ring
    for node in state.nodes.values():
        close_window(node)

    loads, items, rate_ratios, rate_rsds = [], [], [], []
    for cluster in ring:
        loads.append(cluster_load(cluster))
        items.append(cluster.item_count())
        rates = [load_rate(n) for n in cluster.members.values()]
        ratio = max_ratio(rates)
        if not math.isnan(ratio):
            rate_ratios.append(ratio)
            rate_rsds.append(rsd(rates))

    if state.cfg.check_invariants:
        stats = RunningStats()
        for value in loads:
            stats.push(value)
        if not math.isclose(stats.rsd, rsd(loads), rel_tol=1e-9, abs_tol=1e-12):
            raise SimulationError(f"cycle {cycle}: streaming rsd {stats.rsd} != two-pass rsd {rsd(loads)}")

    return MetricsRecord(
        cycle=cycle,
        n_nodes=len(state.nodes),
        n_clusters=len(ring),
        max_cluster_load_ratio=max_ratio(loads),
        rsd_cluster_load=rsd(loads),
        max_cluster_items_ratio=max_ratio(items),
        rsd_cluster_items=rsd(items),
        node_rate_ratio=float(np.mean(rate_ratios)) if rate_ratios else math.nan,
        node_rate_rsd=float(np.mean(rate_rsds)) if rate_rsds else math.nan,
        total_items=sum(items),
    )


def check_ledgers(state: SimulationState, cycle: int) -> None:
    try:
        state.ring.check_invariants()
    except OverlayError as e:
        raise SimulationError(f"cycle {cycle}: {e}") from e
    expected_nodes = state.initial_nodes + state.joined - state.departed
    if len(state.nodes) != expected_nodes or state.ring.node_count() != expected_nodes:
        raise SimulationError(f"cycle {cycle}: population {len(state.nodes)} != ledger {expected_nodes}")
    if state.ring.item_count() != state.items_published:
        raise SimulationError(f"cycle {cycle}: {state.ring.item_count()} items held, "
                              f"{state.items_published} published")


def run_cycle(state: SimulationState, cycle: int) -> MetricsRecord:
    cfg = state.cfg
    ring = state.ring
    model = state.load_model
    model.cycle = cycle

    redistributed = _churn(state)
    for cluster in ring:
        ring.rewire_neighbors(cluster)
    ring.refresh_finger_tables()
    state.retry_pending()

    lookups = hits = failures = 0
    hops = []
    if state.registry and cfg.node_request_rate > 0:
        for node in state.alive_nodes():
            if state.rng.random() >= cfg.node_request_rate:
                continue
            item = state.registry[state.rng.randrange(len(state.registry))]
            result = lookup(item.service_name, ring, node, state.rng, cfg.fanout, cfg.ttl)
            lookups += 1
            hits += result.hit
            hops.append(result.hops_chord)
            failures += result.routing_failed

    for cluster in ring:
        model.maintenance_charges(cluster)

    record = _measure(state, cycle)

    # balancing traffic lands in the next window
    model.cycle = cycle + 1
    model.balancer_messages = 0
    if cfg.intra_balancing:
        for cluster in ring:
            report = intra_balance_cycle(cluster, cfg.params.alpha, cycle, model, cfg.record_max_age)
            record.items_moved_intra += report.items_moved
    if cfg.inter_balancing:
        report = balance_cycle(ring, cfg.params, cycle, state.rng)
        record.items_moved_inter = report.items_moved
        record.moves = report.moves
        record.splits = report.splits

    record.balancer_messages = model.balancer_messages
    record.items_redistributed = redistributed
    record.lookups = lookups
    record.hit_rate = hits / lookups if lookups else math.nan
    record.routing_failures = failures
    record.mean_chord_hops = float(np.mean(hops)) if hops else math.nan

    if cfg.check_invariants:
        check_ledgers(state, cycle)
    logging.debug(f"cycle {cycle}: {record}")
    return record


def run_trial(cfg: SimConfig, seed: Optional[int] = None,
              on_cycle: Optional[Callable[[MetricsRecord], None]] = None,
              charge_log: Optional[ChargeLog] = None) -> TrialResult:
    state = bootstrap(cfg, seed, charge_log)
    records = []
    for cycle in range(1, cfg.cycles + 1):
        record = run_cycle(state, cycle)
        records.append(record)
        if on_cycle is not None:
            on_cycle(record)
    return TrialResult(seed=state.seed, records=records)


@dataclass
class GridCell:
    label: str
    config: SimConfig
    delta: Dict[str, str] = field(default_factory=dict)


@dataclass
class CellResult:
    cell: GridCell
    trials: List[TrialResult] = field(default_factory=list)
    error: Optional[str] = None

    def cycle_stats(self) -> List[Tuple[int, Dict[str, float], Dict[str, float]]]:
        """Per-cycle (cycle, means, standard deviations) across trials"""
        rows = []
        if not self.trials:
            return rows
        for index in range(min(len(t.records) for t in self.trials)):
            means, sds = {}, {}
            for name in METRIC_FIELDS:
                values = np.array([getattr(t.records[index], name) for t in self.trials], dtype=float)
                finite = values[~np.isnan(values)]
                means[name] = float(finite.mean()) if finite.size else math.nan
                sds[name] = float(finite.std()) if finite.size else math.nan
            rows.append((self.trials[0].records[index].cycle, means, sds))
        return rows


def trial_seeds(cfg: SimConfig, trials: int) -> List[int]:
    return [cfg.seed + index for index in range(trials)]


def run_experiment(grid: Sequence[GridCell], trials: int, jobs: Optional[int] = None) -> List[CellResult]:
    """Run every grid cell `trials` times; a failing trial fails only its cell"""
    if not grid:
        raise ConfigError("experiment grid is empty")
    if trials < 1:
        raise ConfigError(f"trials={trials} violates trials ≥ 1")
    jobs = jobs or min(len(grid) * trials, os.cpu_count() or 1)
    results = [CellResult(cell) for cell in grid]
    slots: Dict[int, Dict[int, TrialResult]] = {i: {} for i in range(len(grid))}

    def fail(index: int, seed: int, error: BaseException) -> None:
        if results[index].error is None:
            results[index].error = f"trial seed {seed}: {error}"
        logging.error(f"grid cell {grid[index].label!r} failed: {error}")

    work = [(i, seed) for i, cell in enumerate(grid) for seed in trial_seeds(cell.config, trials)]
    if jobs <= 1:
        for index, seed in work:
            if results[index].error is not None:
                continue
            try:
                slots[index][seed] = run_trial(grid[index].config, seed)
            except Exception as e:
                fail(index, seed, e)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_trial, grid[index].config, seed): (index, seed) for index, seed in work}
            for future in as_completed(futures):
                index, seed = futures[future]
                try:
                    slots[index][seed] = future.result()
                except Exception as e:
                    fail(index, seed, e)

    for index, result in enumerate(results):
        if result.error is None:
            result.trials = [slots[index][seed] for seed in sorted(slots[index])]
    return results


def with_params(cfg: SimConfig, **changes) -> SimConfig:
    """Copy of `cfg` with SimConfig and BalanceParams fields replaced"""
    param_names = {f.name for f in fields(BalanceParams)}
    param_changes = {k: v for k, v in changes.items() if k in param_names}
    other = {k: v for k, v in changes.items() if k not in param_names}
    try:
        params = replace(cfg.params, **param_changes) if param_changes else cfg.params
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return replace(cfg, params=params, **other)
