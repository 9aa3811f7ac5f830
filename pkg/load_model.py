"""
Message accounting and the load / load-rate definitions both balancers consume.

A node's load is the number of messages it processed in one cycle; its load
rate is that load divided by its capacity. Cluster load is the mean member load.
"""
import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Tuple

if TYPE_CHECKING:
    from overlay import ClusterState, NodeState


class MessageCategory(Enum):
    FLOOD_QUERY = 'flood_query'
    METADATA_MAINTENANCE = 'metadata_maintenance'
    TOPOLOGY_MAINTENANCE = 'topology_maintenance'
    CHORD_ROUTING = 'chord_routing'
    BALANCER_CONTROL = 'balancer_control'


@dataclass(frozen=True)
class LoadWindow:
    """Per-node message counts of one completed cycle"""
    counts: Tuple[Tuple[MessageCategory, int], ...]
    node_load: float
    load_rate: float

    def count(self, category: MessageCategory) -> int:
        return dict(self.counts).get(category, 0)


def charge(node: 'NodeState', category: MessageCategory, count: int = 1) -> None:
    if count <= 0:
        return
    node.msg_counters[category] += count


def node_load(counters: Dict[MessageCategory, int]) -> float:
    return float(sum(counters.values()))


def close_window(node: 'NodeState') -> LoadWindow:
    """Snapshot the node's counters into its window and reset them for the next cycle"""
    load = node_load(node.msg_counters)
    counts = tuple(sorted(((cat, n) for cat, n in node.msg_counters.items() if n),
                          key=lambda pair: pair[0].value))
    window = LoadWindow(counts=counts, node_load=load, load_rate=load / node.capacity)
    node.window = window
    node.msg_counters = Counter()
    return window


def load_rate(node: 'NodeState') -> float:
    """Load over capacity for the last completed cycle; nodes without a window have rate 0"""
    return node.window.load_rate if node.window is not None else 0.0


def measured_load(node: 'NodeState') -> float:
    return node.window.node_load if node.window is not None else 0.0


def cluster_load(cluster: 'ClusterState') -> float:
    """Mean member load of the completed cycle"""
    if not cluster.members:
        raise ValueError(f"cluster {cluster.cluster_id} has no members, its load is undefined")
    return sum(measured_load(n) for n in cluster.members.values()) / len(cluster.members)


class ChargeLog:
    """Records charges so a cycle can be replayed or exported"""

    def __init__(self):
        self.entries: List[Tuple[int, int, MessageCategory, int]] = []

    def record(self, cycle: int, node_id: int, category: MessageCategory, count: int):
        self.entries.append((cycle, node_id, category, count))

    def cycle_entries(self, cycle: int) -> List[Tuple[int, int, MessageCategory, int]]:
        return [entry for entry in self.entries if entry[0] == cycle]

    def replay(self, cycle: int) -> Dict[int, float]:
        """Rebuild the per-node load vector of one cycle from the log alone"""
        loads: Dict[int, float] = {}
        for _, node_id, _, count in self.cycle_entries(cycle):
            loads[node_id] = loads.get(node_id, 0.0) + count
        return loads

    def export_csv(self, path: str) -> None:
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['cycle', 'node_id', 'category', 'count'])
            for cycle, node_id, category, count in self.entries:
                writer.writerow([cycle, node_id, category.value, count])


@dataclass
class LoadModel:
    """Maintenance coefficients plus the charging entry point used by every module"""
    mu: float = 1.0  # metadata maintenance messages per item per cycle
    nu: float = 2.0  # topology maintenance messages per node per cycle
    log: Optional[ChargeLog] = None
    cycle: int = 0
    balancer_messages: int = field(default=0, init=False)

    def charge(self, node: 'NodeState', category: MessageCategory, count: int = 1) -> None:
        if count <= 0:
            return
        charge(node, category, count)
        if category is MessageCategory.BALANCER_CONTROL:
            self.balancer_messages += count
        if self.log is not None:
            self.log.record(self.cycle, node.node_id, category, count)

    @property
    def per_item_load(self) -> float:
        return self.mu

    def maintenance_charges(self, cluster: 'ClusterState') -> None:
        """End-of-cycle metadata and topology maintenance for every member"""
        topology = math.ceil(self.nu)
        for node in cluster.members.values():
            self.charge(node, MessageCategory.METADATA_MAINTENANCE, math.ceil(self.mu * len(node.held_items)))
            self.charge(node, MessageCategory.TOPOLOGY_MAINTENANCE, topology)


def mean_rate(nodes: Iterable['NodeState']) -> float:
    rates = [load_rate(n) for n in nodes]
    return sum(rates) / len(rates) if rates else 0.0
