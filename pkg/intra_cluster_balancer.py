"""
Middle-layer load balancing inside one cluster.

The acting supernode keeps a hash table H (node id -> record) and a list L of
heavy-node records sorted by load rate, heaviest first. Heavy nodes register
how many items they should shed; light nodes ask for items and the supernode
allocates them from the head of L.
"""
import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from load_model import LoadModel, MessageCategory, load_rate, mean_rate
from overlay import ClusterState, NodeState

RECORD_MAX_AGE = 3


@dataclass
class HeavyRecord:
    node: NodeState
    load_rate: float
    items_to_remove: int
    timestamp: int


@dataclass
class TransferPlan:
    receiver: NodeState
    lines: List[Tuple[NodeState, int]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.lines)

    @property
    def total(self) -> int:
        return sum(count for _, count in self.lines)


class BalanceBoard:
    """H and L kept in bijection; L sorted by load rate, non-increasing"""

    def __init__(self):
        self.H: Dict[int, HeavyRecord] = {}
        self.L: List[HeavyRecord] = []

    def __len__(self):
        return len(self.L)

    def insert(self, record: HeavyRecord) -> None:
        self.remove(record.node.node_id)
        bisect.insort(self.L, record, key=lambda r: -r.load_rate)
        self.H[record.node.node_id] = record

    def remove(self, node_id: int) -> Optional[HeavyRecord]:
        record = self.H.pop(node_id, None)
        if record is not None:
            self.L.remove(record)
        return record

    def expire(self, cycle: int, max_age: int = RECORD_MAX_AGE) -> int:
        stale = [r.node.node_id for r in self.L if cycle - r.timestamp > max_age]
        for node_id in stale:
            self.remove(node_id)
        return len(stale)

    def prune(self, cluster: ClusterState) -> int:
        """Drop records of nodes that are no longer members"""
        gone = [r.node.node_id for r in self.L if cluster.members.get(r.node.node_id) is not r.node]
        for node_id in gone:
            self.remove(node_id)
        return len(gone)

    def is_consistent(self) -> bool:
        if len(self.H) != len(self.L):
            return False
        if any(self.H.get(r.node.node_id) is not r for r in self.L):
            return False
        if any(r.items_to_remove < 1 for r in self.L):
            return False
        return all(self.L[i].load_rate >= self.L[i + 1].load_rate for i in range(len(self.L) - 1))


def items_for_load(load: float, per_item_load: float) -> int:
    """Convert a load amount into a whole number of metadata items"""
    return math.ceil(round(load / per_item_load, 9))


def is_heavy(rate: float, rate_avr: float, alpha: float) -> bool:
    return rate > alpha * rate_avr


def is_light(rate: float, rate_avr: float, alpha: float) -> bool:
    return rate < (2 - alpha) * rate_avr


def register_heavy(board: BalanceBoard, node: NodeState, rate_avr: float, alpha: float, cycle: int,
                   per_item_load: float = 1.0) -> Optional[HeavyRecord]:
    rate = load_rate(node)
    if not is_heavy(rate, rate_avr, alpha):
        return None
    count = min(items_for_load((rate - rate_avr) * node.capacity, per_item_load), len(node.held_items))
    if count < 1:
        # nothing it could shed
        board.remove(node.node_id)
        return None
    record = HeavyRecord(node, rate, count, cycle)
    board.insert(record)
    return record


def request_load(board: BalanceBoard, light: NodeState, rate_avr: float, alpha: float,
                 per_item_load: float = 1.0) -> TransferPlan:
    plan = TransferPlan(light)
    rate = load_rate(light)
    if not is_light(rate, rate_avr, alpha):
        return plan
    needed = items_for_load((rate_avr - rate) * light.capacity, per_item_load)
    while needed > 0 and board.L:
        head = board.L[0]
        if head.node is light:
            # an old record of a node that has since turned light
            board.remove(light.node_id)
            continue
        given = min(needed, head.items_to_remove)
        plan.lines.append((head.node, given))
        head.items_to_remove -= given
        needed -= given
        if head.items_to_remove == 0:
            board.remove(head.node.node_id)
    return plan


def execute_transfers(cluster: ClusterState, plan: TransferPlan, load_model: Optional[LoadModel] = None) -> int:
    """Move the planned items, donor's most recently received first"""
    receiver = plan.receiver
    if cluster.members.get(receiver.node_id) is not receiver:
        logging.info(f"receiver {receiver.node_id} left cluster {cluster.cluster_id}, plan dropped")
        return 0
    supernode = cluster.acting_supernode
    moved = 0
    for donor, count in plan.lines:
        if cluster.members.get(donor.node_id) is not donor:
            logging.info(f"donor {donor.node_id} left cluster {cluster.cluster_id}, skipping {count} items")
            continue
        for item in donor.pop_recent_items(count):
            receiver.add_item(item)
            moved += 1
        if load_model is not None:
            for party in {donor.node_id: donor, receiver.node_id: receiver, supernode.node_id: supernode}.values():
                load_model.charge(party, MessageCategory.BALANCER_CONTROL)
    return moved


@dataclass
class IntraCycleReport:
    registered: int = 0
    requests: int = 0
    transfers: int = 0
    items_moved: int = 0


def intra_balance_cycle(cluster: ClusterState, alpha: float, cycle: int,
                        load_model: Optional[LoadModel] = None,
                        max_record_age: int = RECORD_MAX_AGE) -> IntraCycleReport:
    report = IntraCycleReport()
    members = list(cluster.members.values())
    if len(members) < 2:
        return report
    if cluster.board is None:
        cluster.board = BalanceBoard()
    board = cluster.board
    board.prune(cluster)
    board.expire(cycle, max_record_age)

    per_item_load = load_model.per_item_load if load_model is not None else 1.0
    supernode = cluster.acting_supernode
    rate_avr = mean_rate(members)
    if rate_avr <= 0:
        return report

    for node in members:
        if register_heavy(board, node, rate_avr, alpha, cycle, per_item_load) is not None:
            report.registered += 1
            if load_model is not None and node is not supernode:
                load_model.charge(supernode, MessageCategory.BALANCER_CONTROL)

    lights = sorted((n for n in members if is_light(load_rate(n), rate_avr, alpha)),
                    key=lambda n: (load_rate(n), n.node_id))
    for light in lights:
        if not board.L:
            break
        plan = request_load(board, light, rate_avr, alpha, per_item_load)
        report.requests += 1
        if load_model is not None and light is not supernode:
            load_model.charge(supernode, MessageCategory.BALANCER_CONTROL)
        report.transfers += len(plan.lines)
        report.items_moved += execute_transfers(cluster, plan, load_model)
    if report.items_moved:
        logging.debug(f"cluster {cluster.cluster_id}: {report.items_moved} items rebalanced in cycle {cycle}")
    return report
