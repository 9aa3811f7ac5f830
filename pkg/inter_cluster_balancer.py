"""
Upper-layer load balancing between clusters on the Chord ring.

Each cluster's supernode estimates the global average cluster load from
k·log2(N) random probes, then either splits (very heavy clusters) or moves its
identifier towards / away from its successor so the two loads converge.
"""
import logging
import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

from load_model import MessageCategory, cluster_load
from overlay import (ClusterState, MoveRejectedError, Ring, SplitRefusedError,
                     move_cluster, split_cluster)

DEFAULT_K_SCHEDULE: Tuple[Tuple[int, int], ...] = ((1, 4), (11, 2), (21, 1))
MOVING_DISABLED_BETA = 0.5
DEFAULT_SPLIT_MIN_MEMBERS = 48


class ClusterClass(Enum):
    LIGHT = 'light'
    MODERATE = 'moderate'
    HEAVY = 'heavy'
    VERY_HEAVY = 'very_heavy'


class Direction(Enum):
    CLOCKWISE = 'clockwise'
    COUNTERCLOCKWISE = 'counterclockwise'


@dataclass(frozen=True)
class MovePlan:
    direction: Direction
    length: int


@dataclass(frozen=True)
class BalanceParams:
    alpha: float = 1.4
    beta: float = 0.25
    gamma: float = 2.0
    # (first cycle, k) breakpoints, ascending
    k_schedule: Tuple[Tuple[int, int], ...] = DEFAULT_K_SCHEDULE
    # smaller very heavy clusters move instead of splitting
    split_min_members: int = DEFAULT_SPLIT_MIN_MEMBERS

    def __post_init__(self):
        if not 1 < self.alpha < 2:
            raise ValueError(f"alpha={self.alpha} violates α ∈ (1,2)")
        if not (0 <= self.beta < 0.5 or self.beta == MOVING_DISABLED_BETA):
            raise ValueError(f"beta={self.beta} violates β ∈ [0,0.5) (β = 0.5 disables cluster moving)")
        if not self.gamma >= 2:
            raise ValueError(f"gamma={self.gamma} violates γ ≥ 2")
        if not self.k_schedule:
            raise ValueError("k_schedule needs at least one cycle:k entry")
        starts = [start for start, _ in self.k_schedule]
        if starts != sorted(starts) or len(set(starts)) != len(starts) or starts[0] != 1:
            raise ValueError(f"k_schedule must start at cycle 1 with ascending cycles, got {self.k_schedule}")
        if any(k < 1 for _, k in self.k_schedule):
            raise ValueError(f"k_schedule values must be positive integers, got {self.k_schedule}")
        if self.split_min_members < 2:
            raise ValueError(f"split_min_members={self.split_min_members} must be at least 2")

    def k_for(self, cycle: int) -> int:
        k = self.k_schedule[0][1]
        for start, value in self.k_schedule:
            if cycle >= start:
                k = value
        return k


def probe_count(ring: Ring, k: int) -> int:
    nodes = max(ring.node_count(), 2)
    return min(k * math.ceil(math.log2(nodes)), len(ring) - 1)


def estimate_average_load(cluster: ClusterState, ring: Ring, k: int, rng: random.Random,
                          loads: Optional[Dict[int, float]] = None) -> float:
    """Mean load of k·log2(N) distinct random other clusters"""
    if len(ring) < 2:
        raise ValueError("estimating the average load needs at least two clusters")
    others = [c for c in ring if c is not cluster]
    sample = rng.sample(others, probe_count(ring, k))
    charge = ring.load_model.charge
    total = 0.0
    for probed in sample:
        charge(cluster.acting_supernode, MessageCategory.BALANCER_CONTROL)
        charge(probed.acting_supernode, MessageCategory.BALANCER_CONTROL)
        total += _load(probed, loads)
    return total / len(sample)


def _load(cluster: ClusterState, loads: Optional[Dict[int, float]]) -> float:
    if loads is None:
        return cluster_load(cluster)
    key = id(cluster)
    if key not in loads:
        loads[key] = cluster_load(cluster)
    return loads[key]


def classify(c_load: float, load_avr: float, gamma: float) -> ClusterClass:
    if load_avr <= 0:
        raise ValueError(f"classification needs a positive average load, got {load_avr}")
    if math.isclose(c_load, load_avr, rel_tol=1e-9):
        return ClusterClass.MODERATE
    if c_load < load_avr:
        return ClusterClass.LIGHT
    if c_load >= gamma * load_avr:
        return ClusterClass.VERY_HEAVY
    return ClusterClass.HEAVY


def _round_length(value: float) -> int:
    return max(1, math.floor(value + 0.5))


def plan_transfer(load_a: float, load_b: float, length_a: int, length_b: int, beta: float) -> Optional[MovePlan]:
    """Direction and length of the boundary shift between cluster A and its successor B"""
    factor = 1 - 2 * beta
    if factor <= 0 or load_a == load_b:
        return None
    if load_b > load_a and load_b * factor >= load_a:
        return MovePlan(Direction.CLOCKWISE, _round_length((load_b - load_a) * length_b / (2 * load_b)))
    if load_a > load_b and load_a * factor >= load_b:
        return MovePlan(Direction.COUNTERCLOCKWISE, _round_length((load_a - load_b) * length_a / (2 * load_a)))
    return None


def plan_move(a: ClusterState, b: ClusterState, beta: float, ring: Ring,
              loads: Optional[Dict[int, float]] = None) -> Optional[MovePlan]:
    space = ring.space
    return plan_transfer(_load(a, loads), _load(b, loads),
                         space.span_length(a.span), space.span_length(b.span), beta)


@dataclass
class InterCycleReport:
    moves: int = 0
    splits: int = 0
    items_moved: int = 0
    probes: int = 0


def balance_cycle(ring: Ring, params: BalanceParams, cycle: int, rng: random.Random) -> InterCycleReport:
    """One round of inter-cluster balancing over the whole ring.

    Clusters act once each, in random order, against their successor only. A
    cluster that already gave or took load this cycle declines further requests.
    """
    report = InterCycleReport()
    if len(ring) < 2:
        return report
    k = params.k_for(cycle)
    loads: Dict[int, float] = {}
    busy = set()
    order = list(ring)
    rng.shuffle(order)
    charge = ring.load_model.charge

    for cluster in order:
        if id(cluster) in busy:
            continue
        load_avr = estimate_average_load(cluster, ring, k, rng, loads)
        cluster.load_estimate = load_avr
        report.probes += probe_count(ring, k)
        if load_avr <= 0:
            continue
        own = _load(cluster, loads)

        if (classify(own, load_avr, params.gamma) is ClusterClass.VERY_HEAVY
                and len(cluster.members) >= params.split_min_members):
            try:
                new_cluster, moved = split_cluster(cluster, ring)
            except SplitRefusedError as e:
                logging.info(f"split refused, trying to move instead: {e}")
            else:
                loads.pop(id(cluster), None)
                busy.update((id(cluster), id(new_cluster)))
                charge(cluster.acting_supernode, MessageCategory.BALANCER_CONTROL)
                charge(new_cluster.acting_supernode, MessageCategory.BALANCER_CONTROL)
                report.splits += 1
                report.items_moved += moved
                continue

        successor = ring.successor(cluster)
        if successor is cluster or id(successor) in busy:
            continue
        plan = plan_move(cluster, successor, params.beta, ring, loads)
        if plan is None:
            continue
        step = plan.length if plan.direction is Direction.CLOCKWISE else -plan.length
        new_id = ring.space.normalize(cluster.cluster_id + step)
        try:
            moved = move_cluster(cluster, new_id, ring)
        except MoveRejectedError as e:
            logging.debug(f"move skipped: {e}")
            continue
        busy.update((id(cluster), id(successor)))
        charge(cluster.acting_supernode, MessageCategory.BALANCER_CONTROL)
        charge(successor.acting_supernode, MessageCategory.BALANCER_CONTROL)
        report.moves += 1
        report.items_moved += moved
    return report
