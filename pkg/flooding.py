"""
Intra-cluster gossip flooding (random breadth-first search) and the end-to-end
service lookup: entry node -> its supernode -> Chord -> owner supernode floods
-> response back to the entry node.
"""
import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

from identifier_space import Identifier, IdentifierSpace
from load_model import MessageCategory
from overlay import ClusterState, NodeState, Ring, RoutingError, hop_cap, route

DEFAULT_FANOUT = 3
DEFAULT_TTL = 6


@dataclass(frozen=True)
class MetadataItem:
    """A service-supplier record, stored in the cluster owning its key"""
    key: Identifier
    service_name: bytes
    supplier_address: bytes
    payload_size: int = 1

    @classmethod
    def create(cls, service_name: bytes, supplier_address: bytes, space: IdentifierSpace,
               payload_size: int = 1) -> 'MetadataItem':
        return cls(space.hash_key(service_name), service_name, supplier_address, payload_size)

    @property
    def identity(self) -> Tuple[Identifier, bytes]:
        return self.key, self.supplier_address


class Outcome(Enum):
    HIT = 'hit'
    MISS = 'miss'


@dataclass
class QueryResult:
    outcome: Outcome
    holder: Optional[NodeState] = None
    hops_chord: int = 0
    messages_flooded: int = 0
    routing_failed: bool = False

    @property
    def hit(self) -> bool:
        return self.outcome is Outcome.HIT


def flood_query(cluster: ClusterState, key: Identifier, fanout: int, ttl: int,
                rng: random.Random, ring: Optional[Ring] = None) -> QueryResult:
    """Flood a query from the cluster's acting supernode.

    Each visited node forwards to `fanout` random neighbors that have not seen
    the query yet, while TTL lasts. No node receives the query twice.
    """
    if ttl < 1 or fanout < 1:
        raise ValueError(f"flooding needs ttl ≥ 1 and fanout ≥ 1, got ttl={ttl} fanout={fanout}")
    supernode = cluster.acting_supernode
    if supernode.holds_key(key):
        return QueryResult(Outcome.HIT, holder=supernode)

    charge = ring.load_model.charge if ring is not None else _plain_charge
    visited = {supernode.node_id}
    frontier = [supernode]
    messages = 0
    for _ in range(ttl):
        next_frontier = []
        for sender in frontier:
            fresh = sorted(n for n in sender.neighbors if n not in visited)
            for target_id in rng.sample(fresh, min(fanout, len(fresh))):
                receiver = cluster.members[target_id]
                messages += 1
                charge(receiver, MessageCategory.FLOOD_QUERY, 1)
                visited.add(target_id)
                if receiver.holds_key(key):
                    return QueryResult(Outcome.HIT, holder=receiver, messages_flooded=messages)
                next_frontier.append(receiver)
        if not next_frontier:
            break
        frontier = next_frontier
    return QueryResult(Outcome.MISS, messages_flooded=messages)


def _plain_charge(node: NodeState, category: MessageCategory, count: int) -> None:
    node.msg_counters[category] += count


def _to_supernode(entry: NodeState, ring: Ring, category: MessageCategory) -> None:
    supernode = entry.cluster.acting_supernode
    if supernode is not entry:
        ring.load_model.charge(supernode, category)


def publish(item: MetadataItem, ring: Ring, entry: NodeState) -> bool:
    """Store an item in its owner cluster on the lightest member.

    Returns False if the item was already held (dedup by key and supplier).
    Raises RoutingError so the caller can retry next cycle.
    """
    if not entry.alive or entry.cluster is None:
        raise ValueError(f"entry node {entry.node_id} is not alive")
    _to_supernode(entry, ring, MessageCategory.METADATA_MAINTENANCE)
    owner, _ = route(item.key, entry.cluster, ring)
    for node in owner.members.values():
        if item.identity in node.held_items:
            return False
    holder = ring.lightest_member(owner)
    if holder is not owner.acting_supernode:
        ring.load_model.charge(holder, MessageCategory.METADATA_MAINTENANCE)
    holder.add_item(item)
    return True


def lookup(service_name: bytes, ring: Ring, entry: NodeState, rng: random.Random,
           fanout: int = DEFAULT_FANOUT, ttl: int = DEFAULT_TTL) -> QueryResult:
    """Resolve a service name entering at `entry`"""
    if not entry.alive or entry.cluster is None:
        raise ValueError(f"entry node {entry.node_id} is not alive")
    key = ring.space.hash_key(service_name)
    _to_supernode(entry, ring, MessageCategory.CHORD_ROUTING)
    try:
        owner, hops = route(key, entry.cluster, ring)
    except RoutingError as e:
        logging.warning(f"lookup failed: {e}")
        return QueryResult(Outcome.MISS, hops_chord=hop_cap(ring), routing_failed=True)
    result = flood_query(owner, key, fanout, ttl, rng, ring)
    result.hops_chord = hops
    ring.load_model.charge(entry, MessageCategory.FLOOD_QUERY)
    return result
