"""
Upper and middle layers of the overlay: clusters as virtual nodes on a Chord
ring, supernode rosters, finger / supernode tables, node join / leave and the
cluster lifecycle (create, move, split, dissolve).
"""
import bisect
import heapq
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Set, Tuple

from identifier_space import Identifier, IdentifierSpace, RingSpan
from load_model import LoadModel, MessageCategory, load_rate

if TYPE_CHECKING:
    from flooding import MetadataItem

ROSTER_SIZE = 3
NEIGHBOR_DEGREE = 6
JOIN_POLICIES = ('uniform', 'proportional-to-size')


class OverlayError(Exception):
    """Base class for overlay failures"""


class DuplicateClusterError(OverlayError):
    """A cluster with this identifier already sits on the ring"""


class RoutingError(OverlayError):
    """Chord routing did not reach the owner within the hop cap"""


class SplitRefusedError(OverlayError):
    """The cluster cannot be split (singleton or span too narrow)"""


class MoveRejectedError(OverlayError):
    """The target identifier would reorder clusters on the ring"""


class Role(Enum):
    SUPERNODE = 'supernode'
    CANDIDATE = 'candidate'
    ORDINARY = 'ordinary'


class NodeState:
    """One MEC server"""

    def __init__(self, node_id: Identifier, capacity: float, address: bytes = b''):
        if capacity <= 0:
            raise ValueError(f"node capacity must be positive, got {capacity}")
        self.node_id = node_id
        self.capacity = float(capacity)
        self.address = address
        self.role = Role.ORDINARY
        self.cluster: Optional['ClusterState'] = None
        # (key, supplier_address) -> item, in arrival order
        self.held_items: Dict[Tuple[Identifier, bytes], 'MetadataItem'] = {}
        self.neighbors: Set[Identifier] = set()
        self.msg_counters: Counter = Counter()
        self.window = None
        self.alive = True
        self._key_counts: Counter = Counter()

    def __repr__(self):
        return f"NodeState(id={self.node_id}, role={self.role.value}, items={len(self.held_items)})"

    def add_item(self, item: 'MetadataItem') -> bool:
        ident = item.identity
        if ident in self.held_items:
            return False
        self.held_items[ident] = item
        self._key_counts[item.key] += 1
        return True

    def remove_item(self, item: 'MetadataItem') -> None:
        del self.held_items[item.identity]
        self._key_counts[item.key] -= 1
        if not self._key_counts[item.key]:
            del self._key_counts[item.key]

    def take_all_items(self) -> List['MetadataItem']:
        items = list(self.held_items.values())
        self.held_items = {}
        self._key_counts = Counter()
        return items

    def pop_recent_items(self, count: int) -> List['MetadataItem']:
        """Remove up to `count` items, most recently received first"""
        taken = []
        for ident in reversed(list(self.held_items)[-count:] if count > 0 else []):
            item = self.held_items[ident]
            self.remove_item(item)
            taken.append(item)
        return taken

    def holds_key(self, key: Identifier) -> bool:
        return key in self._key_counts


@dataclass
class FingerEntry:
    target: Identifier
    cluster_id: Identifier
    supernode_table: Tuple[Identifier, ...]


class ClusterState:
    """A virtual node on the Chord ring"""

    def __init__(self, cluster_id: Identifier, span: RingSpan):
        self.cluster_id = cluster_id
        self.span = span
        self.members: Dict[Identifier, NodeState] = {}
        self.supernodes: List[NodeState] = []
        self.finger_table: List[FingerEntry] = []
        # distinct finger clusters, nearest first
        self.routing_ids: List[Identifier] = []
        self.load_estimate: Optional[float] = None
        self.board = None

    def __repr__(self):
        return f"ClusterState(id={self.cluster_id}, members={len(self.members)})"

    @property
    def acting_supernode(self) -> Optional[NodeState]:
        return self.supernodes[0] if self.supernodes else None

    def roster_ids(self) -> Tuple[Identifier, ...]:
        return tuple(node.node_id for node in self.supernodes)

    def item_count(self) -> int:
        return sum(len(node.held_items) for node in self.members.values())

    def iter_items(self) -> Iterator[Tuple[NodeState, 'MetadataItem']]:
        for node in list(self.members.values()):
            for item in list(node.held_items.values()):
                yield node, item


class Ring:
    """Clusters ordered by identifier on the Chord ring"""

    def __init__(self, space: IdentifierSpace, load_model: Optional[LoadModel] = None,
                 rng: Optional[random.Random] = None, roster_size: int = ROSTER_SIZE,
                 neighbor_degree: int = NEIGHBOR_DEGREE, join_policy: str = 'uniform'):
        if join_policy not in JOIN_POLICIES:
            raise ValueError(f"join_policy must be one of {', '.join(JOIN_POLICIES)}, got {join_policy!r}")
        self.space = space
        self.load_model = load_model or LoadModel()
        self.rng = rng or random.Random(0)
        self.roster_size = roster_size
        self.neighbor_degree = neighbor_degree
        self.join_policy = join_policy
        self.clusters: Dict[Identifier, ClusterState] = {}
        self._ids: List[Identifier] = []
        self.items_redistributed = 0

    def __len__(self):
        return len(self._ids)

    def __iter__(self) -> Iterator[ClusterState]:
        return (self.clusters[cid] for cid in list(self._ids))

    @property
    def cluster_ids(self) -> List[Identifier]:
        return list(self._ids)

    def node_count(self) -> int:
        return sum(len(c.members) for c in self.clusters.values())

    def item_count(self) -> int:
        return sum(c.item_count() for c in self.clusters.values())

    def all_items(self) -> List['MetadataItem']:
        return [item for cluster in self for _, item in cluster.iter_items()]

    def successor(self, cluster: ClusterState) -> ClusterState:
        index = bisect.bisect_right(self._ids, cluster.cluster_id)
        return self.clusters[self._ids[index % len(self._ids)]]

    def predecessor(self, cluster: ClusterState) -> ClusterState:
        index = bisect.bisect_left(self._ids, cluster.cluster_id)
        return self.clusters[self._ids[index - 1]]

    def owner_of(self, key: Identifier) -> ClusterState:
        """The cluster whose span holds `key` (the first id clockwise from it)"""
        if not self._ids:
            raise OverlayError("ring is empty")
        index = bisect.bisect_left(self._ids, key)
        return self.clusters[self._ids[index % len(self._ids)]]

    def _insert(self, cluster: ClusterState) -> None:
        bisect.insort(self._ids, cluster.cluster_id)
        self.clusters[cluster.cluster_id] = cluster

    def _remove(self, cluster: ClusterState) -> None:
        self._ids.remove(cluster.cluster_id)
        del self.clusters[cluster.cluster_id]

    def _rekey(self, cluster: ClusterState, new_id: Identifier) -> None:
        self._remove(cluster)
        cluster.cluster_id = new_id
        self._insert(cluster)

    def lightest_member(self, cluster: ClusterState) -> NodeState:
        """Member with the lowest measured load rate, ties broken at random"""
        members = list(cluster.members.values())
        best = min(load_rate(node) for node in members)
        ties = [node for node in members if load_rate(node) == best]
        return ties[0] if len(ties) == 1 else self.rng.choice(ties)

    def place_items(self, cluster: ClusterState, items: Sequence['MetadataItem']) -> int:
        """Supernode-directed handoff of a batch of items, one at a time.

        Each item goes to the member whose rate, counting the items it was
        already handed in this batch, is lowest.
        """
        if not items:
            return 0
        members = list(cluster.members.values())
        self.rng.shuffle(members)
        per_item = self.load_model.per_item_load
        heap = [(load_rate(node), order, node) for order, node in enumerate(members)]
        heapq.heapify(heap)
        placed = 0
        for item in items:
            rate, order, holder = heapq.heappop(heap)
            placed += holder.add_item(item)
            heapq.heappush(heap, (rate + per_item / holder.capacity, order, holder))
        return placed

    def rewire_neighbors(self, cluster: ClusterState) -> None:
        """Rebuild a degree-balanced neighbor graph: union of random Hamiltonian cycles"""
        members = list(cluster.members.values())
        for node in members:
            node.neighbors = set()
        if len(members) < 2:
            return
        if len(members) - 1 <= self.neighbor_degree:
            ids = {node.node_id for node in members}
            for node in members:
                node.neighbors = ids - {node.node_id}
            return
        for _ in range(math.ceil(self.neighbor_degree / 2)):
            order = members[:]
            self.rng.shuffle(order)
            for i, node in enumerate(order):
                other = order[(i + 1) % len(order)]
                node.neighbors.add(other.node_id)
                other.neighbors.add(node.node_id)

    def refresh_finger_tables(self) -> None:
        """Recompute every cluster's finger table from the global ring state"""
        rosters = {cid: self.clusters[cid].roster_ids() for cid in self._ids}
        for cluster in self.clusters.values():
            table = []
            for i in range(self.space.bits):
                target = self.space.normalize(cluster.cluster_id + (1 << i))
                owner = self.owner_of(target).cluster_id
                table.append(FingerEntry(target, owner, rosters[owner]))
            cluster.finger_table = table
            cluster.routing_ids = list(dict.fromkeys(entry.cluster_id for entry in table))

    def sync_supernode_tables(self, cluster: ClusterState) -> None:
        """Propagate a roster change into the finger entries that point at `cluster`"""
        roster = cluster.roster_ids()
        for other in self.clusters.values():
            for entry in other.finger_table:
                if entry.cluster_id == cluster.cluster_id:
                    entry.supernode_table = roster

    def refill_roster(self, cluster: ClusterState) -> bool:
        """Promote the highest-capacity ordinary members until the roster is full"""
        changed = False
        if cluster.supernodes and cluster.supernodes[0].role is not Role.SUPERNODE:
            cluster.supernodes[0].role = Role.SUPERNODE
            changed = True
        while len(cluster.supernodes) < self.roster_size:
            ordinary = [n for n in cluster.members.values() if n.role is Role.ORDINARY]
            if not ordinary:
                break
            best = max(ordinary, key=lambda n: (n.capacity, -n.node_id))
            best.role = Role.SUPERNODE if not cluster.supernodes else Role.CANDIDATE
            cluster.supernodes.append(best)
            changed = True
        return changed

    def check_invariants(self) -> None:
        """Raise OverlayError on the first broken structural invariant"""
        if not self._ids:
            return
        if self._ids != sorted(self.clusters):
            raise OverlayError("cluster id index out of sync")
        for index, cid in enumerate(self._ids):
            cluster = self.clusters[cid]
            pred = self._ids[index - 1]
            expected = RingSpan(pred, cid)
            if cluster.span != expected:
                raise OverlayError(f"cluster {cid} span {cluster.span} != {expected}")
            if not cluster.members:
                raise OverlayError(f"cluster {cid} is empty")
            if not cluster.supernodes or cluster.supernodes[0].role is not Role.SUPERNODE:
                raise OverlayError(f"cluster {cid} has no acting supernode")
            for node in cluster.supernodes:
                if cluster.members.get(node.node_id) is not node:
                    raise OverlayError(f"supernode {node.node_id} not a member of {cid}")
            for node in cluster.members.values():
                if node.cluster is not cluster or not node.alive:
                    raise OverlayError(f"node {node.node_id} has a stale cluster link")
                for key, _ in node.held_items:
                    if not self.space.in_span(key, cluster.span):
                        raise OverlayError(f"item {key} held outside its owner span by {node.node_id}")
                for other_id in node.neighbors:
                    other = cluster.members.get(other_id)
                    if other is None or node.node_id not in other.neighbors:
                        raise OverlayError(f"neighbor link {node.node_id}->{other_id} broken")


def create_cluster(first_node: NodeState, ring: Ring) -> ClusterState:
    """Establish a cluster around its first node; the node's id becomes the cluster id"""
    if first_node.cluster is not None:
        raise OverlayError(f"node {first_node.node_id} already belongs to a cluster")
    cid = first_node.node_id
    if cid in ring.clusters:
        raise DuplicateClusterError(f"cluster id {cid} already on the ring")

    if not len(ring):
        cluster = ClusterState(cid, RingSpan(cid, cid))
        moving = []
    else:
        owner = ring.owner_of(cid)
        cluster = ClusterState(cid, RingSpan(owner.span.start, cid))
        owner.span = RingSpan(cid, owner.cluster_id)
        moving = []
        for holder, item in owner.iter_items():
            if ring.space.in_span(item.key, cluster.span):
                holder.remove_item(item)
                moving.append(item)

    first_node.cluster = cluster
    first_node.role = Role.SUPERNODE
    cluster.members[first_node.node_id] = first_node
    cluster.supernodes = [first_node]
    ring._insert(cluster)
    ring.place_items(cluster, moving)
    if moving:
        logging.debug(f"cluster {cid} created, took {len(moving)} items from its successor")
    return cluster


def _link_new_member(node: NodeState, cluster: ClusterState, ring: Ring) -> None:
    others = [n for n in cluster.members.values() if n is not node]
    for other in ring.rng.sample(others, min(ring.neighbor_degree, len(others))):
        node.neighbors.add(other.node_id)
        other.neighbors.add(node.node_id)


def select_cluster(ring: Ring) -> ClusterState:
    clusters = list(ring)
    if ring.join_policy == 'proportional-to-size':
        return ring.rng.choices(clusters, weights=[len(c.members) for c in clusters])[0]
    return ring.rng.choice(clusters)


def join_node(node: NodeState, ring: Ring, cluster: Optional[ClusterState] = None) -> ClusterState:
    """Add a node as an ordinary member of a cluster chosen by the join policy"""
    if not len(ring):
        raise OverlayError("cannot join an empty ring, create a cluster first")
    if node.cluster is not None:
        raise OverlayError(f"node {node.node_id} already belongs to a cluster")
    if cluster is None:
        cluster = select_cluster(ring)
    node.cluster = cluster
    node.role = Role.ORDINARY
    node.alive = True
    cluster.members[node.node_id] = node
    _link_new_member(node, cluster, ring)
    if ring.refill_roster(cluster):
        ring.sync_supernode_tables(cluster)
    return cluster


def leave_node(node: NodeState, ring: Ring) -> None:
    """Remove a node; its items stay in the ring, supernode duties fail over"""
    cluster = node.cluster
    if cluster is None or not node.alive:
        raise OverlayError(f"node {node.node_id} is not alive in any cluster")
    last_member = len(cluster.members) == 1
    if last_member and len(ring) == 1:
        raise OverlayError("cannot remove the last node of the ring")

    items = node.take_all_items()
    del cluster.members[node.node_id]
    for other_id in node.neighbors:
        other = cluster.members.get(other_id)
        if other is not None:
            other.neighbors.discard(node.node_id)
    node.neighbors = set()
    was_acting = cluster.acting_supernode is node
    in_roster = node in cluster.supernodes
    if in_roster:
        cluster.supernodes.remove(node)
    node.alive = False
    node.cluster = None
    node.role = Role.ORDINARY

    if not last_member:
        ring.refill_roster(cluster)
        if was_acting:
            cluster.board = None
            logging.info(f"supernode {node.node_id} left cluster {cluster.cluster_id}, "
                         f"candidate {cluster.acting_supernode.node_id} promoted")
        if in_roster:
            ring.sync_supernode_tables(cluster)
        ring.items_redistributed += ring.place_items(cluster, items)
        return

    successor = ring.successor(cluster)
    ring._remove(cluster)
    successor.span = RingSpan(cluster.span.start, successor.cluster_id)
    ring.items_redistributed += ring.place_items(successor, items)
    logging.info(f"cluster {cluster.cluster_id} dissolved, span merged into {successor.cluster_id}")


def _closest_preceding(cluster: ClusterState, key: Identifier, ring: Ring) -> Optional[ClusterState]:
    for cluster_id in reversed(cluster.routing_ids):
        candidate = ring.clusters.get(cluster_id)
        if candidate is not None and ring.space.in_open(cluster_id, cluster.cluster_id, key):
            return candidate
    return None


def hop_cap(ring: Ring) -> int:
    return 2 * math.ceil(math.log2(max(len(ring), 1))) + 8


def route(key: Identifier, start: ClusterState, ring: Ring) -> Tuple[ClusterState, int]:
    """Chord lookup over clusters; returns the owner and the hop count.

    Every hop is charged as one chord_routing message to the receiving
    cluster's acting supernode.
    """
    space = ring.space
    current = start
    hops = 0
    cap = hop_cap(ring)
    while not space.in_span(key, current.span):
        successor = ring.successor(current)
        if space.in_span(key, successor.span):
            following = successor
        else:
            following = _closest_preceding(current, key, ring) or successor
        hops += 1
        if hops > cap:
            raise RoutingError(f"key {key} unresolved after {cap} hops from cluster {start.cluster_id}")
        ring.load_model.charge(following.acting_supernode, MessageCategory.CHORD_ROUTING)
        current = following
    return current, hops


def find_successor(key: Identifier, start: ClusterState, ring: Ring) -> ClusterState:
    return route(key, start, ring)[0]


def move_cluster(cluster: ClusterState, new_id: Identifier, ring: Ring) -> int:
    """Shift a cluster's identifier between its neighbors; returns items moved"""
    old_id = cluster.cluster_id
    if new_id == old_id:
        return 0
    space = ring.space
    if len(ring) == 1:
        ring._rekey(cluster, new_id)
        cluster.span = RingSpan(new_id, new_id)
        return 0
    pred = ring.predecessor(cluster)
    succ = ring.successor(cluster)
    if not space.in_open(new_id, pred.cluster_id, succ.cluster_id) or new_id in ring.clusters:
        raise MoveRejectedError(f"cluster {old_id} cannot move to {new_id}: "
                                f"outside ({pred.cluster_id}, {succ.cluster_id})")

    if space.in_open(new_id, old_id, succ.cluster_id):
        region, donor, recipient = RingSpan(old_id, new_id), succ, cluster
    else:
        region, donor, recipient = RingSpan(new_id, old_id), cluster, succ
    moving = []
    for holder, item in donor.iter_items():
        if space.in_span(item.key, region):
            holder.remove_item(item)
            moving.append(item)

    ring._rekey(cluster, new_id)
    cluster.span = RingSpan(pred.cluster_id, new_id)
    succ.span = RingSpan(new_id, succ.cluster_id)
    ring.place_items(recipient, moving)
    return len(moving)


def split_cluster(cluster: ClusterState, ring: Ring) -> Tuple[ClusterState, int]:
    """Create a new cluster over the counterclockwise half of `cluster`'s span.

    Returns the new cluster and the number of items that changed holder.
    """
    members = len(cluster.members)
    if members < 2:
        raise SplitRefusedError(f"cluster {cluster.cluster_id} has a single member")
    space = ring.space
    half = space.span_length(cluster.span) // 2
    if half < 1:
        raise SplitRefusedError(f"cluster {cluster.cluster_id} span too narrow to split")
    new_id = space.normalize(cluster.span.start + half)
    if new_id in ring.clusters:
        raise SplitRefusedError(f"split point {new_id} already taken")

    acting = cluster.acting_supernode
    others = sorted((n for n in cluster.members.values() if n is not acting),
                    key=lambda n: (-n.capacity, n.node_id))
    movers = others[0::2][:members // 2]

    new_cluster = ClusterState(new_id, RingSpan(cluster.span.start, new_id))
    cluster.span = RingSpan(new_id, cluster.cluster_id)

    roster_changed = False
    for node in movers:
        del cluster.members[node.node_id]
        if node in cluster.supernodes:
            cluster.supernodes.remove(node)
            roster_changed = True
        node.role = Role.ORDINARY
        node.cluster = new_cluster
        new_cluster.members[node.node_id] = node
    movers[0].role = Role.SUPERNODE
    new_cluster.supernodes = [movers[0]]
    ring.refill_roster(new_cluster)
    if ring.refill_roster(cluster) or roster_changed:
        ring.sync_supernode_tables(cluster)

    to_new, to_old = [], []
    for holder, item in cluster.iter_items():
        if space.in_span(item.key, new_cluster.span):
            holder.remove_item(item)
            to_new.append(item)
    for holder, item in new_cluster.iter_items():
        if not space.in_span(item.key, new_cluster.span):
            holder.remove_item(item)
            to_old.append(item)

    ring._insert(new_cluster)
    ring.place_items(new_cluster, to_new)
    ring.place_items(cluster, to_old)
    ring.rewire_neighbors(cluster)
    ring.rewire_neighbors(new_cluster)
    logging.debug(f"cluster {cluster.cluster_id} split at {new_id}: {len(movers)} nodes, "
                  f"{len(to_new) + len(to_old)} items moved")
    return new_cluster, len(to_new) + len(to_old)
