import random

import numpy as np
import pytest

from flooding import MetadataItem, publish
from identifier_space import IdentifierSpace
from load_model import LoadModel
from overlay import NodeState, Ring, create_cluster, join_node
from simulator import SimConfig


def make_node(space: IdentifierSpace, serial: int, capacity: float = 100.0, taken=()) -> NodeState:
    address = f"test-node-{serial}".encode()
    node_id = space.hash_key(address)
    salt = 0
    while node_id in taken:
        salt += 1
        node_id = space.hash_key(address + f"#{salt}".encode())
    return NodeState(node_id, capacity, address)


def build_ring(clusters: int = 4, members: int = 5, bits: int = 16, seed: int = 7,
               items: int = 0) -> Ring:
    """A small ring with `clusters` clusters of `members` nodes each"""
    space = IdentifierSpace(bits)
    rng = random.Random(seed)
    ring = Ring(space, LoadModel(), rng)
    taken = set()
    serial = 0
    for _ in range(clusters):
        serial += 1
        founder = make_node(space, serial, capacity=rng.uniform(50, 200), taken=taken)
        taken.add(founder.node_id)
        cluster = create_cluster(founder, ring)
        for _ in range(members - 1):
            serial += 1
            node = make_node(space, serial, capacity=rng.uniform(50, 200), taken=taken)
            taken.add(node.node_id)
            join_node(node, ring, cluster)
    for cluster in ring:
        ring.rewire_neighbors(cluster)
    ring.refresh_finger_tables()
    all_nodes = [n for c in ring for n in c.members.values()]
    for index in range(items):
        supplier = rng.choice(all_nodes)
        item = MetadataItem.create(f"service-{index}".encode(), supplier.address, space)
        publish(item, ring, rng.choice(all_nodes))
    return ring


def item_identities(ring: Ring):
    return sorted(item.identity for item in ring.all_items())


@pytest.fixture
def space():
    return IdentifierSpace(16)


@pytest.fixture
def small_ring():
    return build_ring(clusters=4, members=5, items=60)


@pytest.fixture
def tiny_config():
    return SimConfig(network_size=128, cluster_size=16, cycles=6, items_per_node=4,
                     node_request_rate=0.05, m_bits=32, check_invariants=True)


def average_ranks(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind='stable')
    ranks = np.empty(len(values))
    ranks[order] = np.arange(len(values))
    for value in np.unique(values):
        tied = values == value
        ranks[tied] = ranks[tied].mean()
    return ranks


def rank_correlation(xs, ys) -> float:
    """Spearman's rho with tied values sharing their mean rank"""
    return float(np.corrcoef(average_ranks(xs), average_ranks(ys))[0, 1])
