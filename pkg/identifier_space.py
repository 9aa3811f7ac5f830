"""
Ring arithmetic over the m-bit circular identifier space shared by cluster
IDs, node IDs and metadata keys.
"""
from dataclasses import dataclass
from typing import Iterable, List

DEFAULT_BITS = 64
MIN_BITS = 8
MAX_BITS = 64

# FNV-1a 64-bit constants
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

Identifier = int


def _mix64(value: int) -> int:
    """splitmix64 finalizer, spreads FNV output over all 64 bits"""
    value = (value ^ (value >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    value = (value ^ (value >> 27)) * 0x94D049BB133111EB & _MASK64
    return value ^ (value >> 31)


def hash64(name: bytes) -> int:
    """Seedless 64-bit hash, stable across runs and platforms"""
    if isinstance(name, str):
        name = name.encode('utf-8')
    value = _FNV_OFFSET
    for byte in name:
        value = ((value ^ byte) * _FNV_PRIME) & _MASK64
    return _mix64(value)


@dataclass(frozen=True)
class RingSpan:
    """Clockwise interval (start, end] on the ring.

    start == end denotes the full ring unless `empty` is set.
    """
    start: Identifier
    end: Identifier
    empty: bool = False


class IdentifierSpace:
    """The m-bit circular identifier space"""

    def __init__(self, bits: int = DEFAULT_BITS):
        if not MIN_BITS <= bits <= MAX_BITS:
            raise ValueError(f"m must satisfy {MIN_BITS} ≤ m ≤ {MAX_BITS}, got {bits}")
        self.bits = bits
        self.size = 1 << bits

    def __repr__(self):
        return f"IdentifierSpace(bits={self.bits})"

    def __eq__(self, other):
        return isinstance(other, IdentifierSpace) and other.bits == self.bits

    def __hash__(self):
        return hash(self.bits)

    def hash_key(self, name: bytes) -> Identifier:
        """Hash a service name (or node address) to an m-bit identifier"""
        return hash64(name) >> (MAX_BITS - self.bits)

    def normalize(self, value: int) -> Identifier:
        return value % self.size

    def clockwise_distance(self, a: Identifier, b: Identifier) -> int:
        return (b - a) % self.size

    def span_length(self, span: RingSpan) -> int:
        if span.empty:
            return 0
        if span.start == span.end:
            return self.size
        return self.clockwise_distance(span.start, span.end)

    def in_span(self, x: Identifier, span: RingSpan) -> bool:
        """True iff x lies in (span.start, span.end]"""
        if span.empty:
            return False
        if span.start == span.end:
            return True
        return 0 < self.clockwise_distance(span.start, x) <= self.clockwise_distance(span.start, span.end)

    def in_open(self, x: Identifier, a: Identifier, b: Identifier) -> bool:
        """True iff x lies strictly inside (a, b); a == b means everything but a"""
        if a == b:
            return x != a
        return 0 < self.clockwise_distance(a, x) < self.clockwise_distance(a, b)

    def complement(self, span: RingSpan) -> RingSpan:
        if span.empty:
            return RingSpan(span.start, span.start)
        if span.start == span.end:
            return RingSpan(span.start, span.start, empty=True)
        return RingSpan(span.end, span.start)

    def partition(self, ids: Iterable[Identifier]) -> List[RingSpan]:
        """Spans (pred_i, id_i] for a set of distinct identifiers, in ascending id order"""
        ordered = sorted(set(ids))
        if not ordered:
            return []
        if len(ordered) == 1:
            return [RingSpan(ordered[0], ordered[0])]
        return [RingSpan(ordered[i - 1], ordered[i]) for i in range(len(ordered))]


DEFAULT_SPACE = IdentifierSpace(DEFAULT_BITS)


def hash_key(name: bytes, space: IdentifierSpace = DEFAULT_SPACE) -> Identifier:
    return space.hash_key(name)


def in_span(x: Identifier, span: RingSpan, space: IdentifierSpace = DEFAULT_SPACE) -> bool:
    return space.in_span(x, span)


def clockwise_distance(a: Identifier, b: Identifier, space: IdentifierSpace = DEFAULT_SPACE) -> int:
    return space.clockwise_distance(a, b)
