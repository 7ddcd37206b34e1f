"""Binary dimension tree over ``d`` sites.

Nodes are addressed as ``NodeId(level, index)`` with ``level`` in
``0..L`` and a 1-based ``index`` in ``1..2**level``. Site labels returned
by :meth:`DimensionTree.cluster` and :meth:`DimensionTree.complement` are
1-based as well; use :meth:`DimensionTree.sites0` when indexing arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, NamedTuple


class NodeId(NamedTuple):
    level: int
    index: int

    def __str__(self) -> str:
        return f"({self.level},{self.index})"


ROOT = NodeId(0, 1)


def children(node: NodeId) -> tuple[NodeId, NodeId]:
    """Left and right children ``(l+1, 2k-1)`` and ``(l+1, 2k)``.

    Only checks the index arithmetic; use :meth:`DimensionTree.children`
    to also reject leaves.
    """
    l, k = node
    return NodeId(l + 1, 2 * k - 1), NodeId(l + 1, 2 * k)


def parent(node: NodeId) -> NodeId:
    l, k = node
    if l == 0:
        raise ValueError("the root has no parent")
    return NodeId(l - 1, (k + 1) // 2)


def _is_power_of_two(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class DimensionTree:
    """Balanced binary partition of ``d = leaf_size * 2**L`` sites.

    ``leaf_size`` sites are grouped into each leaf cluster, so the leaves
    of the tree carry ``n**leaf_size`` local states.
    """

    d: int
    n: int = 2
    leaf_size: int = 1

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"alphabet size must be >= 2, got {self.n}")
        if not _is_power_of_two(self.leaf_size):
            raise ValueError(f"leaf_size must be a power of two, got {self.leaf_size}")
        if not _is_power_of_two(self.d) or self.d < 2 * self.leaf_size:
            raise ValueError(
                f"d must be a power of two and at least 2*leaf_size={2 * self.leaf_size}, got {self.d}"
            )

    @property
    def L(self) -> int:
        return (self.d // self.leaf_size).bit_length() - 1

    @property
    def leaf_states(self) -> int:
        return self.n**self.leaf_size

    def cluster_size(self, level: int) -> int:
        return self.d >> level

    def check(self, node: NodeId) -> NodeId:
        l, k = node
        if not 0 <= l <= self.L or not 1 <= k <= 2**l:
            raise IndexError(f"node {node} is outside a tree with L={self.L}")
        return NodeId(l, k)

    def is_leaf(self, node: NodeId) -> bool:
        return self.check(node).level == self.L

    def cluster(self, node: NodeId) -> tuple[int, ...]:
        """1-based sites ``(k-1)*m + 1 .. k*m`` with ``m = d / 2**l``."""
        l, k = self.check(node)
        m = self.cluster_size(l)
        return tuple(range((k - 1) * m + 1, k * m + 1))

    def complement(self, node: NodeId) -> tuple[int, ...]:
        inside = set(self.cluster(node))
        return tuple(s for s in range(1, self.d + 1) if s not in inside)

    def sites0(self, node: NodeId) -> range:
        """0-based cluster sites as a ``range``."""
        l, k = self.check(node)
        m = self.cluster_size(l)
        return range((k - 1) * m, k * m)

    def complement0(self, node: NodeId) -> tuple[int, ...]:
        r = self.sites0(node)
        return tuple(range(0, r.start)) + tuple(range(r.stop, self.d))

    def children(self, node: NodeId) -> tuple[NodeId, NodeId]:
        if self.is_leaf(node):
            raise ValueError(f"leaf node {node} has no children")
        return children(node)

    def level_nodes(self, level: int) -> list[NodeId]:
        return [NodeId(level, k) for k in range(1, 2**level + 1)]

    @cached_property
    def nodes(self) -> tuple[NodeId, ...]:
        return tuple(nd for l in range(self.L + 1) for nd in self.level_nodes(l))

    @property
    def leaves(self) -> list[NodeId]:
        return self.level_nodes(self.L)

    @property
    def internal(self) -> list[NodeId]:
        return [nd for l in range(self.L) for nd in self.level_nodes(l)]

    def bottom_up(self) -> Iterator[NodeId]:
        """Internal nodes from the deepest level to the root."""
        for l in range(self.L - 1, -1, -1):
            yield from self.level_nodes(l)

    def to_dict(self) -> dict:
        return {"d": self.d, "n": self.n, "leaf_size": self.leaf_size}

    @classmethod
    def from_dict(cls, data: dict) -> "DimensionTree":
        return cls(int(data["d"]), int(data.get("n", 2)), int(data.get("leaf_size", 1)))
