"""Hierarchical tensor networks: evaluation, contraction and storage."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CapacityError, ShapeError
from .sketch import config_index
from .tree import ROOT, DimensionTree, NodeId

DEFAULT_MAX_ENTRIES = 1 << 26

MAGIC = b"HTNW"
DENSE_MAGIC = b"HTND"
FORMAT_VERSION = 1


@dataclass
class HierarchicalTensorNetwork:
    """Binary-tree tensor network over the sites of ``tree``.

    ``leaf_cores[leaf]`` has shape ``(leaf states, r_leaf)``;
    ``internal_cores[node]`` has shape ``(r_left, r_right, r_node)`` and the
    root core has trailing dimension 1.
    """

    tree: DimensionTree
    leaf_cores: dict[NodeId, np.ndarray]
    internal_cores: dict[NodeId, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        tree = self.tree
        for leaf in tree.leaves:
            c = self.leaf_cores.get(leaf)
            if c is None or c.ndim != 2 or c.shape[0] != tree.leaf_states:
                raise ShapeError(f"leaf core {leaf} missing or misshapen")
        for nd in tree.bottom_up():
            c = self.internal_cores.get(nd)
            if c is None or c.ndim != 3:
                raise ShapeError(f"internal core {nd} missing or not a 3-tensor")
            left, right = tree.children(nd)
            if c.shape[0] != self.rank(left) or c.shape[1] != self.rank(right):
                raise ShapeError(
                    f"core {nd} of shape {c.shape} does not match child ranks "
                    f"{self.rank(left)}, {self.rank(right)}")
        if self.internal_cores[ROOT].shape[2] != 1:
            raise ShapeError("root core must have trailing dimension 1")

    def core(self, node: NodeId) -> np.ndarray:
        if self.tree.is_leaf(node):
            return self.leaf_cores[node]
        return self.internal_cores[node]

    def rank(self, node: NodeId) -> int:
        """Dimension of the edge above ``node``."""
        return self.core(node).shape[-1]

    def ranks(self) -> dict[NodeId, int]:
        return {nd: self.rank(nd) for nd in self.tree.nodes}

    def n_params(self) -> int:
        return sum(c.size for c in self.leaf_cores.values()) + \
            sum(c.size for c in self.internal_cores.values())

    def with_cores(self, leaf_cores=None, internal_cores=None) -> "HierarchicalTensorNetwork":
        return replace(self,
                       leaf_cores=dict(leaf_cores if leaf_cores is not None else self.leaf_cores),
                       internal_cores=dict(internal_cores if internal_cores is not None
                                           else self.internal_cores),
                       meta=dict(self.meta))


def _upward(net: HierarchicalTensorNetwork, leaf_vectors: dict[NodeId, np.ndarray],
            combine) -> np.ndarray:
    vec = dict(leaf_vectors)
    for nd in net.tree.bottom_up():
        left, right = net.tree.children(nd)
        vec[nd] = combine(net.internal_cores[nd], vec.pop(left), vec.pop(right))
    return vec[ROOT]


def evaluate(net: HierarchicalTensorNetwork, configs) -> np.ndarray | float:
    """Network value at one configuration or at each row of a batch.

    Configurations are in index form (values ``0..n-1``).
    """
    x = np.asarray(configs)
    single = x.ndim == 1
    x = np.atleast_2d(x).astype(np.int64)
    tree = net.tree
    if x.shape[1] != tree.d:
        raise ShapeError(f"configuration length {x.shape[1]} != d={tree.d}")
    if x.size and (x.min() < 0 or x.max() >= tree.n):
        raise ValueError(f"configuration values must lie in 0..{tree.n - 1}")
    leaves = {}
    for leaf in tree.leaves:
        code = config_index(x[:, list(tree.sites0(leaf))], tree.n)
        leaves[leaf] = net.leaf_cores[leaf][code]
    root = _upward(net, leaves,
                   lambda c, a, b: np.einsum("abg,na,nb->ng", c, a, b, optimize=True))
    out = root[:, 0]
    return float(out[0]) if single else out


def materialize(net: HierarchicalTensorNetwork, max_entries: int = DEFAULT_MAX_ENTRIES
                ) -> np.ndarray:
    """Dense tensor of shape ``(n,) * d`` with site 1 on the first axis."""
    tree = net.tree
    if tree.n ** tree.d > max_entries:
        raise CapacityError(
            f"materializing n^d = {tree.n}^{tree.d} entries exceeds cap {max_entries}; "
            "use inner() for norms of large networks")

    def combine(c, a, b):
        m = np.einsum("ia,jb,abg->ijg", a, b, c, optimize=True)
        return m.reshape(a.shape[0] * b.shape[0], c.shape[2])

    flat = _upward(net, net.leaf_cores, combine)
    return flat[:, 0].reshape((tree.n,) * tree.d)


def _same_tree(a: HierarchicalTensorNetwork, b: HierarchicalTensorNetwork) -> None:
    if a.tree != b.tree:
        raise ShapeError(f"networks live on different trees: {a.tree} vs {b.tree}")


def inner(net_a: HierarchicalTensorNetwork, net_b: HierarchicalTensorNetwork) -> float:
    """``sum_x a(x) b(x)`` by merging leaf Gram matrices up the tree."""
    _same_tree(net_a, net_b)
    tree = net_a.tree
    gram = {leaf: net_a.leaf_cores[leaf].T @ net_b.leaf_cores[leaf] for leaf in tree.leaves}
    for nd in tree.bottom_up():
        left, right = tree.children(nd)
        ca, cb = net_a.internal_cores[nd], net_b.internal_cores[nd]
        gram[nd] = np.einsum("abg,ac,bd,cdh->gh", ca, gram.pop(left), gram.pop(right), cb,
                             optimize=True)
    return float(gram[ROOT][0, 0])


def norm(net: HierarchicalTensorNetwork) -> float:
    return float(np.sqrt(max(inner(net, net), 0.0)))


def total_mass(net: HierarchicalTensorNetwork) -> float:
    """``sum_x net(x)``, contracting each leaf with the all-ones vector."""
    leaves = {leaf: net.leaf_cores[leaf].sum(axis=0) for leaf in net.tree.leaves}
    root = _upward(net, leaves, lambda c, a, b: np.einsum("abg,a,b->g", c, a, b))
    return float(root[0])


def normalize(net: HierarchicalTensorNetwork) -> tuple[HierarchicalTensorNetwork, float]:
    """Rescale the root core so the network sums to one."""
    mass = total_mass(net)
    if not mass > 0.0:
        raise ValueError(f"cannot normalize a network with total mass {mass!r}")
    cores = dict(net.internal_cores)
    cores[ROOT] = cores[ROOT] / mass
    return net.with_cores(internal_cores=cores), mass


def clip_negative(p: np.ndarray) -> np.ndarray:
    """Explicit post-process: zero negative entries of a dense estimate."""
    return np.where(p < 0, 0.0, p)


def relative_error(net: HierarchicalTensorNetwork, p_star: np.ndarray, *,
                   max_entries: int = DEFAULT_MAX_ENTRIES) -> float:
    """``||net - p_star||_F / ||p_star||_F`` on the raw, signed network."""
    p_star = np.asarray(p_star, dtype=np.float64)
    tree = net.tree
    if p_star.shape != (tree.n,) * tree.d:
        raise ShapeError(f"p_star has shape {p_star.shape}, expected {(tree.n,) * tree.d}")
    dense = materialize(net, max_entries)
    return float(np.linalg.norm(dense - p_star) / np.linalg.norm(p_star))


# -- serialization -----------------------------------------------------------
#
# Network container, little-endian throughout:
#   4 bytes   magic "HTNW"
#   u32       format version
#   u64       header length H
#   H bytes   UTF-8 JSON header
#   payload   float64 core entries, C order, in header "cores" order
# Each header "cores" entry is {"node": [l, k], "shape": [...], "offset": o}
# with o the byte offset from the start of the payload.

def _pack(magic: bytes, header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
    buf.write(head)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def _unpack(magic: bytes, data: bytes) -> tuple[dict, memoryview]:
    if data[:4] != magic:
        raise ValueError(f"not a {magic.decode()} container")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    start = 4 + 12
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    return header, memoryview(data)[start + hlen:]


def to_bytes(net: HierarchicalTensorNetwork) -> bytes:
    cores, arrays, offset = [], [], 0
    for nd in net.tree.nodes:
        c = net.core(nd)
        cores.append({"node": list(nd), "shape": list(c.shape), "offset": offset})
        arrays.append(c)
        offset += c.size * 8
    header = {"format": "hierarchical-tensor-network", "tree": net.tree.to_dict(),
              "ranks": {str(nd): int(r) for nd, r in net.ranks().items()},
              "cores": cores, "meta": net.meta}
    return _pack(MAGIC, header, arrays)


def from_bytes(data: bytes) -> HierarchicalTensorNetwork:
    header, payload = _unpack(MAGIC, data)
    tree = DimensionTree.from_dict(header["tree"])
    leaf, internal = {}, {}
    for entry in header["cores"]:
        nd = NodeId(*entry["node"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=entry["offset"]).reshape(shape).astype(np.float64)
        (leaf if tree.is_leaf(nd) else internal)[nd] = arr
    return HierarchicalTensorNetwork(tree, leaf, internal, header.get("meta", {}))


def save(net: HierarchicalTensorNetwork, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path) -> HierarchicalTensorNetwork:
    return from_bytes(Path(path).read_bytes())


def save_dense(p: np.ndarray, path, meta: dict | None = None) -> None:
    """Flat little-endian float64 entries behind a ``HTND`` JSON shape header."""
    p = np.asarray(p, dtype=np.float64)
    header = {"shape": list(p.shape), "order": "C", "meta": meta or {}}
    Path(path).write_bytes(_pack(DENSE_MAGIC, header, [p]))


def load_dense(path) -> np.ndarray:
    header, payload = _unpack(DENSE_MAGIC, Path(path).read_bytes())
    shape = tuple(header["shape"])
    return np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape))).reshape(shape).copy()
