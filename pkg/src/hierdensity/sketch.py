"""Cluster-basis sketches and empirical moment estimation.

Configurations are stored in *index form*: site values are integers in
``0..n-1``. For ``n = 2`` index 0 is spin -1 and index 1 is spin +1.

A sketch basis on a host set of ``m`` sites consists of products of
non-constant single-site factors over small subsets of *eligible* sites.
Every function carries the same normalizer ``n**(-m/2)``, which makes the
family orthonormal over the full host domain. Moments are accumulated on
the unnormalized ("raw") function values and scaled once at the end; with
``n = 2`` the raw values are integers, so accumulation is exact and does
not depend on chunking or summation order.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .tree import ROOT, DimensionTree, NodeId

Side = Literal["S", "T"]

DEFAULT_MAX_WIDTH = 4096
_TABLE_CAP = 1 << 20


# default number of S/T values held per chunk (16 MB of float64)
CHUNK_BUDGET = 1 << 21


def single_site_factors(n: int) -> np.ndarray:
    """Raw single-site factor table ``F[x, i]`` with ``F[:, 0] == 1``.

    Columns are orthogonal with squared norm ``n``, so ``F / sqrt(n)`` is an
    orthonormal basis of functions on ``0..n-1``. For ``n = 2`` the second
    column is the spin value ``x`` itself.
    """
    if n == 2:
        return np.array([[1.0, -1.0], [1.0, 1.0]])
    x = np.arange(n, dtype=np.float64)
    q, _ = np.linalg.qr(np.vander(x, n, increasing=True))
    q *= np.sign(q[-1, :])
    q[:, 0] = np.abs(q[:, 0])
    return q * math.sqrt(n)


def config_index(values: np.ndarray, n: int) -> np.ndarray:
    """Mixed-radix index of each row, first column slowest."""
    values = np.asarray(values)
    code = np.zeros(values.shape[0], dtype=np.int64)
    for j in range(values.shape[1]):
        code = code * n + values[:, j]
    return code


def all_configs(k: int, n: int) -> np.ndarray:
    """All ``n**k`` configurations of ``k`` sites, first site slowest."""
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.indices((n,) * k).reshape(k, -1).T


@dataclass(frozen=True)
class BasisFunction:
    """One sketch column.

    ``support`` holds 0-based site labels. A product function multiplies
    the non-constant factors ``factor_indices`` (each >= 1) at those sites;
    an indicator function (``state`` set) is 1 exactly at the host
    configuration with that mixed-radix index.
    """

    support: tuple[int, ...]
    factor_indices: tuple[int, ...] = ()
    normalizer: float = 1.0
    state: int | None = None


@dataclass(eq=False)
class SketchBasis:
    node: NodeId
    side: Side
    sites: tuple[int, ...]
    host: tuple[int, ...]
    n: int
    functions: tuple[BasisFunction, ...]
    kind: Literal["product", "onehot"] = "product"
    _table: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind == "product":
            t = max((len(f.support) for f in self.functions), default=0)
            pos = {s: i for i, s in enumerate(self.sites)}
            w = len(self.functions)
            self._sup = np.zeros((w, max(t, 1)), dtype=np.int64)
            self._fac = np.zeros((w, max(t, 1)), dtype=np.int64)
            for j, f in enumerate(self.functions):
                for i, (s, fi) in enumerate(zip(f.support, f.factor_indices)):
                    self._sup[j, i] = pos[s]
                    self._fac[j, i] = fi
            self._factors = single_site_factors(self.n)
        if len(self.sites) <= 20 and self.n ** len(self.sites) * self.width <= _TABLE_CAP:
            self._table = self._raw_direct(all_configs(len(self.sites), self.n))

    @property
    def width(self) -> int:
        return len(self.functions)

    @property
    def host_size(self) -> int:
        return len(self.host)

    @property
    def scale(self) -> float:
        """Common normalizer of all functions in this basis."""
        if self.kind == "onehot":
            return 1.0
        return float(self.n) ** (-self.host_size / 2)

    def _raw_direct(self, local: np.ndarray) -> np.ndarray:
        nrow = local.shape[0]
        if self.kind == "onehot":
            out = np.zeros((nrow, self.width))
            out[np.arange(nrow), config_index(local, self.n)] = 1.0
            return out
        if not self.sites:
            return np.ones((nrow, self.width))
        return self._factors[local[:, self._sup], self._fac].prod(axis=-1)

    def raw(self, configs: np.ndarray) -> np.ndarray:
        """Unnormalized values on full configurations, shape ``(N, width)``."""
        local = np.asarray(configs)[:, list(self.sites)]
        if self._table is not None:
            if not self.sites:
                return np.broadcast_to(self._table[0], (local.shape[0], self.width)).copy()
            return self._table[config_index(local, self.n)]
        return self._raw_direct(local)

    def values(self, configs: np.ndarray) -> np.ndarray:
        return self.scale * self.raw(configs)

    def matrix(self) -> np.ndarray:
        """Normalized values on every configuration of :attr:`sites`."""
        local = all_configs(len(self.sites), self.n)
        raw = self._table if self._table is not None else self._raw_direct(local)
        return self.scale * raw

    def describe(self) -> dict:
        return {"node": str(self.node), "side": self.side, "width": self.width,
                "eligible_sites": [s + 1 for s in self.sites], "kind": self.kind}


@dataclass(frozen=True, eq=False)
class SketchConfig:
    """Options controlling which cluster-basis functions form each sketch.

    ``locality_radius`` bounds the distance from an eligible site to the
    other side of the cut. ``restrict_cluster_side=False`` makes every
    cluster site eligible on the S side. ``distance`` is an optional
    ``(d, d)`` site-distance matrix; the default is ``|i - j|``.
    """

    t: int = 4
    locality_radius: int = 4
    restrict_cluster_side: bool = True
    leaf_onehot: bool = True
    max_width: int = DEFAULT_MAX_WIDTH
    distance: np.ndarray | None = None

    def __post_init__(self):
        if self.t < 1:
            raise ConfigError(f"t must be >= 1, got {self.t}")
        if self.locality_radius < 0:
            raise ConfigError(f"locality_radius must be >= 0, got {self.locality_radius}")

    def dist(self, d: int) -> np.ndarray:
        if self.distance is None:
            idx = np.arange(d)
            return np.abs(idx[:, None] - idx[None, :])
        dm = np.asarray(self.distance)
        if dm.shape != (d, d):
            raise ShapeError(f"distance matrix has shape {dm.shape}, expected ({d}, {d})")
        return dm

    def to_dict(self) -> dict:
        return {"t": self.t, "locality_radius": self.locality_radius,
                "restrict_cluster_side": self.restrict_cluster_side,
                "leaf_onehot": self.leaf_onehot, "max_width": self.max_width,
                "custom_distance": self.distance is not None}


def _product_width(n_sites: int, t: int, n: int) -> int:
    return sum(math.comb(n_sites, s) * (n - 1) ** s for s in range(min(t, n_sites) + 1))


def _near(sites: tuple[int, ...], others: tuple[int, ...], dist: np.ndarray,
          radius: int) -> tuple[int, ...]:
    if not others:
        return ()
    dmin = dist[np.ix_(list(sites), list(others))].min(axis=1)
    return tuple(s for s, dv in zip(sites, dmin) if dv <= radius)


def build_cluster_basis(tree: DimensionTree, node: NodeId, side: Side, t: int = 4,
                        locality_radius: int = 4, *,
                        config: SketchConfig | None = None) -> SketchBasis:
    """Orthonormal cluster basis for one side of the cut at ``node``.

    Functions are ordered by subset size, then lexicographically by site,
    then by factor indices. The S side of a leaf is the one-hot basis over
    the leaf states when ``config.leaf_onehot`` is set.
    """
    if config is None:
        config = SketchConfig(t=t, locality_radius=locality_radius)
    node = tree.check(node)
    n = tree.n
    cluster = tuple(tree.sites0(node))
    comp = tree.complement0(node)
    if side == "S":
        host, other = cluster, comp
        if tree.is_leaf(node) and config.leaf_onehot:
            states = tree.n ** len(cluster)
            if states > config.max_width:
                raise CapacityError(
                    f"one-hot leaf basis at {node} has width {states} > max_width "
                    f"{config.max_width}; use a smaller leaf_size")
            funcs = tuple(BasisFunction(cluster, (), 1.0, state=j) for j in range(states))
            return SketchBasis(node, side, cluster, cluster, n, funcs, kind="onehot")
        if config.restrict_cluster_side and other:
            eligible = _near(host, other, config.dist(tree.d), config.locality_radius)
        else:
            eligible = host
    elif side == "T":
        host, other = comp, cluster
        eligible = _near(host, other, config.dist(tree.d), config.locality_radius)
    else:
        raise ValueError(f"side must be 'S' or 'T', got {side!r}")

    width = _product_width(len(eligible), config.t, n)
    if width > config.max_width:
        raise CapacityError(
            f"{side}-side basis at {node} would have width {width} > max_width "
            f"{config.max_width} ({len(eligible)} eligible sites); reduce t or locality_radius")
    norm = float(n) ** (-len(host) / 2)
    funcs = []
    for s in range(min(config.t, len(eligible)) + 1):
        for subset in itertools.combinations(eligible, s):
            for fi in itertools.product(range(1, n), repeat=s):
                funcs.append(BasisFunction(subset, fi, norm))
    return SketchBasis(node, side, eligible, host, n, tuple(funcs))


def build_bases(tree: DimensionTree, config: SketchConfig | None = None
                ) -> dict[tuple[NodeId, str], SketchBasis]:
    """S bases for every non-root node and T bases for every node."""
    config = config or SketchConfig()
    bases = {}
    for node in tree.nodes:
        if node != ROOT:
            bases[node, "S"] = build_cluster_basis(tree, node, "S", config=config)
        bases[node, "T"] = build_cluster_basis(tree, node, "T", config=config)
    return bases


def eval_basis(basis: SketchBasis, config_slice) -> np.ndarray:
    """Evaluate every function of ``basis`` at one configuration.

    ``config_slice`` holds the values on the basis's host sites in
    ascending site order.
    """
    x = np.asarray(config_slice, dtype=np.int64).ravel()
    if x.size != basis.host_size:
        raise ShapeError(f"expected {basis.host_size} host-site values, got {x.size}")
    full = np.zeros(max(basis.host, default=-1) + 1, dtype=np.int64)
    full[list(basis.host)] = x
    return basis.values(full[None, :])[0]


@dataclass
class SampleSet:
    """``N`` configurations in index form with provenance metadata."""

    values: np.ndarray
    n: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ShapeError(f"samples must be a non-empty (N, d) array, got {v.shape}")
        if v.size and (v.min() < 0 or v.max() >= self.n):
            raise ValueError(f"sample values must lie in 0..{self.n - 1}")
        self.values = v.astype(np.int8 if self.n <= 127 else np.int64, copy=False)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_spins(cls, spins, meta: dict | None = None) -> "SampleSet":
        s = np.asarray(spins)
        if not np.all(np.abs(s) == 1):
            raise ValueError("spins must be +-1")
        return cls(((s + 1) // 2).astype(np.int8), 2, dict(meta or {}))

    def spins(self) -> np.ndarray:
        if self.n != 2:
            raise ValueError("spin view needs n == 2")
        return 2 * self.values.astype(np.int8) - 1

    def concat(self, other: "SampleSet") -> "SampleSet":
        if other.n != self.n or other.d != self.d:
            raise ShapeError("sample sets differ in d or n")
        return SampleSet(np.concatenate([self.values, other.values]), self.n, dict(self.meta))

    def write_csv(self, path) -> None:
        """Header ``d,n,N,model,beta,seed``, one value line, then ``N`` rows.

        Rows hold spins in ``{-1, +1}`` for ``n = 2`` and ``1..n`` otherwise.
        """
        path = Path(path)
        out = self.spins() if self.n == 2 else self.values.astype(np.int64) + 1
        lines = ["d,n,N,model,beta,seed",
                 ",".join(str(v) for v in (self.d, self.n, self.N, self.meta.get("model", ""),
                                            _fmt(self.meta.get("beta", "")),
                                            self.meta.get("seed", "")))]
        body = "\n".join(",".join(map(str, row)) for row in out.tolist())
        path.write_text("\n".join(lines) + "\n" + body + "\n")

    @classmethod
    def read_csv(cls, path) -> "SampleSet":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
                info = next(reader)
            except StopIteration:
                raise ConfigError(f"{path}: missing sample-file header") from None
            if [h.strip() for h in header] != ["d", "n", "N", "model", "beta", "seed"]:
                raise ConfigError(f"{path}: unexpected header {header}")
            try:
                d, n, N = int(info[0]), int(info[1]), int(info[2])
            except (ValueError, IndexError):
                raise ConfigError(f"{path}: malformed header values {info}") from None
            try:
                rows = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
            except ValueError as exc:
                raise ConfigError(f"{path}: unreadable sample rows ({exc})") from None
        if rows.shape != (N, d):
            raise ConfigError(f"{path}: expected {N} rows of {d} values, got {rows.shape}")
        vals = (rows + 1) // 2 if n == 2 else rows - 1
        if n == 2 and not np.all(np.abs(rows) == 1):
            raise ConfigError(f"{path}: values must be -1 or +1 for n=2")
        meta = {"model": info[3], "beta": float(info[4]) if info[4] else None,
                "seed": int(info[5]) if info[5].lstrip("-").isdigit() else (info[5] or None)}
        return cls(vals, n, meta)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


@dataclass
class MomentSet:
    """Sketched moments for every node of a tree.

    ``A[node]`` (non-root nodes) has shape ``(S width, T width)``;
    ``B[node]`` (internal nodes) has shape
    ``(S width of left child, S width of right child, T width of node)``;
    ``leafP[leaf]`` has shape ``(leaf states, T width of leaf)``.
    ``raw`` keeps unnormalized sums and the sample count when the moments
    come from samples, so that two sets can be merged exactly.
    """

    tree: DimensionTree
    A: dict[NodeId, np.ndarray]
    B: dict[NodeId, np.ndarray]
    leafP: dict[NodeId, np.ndarray]
    N: int | None = None
    raw: dict | None = field(default=None, repr=False)

    def widths(self) -> dict[NodeId, tuple[int, int]]:
        return {nd: a.shape for nd, a in self.A.items()}


def _scales(bases, node):
    return bases[node, "S"].scale if (node, "S") in bases else 1.0, bases[node, "T"].scale


def _normalize_raw(tree, bases, raw, N) -> MomentSet:
    A, B, P = {}, {}, {}
    for node, s in raw["A"].items():
        ss, ts = _scales(bases, node)
        A[node] = s * (ss * ts / N)
    for node, s in raw["B"].items():
        left, right = tree.children(node)
        B[node] = s * (bases[left, "S"].scale * bases[right, "S"].scale
                       * bases[node, "T"].scale / N)
    for node, s in raw["P"].items():
        P[node] = s * (bases[node, "T"].scale / N)
    return MomentSet(tree, A, B, P, N, raw)


def _check_bases(tree, bases):
    for node in tree.nodes:
        if (node, "T") not in bases or (node != ROOT and (node, "S") not in bases):
            raise ShapeError(f"missing sketch basis for node {node}")
    if bases[ROOT, "T"].width != 1:
        raise ShapeError(f"root T basis must have width 1, got {bases[ROOT, 'T'].width}")


def estimate_moments(tree: DimensionTree, samples: SampleSet,
                     bases: Mapping[tuple[NodeId, str], SketchBasis], *,
                     chunk_size: int | None = None, threads: int = 1,
                     debug: bool = False) -> MomentSet:
    """Empirical moments ``A``, ``B`` and leaf sketches from samples.

    Samples are processed in fixed chunks; per-node sums are accumulated in
    raw (unnormalized) form and scaled by ``1/N`` and the basis normalizers
    at the end.
    """
    if samples.d != tree.d or samples.n != tree.n:
        raise ShapeError(f"samples have d={samples.d}, n={samples.n}; tree has d={tree.d}, n={tree.n}")
    _check_bases(tree, bases)
    X = samples.values
    N = samples.N
    if chunk_size is None:
        total = sum(b.width for b in bases.values())
        chunk_size = int(min(65536, max(256, CHUNK_BUDGET // max(total, 1))))

    raw = {"A": {}, "B": {}, "P": {}}
    nonroot = [nd for nd in tree.nodes if nd != ROOT]
    for nd in nonroot:
        raw["A"][nd] = np.zeros((bases[nd, "S"].width, bases[nd, "T"].width))
    for nd in tree.internal:
        left, right = tree.children(nd)
        raw["B"][nd] = np.zeros((bases[left, "S"].width, bases[right, "S"].width,
                                 bases[nd, "T"].width))
    for nd in tree.leaves:
        raw["P"][nd] = np.zeros((tree.leaf_states, bases[nd, "T"].width))

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for start in range(0, N, chunk_size):
            Xc = X[start:start + chunk_size].astype(np.int64)
            S = {nd: bases[nd, "S"].raw(Xc) for nd in nonroot}
            T = {nd: bases[nd, "T"].raw(Xc) for nd in tree.nodes}
            if debug:
                _check_row_norms(bases, S, T, nonroot)

            def node_a(nd):
                raw["A"][nd] += S[nd].T @ T[nd]

            def node_b(nd):
                left, right = tree.children(nd)
                sl, sr, tn = S[left], S[right], T[nd]
                acc = raw["B"][nd]
                if tn.shape[1] <= 8:
                    # narrow T (near the root): one gemm per T column
                    for k in range(tn.shape[1]):
                        acc[:, :, k] += (sl * tn[:, k:k + 1]).T @ sr
                else:
                    kr = (sl[:, :, None] * sr[:, None, :]).reshape(len(Xc), -1)
                    acc += (kr.T @ tn).reshape(acc.shape)

            def node_p(nd):
                code = config_index(Xc[:, list(tree.sites0(nd))], tree.n)
                onehot = np.zeros((len(Xc), tree.leaf_states))
                onehot[np.arange(len(Xc)), code] = 1.0
                raw["P"][nd] += onehot.T @ T[nd]

            jobs = [(node_a, nd) for nd in nonroot] + [(node_b, nd) for nd in tree.internal] \
                + [(node_p, nd) for nd in tree.leaves]
            if pool is None:
                for fn, nd in jobs:
                    fn(nd)
            else:
                list(pool.map(lambda job: job[0](job[1]), jobs))
    finally:
        if pool is not None:
            pool.shutdown()
    raw["N"] = N
    return _normalize_raw(tree, bases, raw, N)


def _check_row_norms(bases, S, T, nonroot):
    for nd in nonroot:
        sn = np.linalg.norm(bases[nd, "S"].scale * S[nd], axis=1)
        tn = np.linalg.norm(bases[nd, "T"].scale * T[nd], axis=1)
        worst = float(np.max(sn * tn))
        if worst > 1.0 + 1e-12:
            raise AssertionError(f"per-sample moment norm {worst} > 1 at node {nd}")


def merge_moments(m1: MomentSet, m2: MomentSet,
                  bases: Mapping[tuple[NodeId, str], SketchBasis]) -> MomentSet:
    """Moments of the concatenated sample sets, from the raw sums."""
    if m1.raw is None or m2.raw is None:
        raise ValueError("only sample-based moment sets can be merged")
    raw = {key: {nd: m1.raw[key][nd] + m2.raw[key][nd] for nd in m1.raw[key]}
           for key in ("A", "B", "P")}
    raw["N"] = m1.N + m2.N
    return _normalize_raw(m1.tree, bases, raw, raw["N"])


def _marginal(p: np.ndarray, keep: list[int]) -> np.ndarray:
    """Sum out all axes not in ``keep`` and order the rest as ``keep``."""
    others = tuple(i for i in range(p.ndim) if i not in keep)
    m = p.sum(axis=others) if others else p
    kept_sorted = sorted(keep)
    perm = [kept_sorted.index(s) for s in keep]
    return np.transpose(m, perm) if perm != list(range(len(perm))) else m


def moments_from_density(tree: DimensionTree, p: np.ndarray,
                         bases: Mapping[tuple[NodeId, str], SketchBasis], *,
                         max_sites: int = 20) -> MomentSet:
    """Exact moments of a dense density by marginalization and contraction.

    ``p`` has shape ``(n,) * d`` with site 1 on axis 0. Each sketch only
    depends on its eligible sites, so ``p`` is first marginalized onto the
    sites a moment actually touches.
    """
    if tree.d > max_sites:
        raise CapacityError(f"dense density over {tree.d} sites exceeds cap of {max_sites}")
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (tree.n,) * tree.d:
        raise ShapeError(f"density shape {p.shape} does not match tree (n={tree.n}, d={tree.d})")
    _check_bases(tree, bases)
    n = tree.n
    A, B, P = {}, {}, {}
    for nd in tree.nodes:
        if nd == ROOT:
            continue
        sb, tb = bases[nd, "S"], bases[nd, "T"]
        keep = list(sb.sites) + list(tb.sites)
        pm = _marginal(p, keep).reshape(n ** len(sb.sites), n ** len(tb.sites))
        A[nd] = sb.matrix().T @ pm @ tb.matrix()
    for nd in tree.internal:
        left, right = tree.children(nd)
        s1, s2, tb = bases[left, "S"], bases[right, "S"], bases[nd, "T"]
        keep = list(s1.sites) + list(s2.sites) + list(tb.sites)
        pm = _marginal(p, keep).reshape(n ** len(s1.sites), n ** len(s2.sites),
                                        n ** len(tb.sites))
        B[nd] = np.einsum("ai,bj,abc,ck->ijk", s1.matrix(), s2.matrix(), pm, tb.matrix(),
                          optimize=True)
    for nd in tree.leaves:
        tb = bases[nd, "T"]
        keep = list(tree.sites0(nd)) + list(tb.sites)
        pm = _marginal(p, keep).reshape(tree.leaf_states, n ** len(tb.sites))
        P[nd] = pm @ tb.matrix()
    return MomentSet(tree, A, B, P, None, None)
