"""Fit a trimmed hierarchical tensor network from sketched moments.

For every internal node the children's moment matrices are replaced by
their best rank-``r`` approximations, the reduced core equation is solved
with pseudo-inverses, and the solution is rotated onto the retained right
singular subspaces. Writing ``P_r(A) = U S V^T``, the rotated core is

    C[:, :, g] = sum_h  S_L^-1 U_L^T  B[:, :, h]  U_R S_R^-1  V_node[h, g]

which equals ``V_L^T G V_R`` contracted with ``V_node`` without forming the
(possibly large) intermediate ``G``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .network import HierarchicalTensorNetwork
from .sketch import MomentSet
from .tensor import (DEFAULT_PINV_TOL, SvdResult, as_matrix, inverse_singular_values, pinv,
                     svd, truncate_rank)
from .tree import ROOT, NodeId

logger = logging.getLogger(__name__)

DEFAULT_RANK_TOL = 1e-10


@dataclass(frozen=True)
class RankSchedule:
    """Per-level target ranks, or a relative singular-value threshold.

    ``ranks[l - 1]`` is the rank kept at level ``l`` (``l = 1..L``). With
    ``ranks=None`` each node keeps the singular values ``>= tol * s_1``.
    ``overrides`` pins the rank of individual nodes.
    """

    ranks: tuple[int, ...] | None = None
    tol: float = DEFAULT_RANK_TOL
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ranks is not None:
            object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
            if any(r < 1 for r in self.ranks):
                raise ValueError(f"ranks must be >= 1, got {self.ranks}")

    @classmethod
    def uniform(cls, r: int, levels: int) -> "RankSchedule":
        return cls(ranks=(r,) * levels)

    def with_level(self, level: int, r: int, levels: int) -> "RankSchedule":
        """Copy with the rank at ``level`` replaced (other levels kept or auto)."""
        if self.ranks is None:
            overrides = dict(self.overrides)
            overrides[("level", level)] = r
            return RankSchedule(None, self.tol, overrides)
        ranks = list(self.ranks)
        ranks[level - 1] = r
        return RankSchedule(tuple(ranks), self.tol, dict(self.overrides))

    def target(self, node: NodeId, s: np.ndarray) -> int:
        if node in self.overrides:
            r = self.overrides[node]
        elif ("level", node.level) in self.overrides:
            r = self.overrides["level", node.level]
        elif self.ranks is not None:
            if len(self.ranks) < node.level:
                raise ValueError(f"rank schedule {self.ranks} has no entry for level {node.level}")
            r = self.ranks[node.level - 1]
        else:
            r = int(np.count_nonzero(s >= self.tol * s[0])) if s.size and s[0] > 0 else 1
        return max(1, min(int(r), s.size))

    def describe(self) -> str:
        if self.ranks is not None:
            base = "-".join(str(r) for r in self.ranks)
        else:
            base = f"auto{self.tol:g}"
        extra = [f"{k[1] if isinstance(k, tuple) and k[0] == 'level' else k}={v}"
                 for k, v in self.overrides.items()]
        return base + ("[" + ",".join(extra) + "]" if extra else "")


@dataclass
class NodeReport:
    node: NodeId
    rank_left: int
    rank_right: int
    ratio_left: float
    ratio_right: float
    residual: float
    width_left: tuple[int, int]
    width_right: tuple[int, int]
    near_singular: bool

    def row(self) -> dict:
        return {"node": str(self.node), "level": self.node.level, "index": self.node.index,
                "rank_left": self.rank_left, "rank_right": self.rank_right,
                "sigma_ratio_left": self.ratio_left, "sigma_ratio_right": self.ratio_right,
                "residual": self.residual,
                "A_left_shape": "x".join(map(str, self.width_left)),
                "A_right_shape": "x".join(map(str, self.width_right)),
                "near_singular": int(self.near_singular)}


@dataclass
class CoreSolveReport:
    nodes: dict[NodeId, NodeReport] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [self.nodes[nd].row() for nd in sorted(self.nodes)]

    @property
    def max_residual(self) -> float:
        return max((r.residual for r in self.nodes.values()), default=0.0)


def _trim(a: np.ndarray, r: int | None) -> SvdResult:
    f = svd(a)
    return f if r is None else f.truncated(max(1, min(r, f.rank)))


def solve_core(a_left, a_right, b, r: int, rel_tol: float = DEFAULT_PINV_TOL
               ) -> tuple[np.ndarray, SvdResult, SvdResult]:
    """``G[:, :, g] = P_r(a_left)^+ B[:, :, g] (P_r(a_right)^+)^T``.

    Returns ``G`` with the rank-``r`` SVDs of both trimmed matrices, whose
    ``V`` factors span the retained subspaces. ``r`` is clamped to each
    matrix's dimensions.
    """
    a_left, a_right = as_matrix(a_left), as_matrix(a_right)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 3 or b.shape[0] != a_left.shape[0] or b.shape[1] != a_right.shape[0]:
        raise ShapeError(f"B of shape {b.shape} does not conform to A_left {a_left.shape} "
                         f"and A_right {a_right.shape}")
    fl, fr = _trim(a_left, r), _trim(a_right, r)
    for side, f in (("left", fl), ("right", fr)):
        if f.S.size and f.S[0] > 0 and f.S[-1] / f.S[0] < rel_tol:
            logger.info("near-singular trim on %s: sigma_r/sigma_1 = %.3g", side, f.S[-1] / f.S[0])
    pl = pinv(fl.reconstruct(), rel_tol) if fl.S[0] > 0 else np.zeros(a_left.shape[::-1])
    pr = pinv(fr.reconstruct(), rel_tol) if fr.S[0] > 0 else np.zeros(a_right.shape[::-1])
    g = np.einsum("ia,abk,jb->ijk", pl, b, pr, optimize=True)
    return g, fl, fr


def regauge(g, v_left, v_right, v_self) -> np.ndarray:
    """``out[:, :, c] = sum_h v_left^T g[:, :, h] v_right v_self[h, c]``."""
    g = np.asarray(g, dtype=np.float64)
    v_left, v_right, v_self = as_matrix(v_left), as_matrix(v_right), as_matrix(v_self)
    if g.ndim != 3:
        raise ShapeError(f"g must be a 3-tensor, got shape {g.shape}")
    for name, v, dim in (("v_left", v_left, g.shape[0]), ("v_right", v_right, g.shape[1]),
                         ("v_self", v_self, g.shape[2])):
        if v.shape[0] != dim:
            raise ShapeError(f"{name} has {v.shape[0]} rows, g mode has size {dim}")
    return np.einsum("ai,abh,bj,hc->ijc", v_left, g, v_right, v_self, optimize=True)


def regauge_leaf(leaf_p, v_self) -> np.ndarray:
    leaf_p, v_self = as_matrix(leaf_p), as_matrix(v_self)
    if leaf_p.shape[1] != v_self.shape[0]:
        raise ShapeError(f"leafP has {leaf_p.shape[1]} columns, v_self has {v_self.shape[0]} rows")
    return leaf_p @ v_self


def _half_inverse(f: SvdResult, rel_tol: float) -> tuple[np.ndarray, np.ndarray]:
    """``S^-1 U^T`` (zeroing cut singular values) and the kept ``U`` columns."""
    smax = float(f.S[0]) if f.S.size else 0.0
    inv = inverse_singular_values(f.S, rel_tol, smax)
    return inv[:, None] * f.U.T, f.U[:, inv > 0]


def _ratio(f: SvdResult) -> float:
    return float(f.S[-1] / f.S[0]) if f.S.size and f.S[0] > 0 else 0.0


def fit(tree, moments: MomentSet, ranks: RankSchedule | None = None, *,
        rel_tol: float = DEFAULT_PINV_TOL, threads: int = 1
        ) -> tuple[HierarchicalTensorNetwork, CoreSolveReport]:
    """Trimmed hierarchical network from a complete moment set."""
    ranks = ranks or RankSchedule()
    if moments.tree != tree:
        raise ShapeError("moment set was computed on a different tree")
    nonroot = [nd for nd in tree.nodes if nd != ROOT]
    missing = [nd for nd in nonroot if nd not in moments.A] + \
        [nd for nd in tree.internal if nd not in moments.B] + \
        [nd for nd in tree.leaves if nd not in moments.leafP]
    if missing:
        raise ShapeError(f"moment set is missing nodes {missing[:4]}")

    def trim(nd):
        full = svd(moments.A[nd])
        return nd, full.truncated(ranks.target(nd, full.S))

    def core(nd):
        left, right = tree.children(nd)
        fl, fr = factors[left], factors[right]
        hl, ul = _half_inverse(fl, rel_tol)
        hr, ur = _half_inverse(fr, rel_tol)
        b = moments.B[nd]
        if b.shape[:2] != (fl.U.shape[0], fr.U.shape[0]):
            raise ShapeError(f"B at {nd} has shape {b.shape}, children A have "
                             f"{moments.A[left].shape} and {moments.A[right].shape}")
        v_self = np.ones((1, 1)) if nd == ROOT else factors[nd].V
        c = np.einsum("ia,abh,jb,hc->ijc", hl, b, hr, v_self, optimize=True)
        proj = np.einsum("ia,abh,jb->ijh", ul @ ul.T, b, ur @ ur.T, optimize=True)
        bn = np.linalg.norm(b)
        resid = float(np.linalg.norm(proj - b) / bn) if bn > 0 else 0.0
        rl, rr = _ratio(fl), _ratio(fr)
        near = rl < rel_tol or rr < rel_tol
        if near:
            logger.info("near-singular trim at %s (sigma ratios %.3g, %.3g)", nd, rl, rr)
        rep = NodeReport(nd, fl.rank, fr.rank, rl, rr, resid, moments.A[left].shape,
                         moments.A[right].shape, near)
        return nd, c, rep

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    mapper = pool.map if pool is not None else map
    try:
        factors = dict(mapper(trim, nonroot))
        results = list(mapper(core, tree.internal))
    finally:
        if pool is not None:
            pool.shutdown()

    report = CoreSolveReport()
    internal = {}
    for nd, c, rep in results:
        internal[nd] = c
        report.nodes[nd] = rep
    leaf_cores = {leaf: regauge_leaf(moments.leafP[leaf], factors[leaf].V) for leaf in tree.leaves}
    net = HierarchicalTensorNetwork(tree, leaf_cores, internal,
                                    {"ranks": ranks.describe(), "pinv_tol": rel_tol,
                                     "N": moments.N})
    return net, report


def fit_dense_path(tree, moments: MomentSet, ranks: RankSchedule | None = None, *,
                   rel_tol: float = DEFAULT_PINV_TOL) -> HierarchicalTensorNetwork:
    """Reference fit forming every ``G`` explicitly via :func:`solve_core`.

    Only practical for small sketch widths; used to cross-check :func:`fit`.
    """
    ranks = ranks or RankSchedule()
    vs = {}
    for nd in tree.nodes:
        if nd != ROOT:
            full = svd(moments.A[nd])
            vs[nd] = full.truncated(ranks.target(nd, full.S)).V
    internal = {}
    for nd in tree.internal:
        left, right = tree.children(nd)
        r_l, r_r = vs[left].shape[1], vs[right].shape[1]
        pl = pinv(truncate_rank(moments.A[left], r_l), rel_tol)
        pr = pinv(truncate_rank(moments.A[right], r_r), rel_tol)
        g = np.einsum("ia,abk,jb->ijk", pl, moments.B[nd], pr, optimize=True)
        v_self = np.ones((1, 1)) if nd == ROOT else vs[nd]
        internal[nd] = regauge(g, vs[left], vs[right], v_self)
    leaf_cores = {leaf: regauge_leaf(moments.leafP[leaf], vs[leaf]) for leaf in tree.leaves}
    return HierarchicalTensorNetwork(tree, leaf_cores, internal)
