"""Ising ground-truth densities and samplers.

Energies sum every interacting unordered pair once::

    E(x) = sum_{i<j} J_ij x_i x_j,      p*(x) ∝ exp(-beta E(x))

Chain models couple ``|i-j| = 1`` with ``-1/2`` and ``|i-j| = 2`` with
``-1/6`` (ferro; antiferro flips both signs), open boundary. Grid models
couple lattice nearest neighbours with ``J = -1`` (ferro) or ``+1`` with
periodic wraparound; one term per site and direction, so a ``d1 x d2``
grid has ``2 * d1 * d2`` terms. Grid sites are serialized row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError
from .sketch import SampleSet

CHAIN = "chain-next-nearest"
GRID = "grid-periodic"
_TOPOLOGY_ALIASES = {"chain": CHAIN, CHAIN: CHAIN, "grid": GRID, GRID: GRID}

DEFAULT_MAX_SITES = 20


@dataclass(frozen=True)
class IsingSpec:
    topology: str
    shape: tuple[int, ...]
    coupling: str = "ferro"
    beta: float = 0.6

    def __post_init__(self):
        topo = _TOPOLOGY_ALIASES.get(self.topology)
        if topo is None:
            raise ConfigError(f"unknown topology {self.topology!r}")
        object.__setattr__(self, "topology", topo)
        shape = (self.shape,) if isinstance(self.shape, int) else tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if topo == CHAIN and len(shape) != 1:
            raise ConfigError(f"chain shape must have one entry, got {shape}")
        if topo == GRID and len(shape) != 2:
            raise ConfigError(f"grid shape must have two entries, got {shape}")
        if any(s < 1 for s in shape):
            raise ConfigError(f"shape entries must be positive, got {shape}")
        if self.coupling not in ("ferro", "antiferro"):
            raise ConfigError(f"coupling must be 'ferro' or 'antiferro', got {self.coupling!r}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")

    @property
    def d(self) -> int:
        return int(np.prod(self.shape))

    @property
    def name(self) -> str:
        dims = "x".join(map(str, self.shape))
        return f"{'chain' if self.topology == CHAIN else 'grid'}{dims}-{self.coupling}"

    def with_beta(self, beta: float) -> "IsingSpec":
        return IsingSpec(self.topology, self.shape, self.coupling, beta)

    def terms(self) -> list[tuple[int, int, float]]:
        """Interaction terms ``(i, j, J)`` with 0-based site labels."""
        sign = 1.0 if self.coupling == "antiferro" else -1.0
        out = []
        if self.topology == CHAIN:
            d = self.shape[0]
            for i in range(d):
                if i + 1 < d:
                    out.append((i, i + 1, sign / 2))
                if i + 2 < d:
                    out.append((i, i + 2, sign / 6))
        else:
            d1, d2 = self.shape
            for i in range(d1):
                for j in range(d2):
                    s = i * d2 + j
                    out.append((s, ((i + 1) % d1) * d2 + j, sign))
                    out.append((s, i * d2 + (j + 1) % d2, sign))
        return out

    def coupling_matrix(self) -> np.ndarray:
        """Symmetric ``J`` with ``E(x) = x^T J x / 2``."""
        jm = np.zeros((self.d, self.d))
        for i, j, v in self.terms():
            jm[i, j] += v
            jm[j, i] += v
        return jm

    def site_distance(self) -> np.ndarray:
        """Chain index distance, or periodic Manhattan distance on the grid."""
        if self.topology == CHAIN:
            idx = np.arange(self.d)
            return np.abs(idx[:, None] - idx[None, :])
        d1, d2 = self.shape
        r, c = np.divmod(np.arange(self.d), d2)
        dr = np.abs(r[:, None] - r[None, :])
        dc = np.abs(c[:, None] - c[None, :])
        return np.minimum(dr, d1 - dr) + np.minimum(dc, d2 - dc)

    def to_dict(self) -> dict:
        return {"topology": self.topology, "shape": list(self.shape),
                "coupling": self.coupling, "beta": self.beta}


def energy(spec: IsingSpec, config) -> np.ndarray | float:
    """Energy of one spin configuration or of each row of a batch."""
    x = np.asarray(config, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.d:
        raise ValueError(f"configuration length {x.shape[1]} != d={spec.d}")
    e = np.zeros(x.shape[0])
    for i, j, v in spec.terms():
        e += v * x[:, i] * x[:, j]
    return float(e[0]) if single else e


def all_spins(d: int) -> np.ndarray:
    """All ``2**d`` spin configurations, site 1 slowest, -1 before +1."""
    idx = np.indices((2,) * d).reshape(d, -1).T
    return (2 * idx - 1).astype(np.int8)


def dense_density(spec: IsingSpec, max_sites: int = DEFAULT_MAX_SITES) -> np.ndarray:
    """Exact ``p*`` as an array of shape ``(2,) * d`` (index 0 is spin -1)."""
    if spec.d > max_sites:
        raise CapacityError(f"{spec.name}: {spec.d} sites exceeds dense cap of {max_sites}")
    e = energy(spec, all_spins(spec.d))
    w = np.exp(-spec.beta * (e - e.min()))
    return (w / w.sum()).reshape((2,) * spec.d)


def _meta(spec: IsingSpec, seed, sampler: str) -> dict:
    return {"model": spec.name, "beta": float(spec.beta), "seed": seed, "sampler": sampler}


def sample_exact(spec: IsingSpec, N: int, seed: int, *,
                 max_sites: int = DEFAULT_MAX_SITES, p: np.ndarray | None = None) -> SampleSet:
    """``N`` i.i.d. draws by inverse CDF over the enumerated density."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if p is None:
        p = dense_density(spec, max_sites)
    cdf = np.cumsum(p.ravel())
    rng = np.random.default_rng(seed)
    u = rng.random(N) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    bits = (idx[:, None] >> np.arange(spec.d - 1, -1, -1)[None, :]) & 1
    return SampleSet(bits.astype(np.int8), 2, _meta(spec, seed, "exact"))


def sample_gibbs(spec: IsingSpec, N: int, seed: int, burn_in: int = 10_000, thin: int = 10,
                 n_chains: int | None = None) -> SampleSet:
    """Single-site heat-bath Gibbs sampling.

    ``n_chains`` independent chains (default ``min(N, 1000)``) advance
    together; after ``burn_in`` sweeps each chain keeps one configuration
    every ``thin`` sweeps. Rows are ordered by draw, then chain index.
    """
    if burn_in < 1 or thin < 1:
        raise ValueError("burn_in and thin must be >= 1")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    chains = min(N, n_chains or 1000)
    per_chain = -(-N // chains)
    rng = np.random.default_rng(seed)
    jm = spec.coupling_matrix()
    np.fill_diagonal(jm, 0.0)
    nbrs = [np.nonzero(jm[i])[0] for i in range(spec.d)]
    wts = [jm[i, nb] for i, nb in enumerate(nbrs)]
    x = rng.choice(np.array([-1.0, 1.0]), size=(chains, spec.d))
    beta = spec.beta

    def sweep():
        u = rng.random((chains, spec.d))
        for i in range(spec.d):
            h = x[:, nbrs[i]] @ wts[i]
            p_up = 1.0 / (1.0 + np.exp(2.0 * beta * h))
            x[:, i] = np.where(u[:, i] < p_up, 1.0, -1.0)

    for _ in range(burn_in):
        sweep()
    out = np.empty((per_chain, chains, spec.d), dtype=np.int8)
    for k in range(per_chain):
        for _ in range(thin):
            sweep()
        out[k] = x
    spins = out.reshape(-1, spec.d)[:N]
    meta = _meta(spec, seed, "gibbs")
    meta.update(burn_in=burn_in, thin=thin, chains=chains)
    return SampleSet.from_spins(spins, meta)


def checkerboard_overlap(spins: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """``|sum_ij x_ij (-1)^(i+j)| / (d1*d2)`` for each row."""
    d1, d2 = shape
    mask = (-1.0) ** np.add.outer(np.arange(d1), np.arange(d2)).ravel()
    return np.abs(np.asarray(spins, dtype=np.float64) @ mask) / (d1 * d2)
