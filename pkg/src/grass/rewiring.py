"""Random regular rewiring via the Permutation Model, plus structural probes.

Sampling draws r/2 independent uniform permutations and connects every node i
to sigma_j(i), yielding an r-regular pseudograph. Self-loops and multi-edges
are removed without re-sampling; the surviving simple edges are superimposed
onto the base graph as tagged directed pairs. Diameter and spectral-gap
measurements are analysis tools and may use dense solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import NumericError, ValidationError
from .graphs import Graph, _frozen


@dataclass(frozen=True)
class Pseudograph:
    """Undirected edge multiset from the Permutation Model, loops allowed."""

    num_nodes: int
    edge_multiset: np.ndarray  # (m, 2) int64 pairs; row order follows the sampler


@dataclass(frozen=True)
class RewiredGraph:
    """A base graph plus directed added edges; base edges are untouched."""

    base: Graph
    added_edges: np.ndarray  # (A, 2) int64, opposite-direction pairs adjacent

    @property
    def num_added(self) -> int:
        return self.added_edges.shape[0]

    @property
    def num_edges(self) -> int:
        return self.base.num_edges + self.num_added

    @property
    def edges(self) -> np.ndarray:
        """All directed edges of H: base edges first, then added edges."""
        return np.concatenate([self.base.edges, self.added_edges], axis=0)

    @property
    def edge_origin(self) -> np.ndarray:
        """Per-edge tag: 0 for base edges, 1 for added edges."""
        return np.concatenate(
            [
                np.zeros(self.base.num_edges, dtype=np.int64),
                np.ones(self.num_added, dtype=np.int64),
            ]
        )


@dataclass(frozen=True)
class RewireConfig:
    r: int
    seed: int | None = None
    retry_until_simple: bool = False

    def __post_init__(self) -> None:
        if self.r < 0 or self.r % 2 != 0:
            raise ValidationError(f"rewiring degree must be even and >= 0, got {self.r}")


def pseudograph_from_permutations(
    num_nodes: int, permutations: np.ndarray
) -> Pseudograph:
    """Assemble edges {i, sigma_j(i)} from explicit permutation rows."""
    perms = np.asarray(permutations, dtype=np.int64).reshape(-1, num_nodes)
    blocks = []
    index = np.arange(num_nodes, dtype=np.int64)
    for sigma in perms:
        if not np.array_equal(np.sort(sigma), index):
            raise ValidationError("each row must be a permutation of [0, num_nodes)")
        blocks.append(np.stack([index, sigma], axis=1))
    edges = (
        np.concatenate(blocks, axis=0)
        if blocks
        else np.zeros((0, 2), dtype=np.int64)
    )
    return Pseudograph(num_nodes=num_nodes, edge_multiset=_frozen(edges))


def sample_permutation_pseudograph(
    num_nodes: int, r: int, rng: np.random.Generator
) -> Pseudograph:
    if r < 2 or r % 2 != 0:
        raise ValidationError(f"sampler requires even r >= 2, got {r}")
    if num_nodes < 1:
        raise ValidationError("sampler requires at least one node")
    perms = np.stack(
        [rng.permutation(num_nodes).astype(np.int64) for _ in range(r // 2)]
    )
    return pseudograph_from_permutations(num_nodes, perms)


def is_simple(pg: Pseudograph) -> bool:
    """True when the multiset has no loop and no repeated unordered pair."""
    pairs = np.sort(pg.edge_multiset, axis=1)
    if pairs.size == 0:
        return True
    if (pairs[:, 0] == pairs[:, 1]).any():
        return False
    return np.unique(pairs, axis=0).shape[0] == pairs.shape[0]


def simplify(pg: Pseudograph | np.ndarray) -> np.ndarray:
    """Drop loops and collapse repeats; returns sorted unique (k, 2) pairs."""
    pairs = pg.edge_multiset if isinstance(pg, Pseudograph) else np.asarray(pg)
    pairs = np.sort(pairs.reshape(-1, 2).astype(np.int64), axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if pairs.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


def superimpose(g: Graph, simple_edges: np.ndarray) -> RewiredGraph:
    """Add each undirected pair as two directed edges tagged as added.

    Pairs that coincide with existing base edges still produce new directed
    edges, so superimposition can create multi-edges on purpose.
    """
    pairs = np.asarray(simple_edges, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= g.num_nodes):
        raise ValidationError("added edge endpoint out of range for base graph")
    added = np.empty((2 * pairs.shape[0], 2), dtype=np.int64)
    added[0::2] = pairs
    added[1::2] = pairs[:, ::-1]
    return RewiredGraph(base=g, added_edges=_frozen(added))


def rewire(
    g: Graph, cfg: RewireConfig, rng: np.random.Generator | None = None
) -> RewiredGraph:
    """Sample, simplify, and superimpose; r=0 returns H == G unchanged."""
    if cfg.r == 0:
        return superimpose(g, np.zeros((0, 2), dtype=np.int64))
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pg = sample_permutation_pseudograph(g.num_nodes, cfg.r, rng)
    if cfg.retry_until_simple:
        for _ in range(10_000):
            if is_simple(pg):
                break
            pg = sample_permutation_pseudograph(g.num_nodes, cfg.r, rng)
        else:
            raise NumericError(
                "no simple sample found in 10000 tries; "
                "retry_until_simple is impractical at this n and r"
            )
    return superimpose(g, simplify(pg))


def _undirected_adjacency(edge_set: np.ndarray, num_nodes: int) -> csr_matrix:
    pairs = np.asarray(edge_set, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= num_nodes):
        raise ValidationError("edge endpoint out of range")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    data = np.ones(rows.shape[0], dtype=np.float64)
    adj = csr_matrix((data, (rows, cols)), shape=(num_nodes, num_nodes))
    adj.data[:] = 1.0  # collapse parallel entries
    return adj


def diameter(edge_set: np.ndarray, num_nodes: int) -> float:
    """Max finite eccentricity over all sources; inf when disconnected."""
    if num_nodes <= 1:
        return 0.0
    adj = _undirected_adjacency(edge_set, num_nodes)
    dist = shortest_path(adj, method="D", directed=False, unweighted=True)
    worst = dist.max()
    return math.inf if np.isinf(worst) else float(worst)


def spectral_gap(edge_set: np.ndarray, num_nodes: int) -> float:
    """Smallest positive eigenvalue of the combinatorial Laplacian."""
    if num_nodes == 0:
        raise ValidationError("spectral gap of an empty graph is undefined")
    adj = _undirected_adjacency(edge_set, num_nodes).toarray()
    np.fill_diagonal(adj, 0.0)
    laplacian = np.diag(adj.sum(axis=1)) - adj
    eigenvalues = np.linalg.eigvalsh(laplacian)
    tolerance = max(1e-8, eigenvalues[-1] * num_nodes * np.finfo(np.float64).eps)
    positive = eigenvalues[eigenvalues > tolerance]
    if positive.size == 0:
        raise ValidationError("graph has no positive Laplacian eigenvalue")
    return float(positive[0])


def simplicity_rate(
    num_nodes: int, r: int, trials: int, rng: np.random.Generator
) -> float:
    """Monte-Carlo estimate of Pr[sampled pseudograph is simple]."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if r == 0:
        return 1.0
    hits = 0
    for _ in range(trials):
        if is_simple(sample_permutation_pseudograph(num_nodes, r, rng)):
            hits += 1
    return hits / trials
