"""Structural encodings: random walk probabilities, degrees, and encoders.

The numpy half computes transition matrices and their powers (RRWP tensors)
plus degree tables, and persists them in a versioned binary cache so the
walk probabilities are computed once per dataset. The torch half batch
normalizes the raw lookups and maps them, together with input features and
degree encodings, into model width.
"""

from __future__ import annotations

import concurrent.futures
import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.sparse import csr_matrix
from torch import nn

from .errors import CacheInvalidError, ValidationError
from .graphs import Graph, GraphDataset, file_sha256, load_jsonl
from .layers import RmsSafeBatchNorm1d
from .rewiring import RewiredGraph

CACHE_MAGIC = b"GRWP"
CACHE_VERSION = 1


@dataclass(frozen=True)
class RrwpTensor:
    """Sparse powers P_1..P_k of the walk transition matrix of one graph."""

    num_nodes: int
    k: int
    steps: tuple  # k csr matrices, step h at index h-1


@dataclass(frozen=True)
class DegreeTable:
    """Per-node degrees of the base graph, before any rewiring."""

    out_degree: np.ndarray
    in_degree: np.ndarray
    max_out: int
    max_in: int

    @staticmethod
    def from_graph(g: Graph) -> "DegreeTable":
        out_deg = g.out_degrees()
        in_deg = g.in_degrees()
        return DegreeTable(
            out_degree=out_deg,
            in_degree=in_deg,
            max_out=int(out_deg.max(initial=0)),
            max_in=int(in_deg.max(initial=0)),
        )


@dataclass(frozen=True)
class CacheEntry:
    degrees: DegreeTable
    rrwp: RrwpTensor
    diag: np.ndarray  # (V, k) float64, diag[i, h-1] = P_h[i][i]


def transition_matrix(g: Graph) -> csr_matrix:
    """Row-normalized adjacency T[i][j] = A[i][j] / d_out(i); sink rows stay 0.

    Multi-edges contribute multiplicity to both A and the out-degree.
    """
    n = g.num_nodes
    data = np.ones(g.num_edges, dtype=np.float64)
    adj = csr_matrix((data, (g.heads, g.tails)), shape=(n, n))
    adj.sum_duplicates()
    out_deg = np.asarray(adj.sum(axis=1)).ravel()
    inverse = np.divide(1.0, out_deg, out=np.zeros_like(out_deg), where=out_deg > 0)
    transition = csr_matrix((inverse, (np.arange(n), np.arange(n))), shape=(n, n)) @ adj
    transition.sort_indices()
    return transition


def rrwp(g: Graph, k: int) -> RrwpTensor:
    """Stack sparse powers T, T^2, ..., T^k by repeated propagation."""
    if k < 1:
        raise ValidationError(f"walk length k must be >= 1, got {k}")
    transition = transition_matrix(g)
    steps = [transition]
    for _ in range(k - 1):
        nxt = steps[-1] @ transition
        nxt.sort_indices()
        steps.append(nxt)
    return RrwpTensor(num_nodes=g.num_nodes, k=k, steps=tuple(steps))


def node_diagonals(p: RrwpTensor) -> np.ndarray:
    """(V, k) array of return probabilities P_h[i][i]."""
    return np.stack(
        [step.diagonal() for step in p.steps], axis=1
    ) if p.k else np.zeros((p.num_nodes, 0))


def _sparse_entries(matrix: csr_matrix, rows: np.ndarray, cols: np.ndarray):
    if rows.size == 0:
        return np.zeros(0, dtype=np.float64)
    return np.asarray(matrix[rows, cols]).ravel().astype(np.float64)


def lookup_encodings(
    p: RrwpTensor, h: RewiredGraph
) -> tuple[np.ndarray, np.ndarray]:
    """Raw walk encodings: node row i is P_{1..k}[i][i], edge row (i,j) is
    P_{1..k}[i][j] for every directed edge of H including added ones.

    Entries absent from the sparse powers (pairs unreachable within k steps)
    come out as zero.
    """
    if p.num_nodes != h.base.num_nodes:
        raise ValidationError(
            f"rrwp tensor covers {p.num_nodes} nodes, graph has {h.base.num_nodes}"
        )
    node_raw = node_diagonals(p)
    edges = h.edges
    edge_raw = np.zeros((edges.shape[0], p.k), dtype=np.float64)
    for step_index, step in enumerate(p.steps):
        edge_raw[:, step_index] = _sparse_entries(step, edges[:, 0], edges[:, 1])
    return node_raw, edge_raw


def compute_entry(g: Graph, k: int) -> CacheEntry:
    tensor = rrwp(g, k)
    return CacheEntry(
        degrees=DegreeTable.from_graph(g),
        rrwp=tensor,
        diag=node_diagonals(tensor),
    )


def _entry_worker(args) -> CacheEntry:
    num_nodes, edges, k = args
    g = Graph(
        num_nodes=num_nodes,
        edges=edges,
        node_features=np.zeros((num_nodes, 0), dtype=np.float32),
        edge_features=np.zeros((edges.shape[0], 0), dtype=np.float32),
        directed=True,
    )
    return compute_entry(g, k)


def compute_entries(graphs, k: int, jobs: int = 1) -> list[CacheEntry]:
    if jobs <= 1:
        return [compute_entry(g, k) for g in graphs]
    payload = [(g.num_nodes, np.asarray(g.edges), k) for g in graphs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_entry_worker, payload, chunksize=16))


def dataset_degree_extremes(entries) -> tuple[int, int]:
    max_out = max((e.degrees.max_out for e in entries), default=0)
    max_in = max((e.degrees.max_in for e in entries), default=0)
    return max_out, max_in


def _pack_array(buffer: io.BytesIO, array: np.ndarray, dtype: str) -> None:
    buffer.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _serialize_entry(buffer: io.BytesIO, entry: CacheEntry) -> None:
    v = entry.rrwp.num_nodes
    buffer.write(struct.pack("<I", v))
    _pack_array(buffer, entry.degrees.out_degree, "<u4")
    _pack_array(buffer, entry.degrees.in_degree, "<u4")
    _pack_array(buffer, entry.diag, "<f8")
    for step in entry.rrwp.steps:
        step = step.tocsr()
        buffer.write(struct.pack("<Q", int(step.nnz)))
        _pack_array(buffer, step.indptr, "<u8")
        _pack_array(buffer, step.indices, "<u4")
        _pack_array(buffer, step.data, "<f8")


def write_cache(cache_path, dataset_hash: str, k: int, entries) -> None:
    buffer = io.BytesIO()
    buffer.write(CACHE_MAGIC)
    buffer.write(struct.pack("<III", CACHE_VERSION, k, len(entries)))
    buffer.write(bytes.fromhex(dataset_hash))
    for entry in entries:
        _serialize_entry(buffer, entry)
    body = buffer.getvalue()
    with open(cache_path, "wb") as handle:
        handle.write(body)
        handle.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CacheInvalidError(f"{self.path}: truncated cache file")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def array(self, count: int, dtype: str) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * item), dtype=dtype).copy()


def read_cache_header(cache_path) -> dict:
    """Parse and checksum-verify the header; returns k, count, dataset hash."""
    try:
        blob = Path(cache_path).read_bytes()
    except OSError as exc:
        raise CacheInvalidError(f"cannot read cache {cache_path}: {exc}") from exc
    if len(blob) < len(CACHE_MAGIC) + 12 + 32 + 4:
        raise CacheInvalidError(f"{cache_path}: file too short to be a cache")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CacheInvalidError(f"{cache_path}: checksum mismatch")
    reader = _Reader(body, cache_path)
    if reader.take(4) != CACHE_MAGIC:
        raise CacheInvalidError(f"{cache_path}: bad magic, not a cache file")
    version, k, num_graphs = struct.unpack("<III", reader.take(12))
    if version != CACHE_VERSION:
        raise CacheInvalidError(
            f"{cache_path}: unsupported cache version {version}"
        )
    dataset_hash = reader.take(32).hex()
    return {
        "k": k,
        "num_graphs": num_graphs,
        "dataset_hash": dataset_hash,
        "_reader": reader,
    }


def load_cache(
    cache_path, expect_hash: str | None = None, expect_k: int | None = None
) -> list[CacheEntry]:
    header = read_cache_header(cache_path)
    if expect_hash is not None and header["dataset_hash"] != expect_hash:
        raise CacheInvalidError(
            f"{cache_path}: cache was built for a different dataset "
            f"(hash {header['dataset_hash'][:12]}..., expected {expect_hash[:12]}...)"
        )
    if expect_k is not None and header["k"] != expect_k:
        raise CacheInvalidError(
            f"{cache_path}: cache has k={header['k']}, expected k={expect_k}"
        )
    reader: _Reader = header["_reader"]
    k = header["k"]
    entries = []
    for _ in range(header["num_graphs"]):
        (v,) = struct.unpack("<I", reader.take(4))
        out_deg = reader.array(v, "<u4").astype(np.int64)
        in_deg = reader.array(v, "<u4").astype(np.int64)
        diag = reader.array(v * k, "<f8").reshape(v, k)
        steps = []
        for _ in range(k):
            (nnz,) = struct.unpack("<Q", reader.take(8))
            indptr = reader.array(v + 1, "<u8").astype(np.int64)
            indices = reader.array(nnz, "<u4").astype(np.int64)
            data = reader.array(nnz, "<f8")
            steps.append(csr_matrix((data, indices, indptr), shape=(v, v)))
        entries.append(
            CacheEntry(
                degrees=DegreeTable(
                    out_degree=out_deg,
                    in_degree=in_deg,
                    max_out=int(out_deg.max(initial=0)),
                    max_in=int(in_deg.max(initial=0)),
                ),
                rrwp=RrwpTensor(num_nodes=v, k=k, steps=tuple(steps)),
                diag=diag,
            )
        )
    return entries


def precompute_cache(dataset_path, k: int, cache_path, jobs: int = 1) -> dict:
    """Build the cache unless a valid one for (dataset hash, k) already exists.

    A present-but-corrupt cache raises instead of silently recomputing, so a
    damaged file never masquerades as a refresh.
    """
    if k < 1:
        raise ValidationError(f"walk length k must be >= 1, got {k}")
    dataset_hash = file_sha256(dataset_path)
    if Path(cache_path).exists():
        header = read_cache_header(cache_path)
        if header["dataset_hash"] == dataset_hash and header["k"] == k:
            return {
                "cache_hit": True,
                "num_graphs": header["num_graphs"],
                "dataset_hash": dataset_hash,
            }
    dataset = load_jsonl(dataset_path)
    entries = compute_entries(dataset.graphs, k, jobs=jobs)
    write_cache(cache_path, dataset_hash, k, entries)
    return {
        "cache_hit": False,
        "num_graphs": len(entries),
        "dataset_hash": dataset_hash,
    }


def cache_for_dataset(dataset: GraphDataset, dataset_path, cache_path, k: int):
    """Load entries for a dataset file, verifying hash and k agreement."""
    return load_cache(cache_path, expect_hash=file_sha256(dataset_path), expect_k=k)


class FeatureEncoder(nn.Module):
    """Add batch-normalized walk and degree encodings onto width-n features.

    Inputs x_in / e_in are already in model width (the model projects raw
    features and substitutes the added-edge embedding before calling this).
    Node output: x_in + W_node_enc BN(diag walk probs) + degree encoding.
    Edge output: e_in + W_edge_enc BN(pair walk probs). Degree encodings use
    an embedding table keyed by (out-degree, in-degree) when the table stays
    small, else a linear map of batch-normalized degree pairs.
    """

    def __init__(
        self,
        k: int,
        width: int,
        max_out: int,
        max_in: int,
        degree_mode: str = "auto",
        rrwp_enabled: bool = True,
    ):
        super().__init__()
        if width < 1:
            raise ValidationError(f"encoder width must be >= 1, got {width}")
        if degree_mode == "auto":
            table_size = (max_out + 1) * (max_in + 1)
            degree_mode = "table" if table_size <= 4096 else "linear"
        if degree_mode not in ("table", "linear"):
            raise ValidationError(f"unknown degree mode {degree_mode!r}")
        self.k = k
        self.width = width
        self.max_out = max_out
        self.max_in = max_in
        self.degree_mode = degree_mode
        self.rrwp_enabled = rrwp_enabled

        if rrwp_enabled:
            self.node_rrwp_norm = RmsSafeBatchNorm1d(k, eps=1e-5, momentum=0.1)
            self.edge_rrwp_norm = RmsSafeBatchNorm1d(k, eps=1e-5, momentum=0.1)
            self.node_rrwp_proj = nn.Linear(k, width)
            self.edge_rrwp_proj = nn.Linear(k, width)
        if degree_mode == "table":
            self.degree_table = nn.Embedding((max_out + 1) * (max_in + 1), width)
        else:
            self.degree_norm = RmsSafeBatchNorm1d(2, eps=1e-5, momentum=0.1)
            self.degree_proj = nn.Linear(2, width)

    def forward(
        self,
        node_raw: torch.Tensor,    # (V, k) walk diagonals
        edge_raw: torch.Tensor,    # (E_H, k) walk pair entries
        out_degree: torch.Tensor,  # (V,) int64, degrees of the base graph
        in_degree: torch.Tensor,   # (V,) int64
        x_in: torch.Tensor | None = None,  # (V, width)
        e_in: torch.Tensor | None = None,  # (E_H, width)
    ) -> tuple[torch.Tensor, torch.Tensor]:
        example = next(self.parameters())
        dtype = example.dtype
        num_nodes = node_raw.shape[0]
        num_edges = edge_raw.shape[0]
        if x_in is None:
            x_in = torch.zeros(num_nodes, self.width, dtype=dtype)
        if e_in is None:
            e_in = torch.zeros(num_edges, self.width, dtype=dtype)
        if x_in.shape != (num_nodes, self.width):
            raise ValidationError(
                f"x_in shape {tuple(x_in.shape)} does not match "
                f"({num_nodes}, {self.width})"
            )
        if e_in.shape != (num_edges, self.width):
            raise ValidationError(
                f"e_in shape {tuple(e_in.shape)} does not match "
                f"({num_edges}, {self.width})"
            )

        x0 = x_in
        e0 = e_in
        if self.rrwp_enabled:
            x0 = x0 + self.node_rrwp_proj(self.node_rrwp_norm(node_raw.to(dtype)))
            e0 = e0 + self.edge_rrwp_proj(self.edge_rrwp_norm(edge_raw.to(dtype)))

        if self.degree_mode == "table":
            out_idx = out_degree.clamp(max=self.max_out)
            in_idx = in_degree.clamp(max=self.max_in)
            x0 = x0 + self.degree_table(out_idx * (self.max_in + 1) + in_idx)
        else:
            pair = torch.stack([out_degree, in_degree], dim=1).to(dtype)
            x0 = x0 + self.degree_proj(self.degree_norm(pair))
        return x0, e0
