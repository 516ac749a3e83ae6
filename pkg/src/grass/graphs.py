"""Immutable graph containers, disjoint-union batching, and node relabeling.

Graphs are stored in adjacency-list form: an (E, 2) integer array of directed
(head, tail) edges plus dense per-node / per-edge feature rows. Undirected
inputs are symmetrized at construction, so downstream code only ever sees
directed edges. Multi-edges are permitted; they arise naturally when random
edges are superimposed on top of existing ones.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ValidationError

JSONL_SCHEMA = "grass-jsonl/1"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Graph:
    """A directed multigraph with dense node and edge feature arrays.

    Instances are immutable: the backing arrays are marked read-only at
    construction time. Use :func:`build_graph` instead of the raw
    constructor so the invariants are checked.
    """

    num_nodes: int
    edges: np.ndarray          # (E, 2) int64 rows of (head, tail)
    node_features: np.ndarray  # (V, n_node) float32
    edge_features: np.ndarray  # (E, n_edge) float32
    directed: bool

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def heads(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def tails(self) -> np.ndarray:
        return self.edges[:, 1]

    def out_degrees(self) -> np.ndarray:
        return np.bincount(self.heads, minlength=self.num_nodes).astype(np.int64)

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.tails, minlength=self.num_nodes).astype(np.int64)

    def undirected_pairs(self) -> np.ndarray:
        """Unique unordered endpoint pairs, as a sorted (m, 2) array."""
        if self.num_edges == 0:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.sort(self.edges, axis=1)
        return np.unique(pairs, axis=0)


@dataclass(frozen=True)
class BatchedGraph:
    """Disjoint union of several graphs with per-element membership indices."""

    member_offsets: np.ndarray  # (B,) node-index offset of each member
    underlying: Graph
    node_graph_ids: np.ndarray  # (V_total,)
    edge_graph_ids: np.ndarray  # (E_total,)

    @property
    def num_members(self) -> int:
        return self.member_offsets.shape[0]


@dataclass(frozen=True)
class Permutation:
    """A bijection on node indices, stored as the image array ``mapping``."""

    mapping: np.ndarray  # (V,) int64; node i is relabeled mapping[i]

    def __post_init__(self) -> None:
        mapping = np.asarray(self.mapping, dtype=np.int64)
        n = mapping.shape[0]
        if mapping.ndim != 1 or not np.array_equal(np.sort(mapping), np.arange(n)):
            raise ValidationError("permutation mapping must be a bijection on [0, n)")
        object.__setattr__(self, "mapping", _frozen(mapping))

    def __len__(self) -> int:
        return self.mapping.shape[0]

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(len(self), dtype=np.int64)
        return Permutation(inv)

    @staticmethod
    def identity(n: int) -> "Permutation":
        return Permutation(np.arange(n, dtype=np.int64))

    @staticmethod
    def random(n: int, rng: np.random.Generator) -> "Permutation":
        return Permutation(rng.permutation(n).astype(np.int64))


def _feature_rows(features, num_rows: int, label: str) -> np.ndarray:
    if features is None:
        return np.zeros((num_rows, 0), dtype=np.float32)
    array = np.asarray(features, dtype=np.float32)
    if array.ndim == 1 and array.size == 0:
        array = array.reshape(0, 0)
    if array.ndim != 2:
        raise ValidationError(f"{label} must be a 2-d array of per-row features")
    if array.shape[0] != num_rows:
        raise ValidationError(
            f"{label} has {array.shape[0]} rows, expected {num_rows}"
        )
    return array


def build_graph(
    num_nodes: int,
    edges: Sequence[Sequence[int]] | np.ndarray,
    node_features: np.ndarray | None = None,
    edge_features: np.ndarray | None = None,
    directed: bool = False,
) -> Graph:
    """Validate inputs and construct an immutable :class:`Graph`.

    For ``directed=False`` every listed edge is emitted as two opposite
    directed edges with identical features (stored adjacently), so the
    resulting edge count is twice the input count.
    """
    if num_nodes < 0:
        raise ValidationError("num_nodes must be non-negative")
    edge_array = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edge_array.size and (edge_array.min() < 0 or edge_array.max() >= num_nodes):
        raise ValidationError(
            f"edge endpoint out of range for graph with {num_nodes} nodes"
        )

    num_input_edges = edge_array.shape[0]
    node_features = _feature_rows(node_features, num_nodes, "node_features")
    edge_features = _feature_rows(edge_features, num_input_edges, "edge_features")

    if not directed:
        # Interleave forward/reverse so each input edge occupies rows (2i, 2i+1).
        both = np.empty((2 * num_input_edges, 2), dtype=np.int64)
        both[0::2] = edge_array
        both[1::2] = edge_array[:, ::-1]
        edge_array = both
        edge_features = np.repeat(edge_features, 2, axis=0)

    return Graph(
        num_nodes=num_nodes,
        edges=_frozen(np.ascontiguousarray(edge_array)),
        node_features=_frozen(np.ascontiguousarray(node_features)),
        edge_features=_frozen(np.ascontiguousarray(edge_features)),
        directed=directed,
    )


def batch_graphs(graphs: Sequence[Graph]) -> BatchedGraph:
    """Concatenate graphs into one disjoint union, offsetting node indices."""
    if len(graphs) == 0:
        raise ValidationError("cannot batch an empty list of graphs")
    node_dims = {g.node_features.shape[1] for g in graphs}
    edge_dims = {g.edge_features.shape[1] for g in graphs}
    if len(node_dims) != 1 or len(edge_dims) != 1:
        raise ValidationError("all batched graphs must share feature dimensions")

    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    edge_blocks = [g.edges + off for g, off in zip(graphs, offsets)]
    edges = (
        np.concatenate(edge_blocks, axis=0)
        if edge_blocks
        else np.zeros((0, 2), dtype=np.int64)
    )
    union = Graph(
        num_nodes=int(sizes.sum()),
        edges=_frozen(np.ascontiguousarray(edges)),
        node_features=_frozen(np.concatenate([g.node_features for g in graphs])),
        edge_features=_frozen(np.concatenate([g.edge_features for g in graphs])),
        directed=all(g.directed for g in graphs),
    )
    node_ids = np.repeat(np.arange(len(graphs), dtype=np.int64), sizes)
    edge_ids = np.repeat(
        np.arange(len(graphs), dtype=np.int64),
        [g.num_edges for g in graphs],
    )
    return BatchedGraph(
        member_offsets=_frozen(offsets),
        underlying=union,
        node_graph_ids=_frozen(node_ids),
        edge_graph_ids=_frozen(edge_ids),
    )


def permute_nodes(g: Graph, p: Permutation) -> Graph:
    """Relabel node i as p(i); edges and feature rows follow the relabeling."""
    if len(p) != g.num_nodes:
        raise ValidationError(
            f"permutation length {len(p)} does not match {g.num_nodes} nodes"
        )
    node_features = np.empty_like(g.node_features)
    node_features[p.mapping] = g.node_features
    return Graph(
        num_nodes=g.num_nodes,
        edges=_frozen(np.ascontiguousarray(p.mapping[g.edges])),
        node_features=_frozen(node_features),
        edge_features=g.edge_features,
        directed=g.directed,
    )


def graphs_equal(a: Graph, b: Graph) -> bool:
    return (
        a.num_nodes == b.num_nodes
        and a.directed == b.directed
        and np.array_equal(a.edges, b.edges)
        and np.array_equal(a.node_features, b.node_features)
        and np.array_equal(a.edge_features, b.edge_features)
    )


@dataclass(frozen=True)
class GraphDataset:
    """Graphs plus per-graph targets, as loaded from a JSONL file."""

    graphs: tuple[Graph, ...]
    targets: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.graphs)


def _parse_target(raw, line_number: int) -> np.ndarray:
    if isinstance(raw, bool):
        raise DataError(f"line {line_number}: target must be numeric")
    if isinstance(raw, int):
        return np.array(raw, dtype=np.int64)
    if isinstance(raw, float):
        return np.array([raw], dtype=np.float64)
    if isinstance(raw, list):
        arr = np.asarray(raw)
        if arr.size == 0 or not np.issubdtype(arr.dtype, np.number):
            raise DataError(f"line {line_number}: target list must be numeric")
        if np.issubdtype(arr.dtype, np.integer):
            return arr.astype(np.int64)
        return arr.astype(np.float64)
    raise DataError(f"line {line_number}: target must be an int or a list")


def _parse_graph_record(record: dict, line_number: int) -> tuple[Graph, np.ndarray]:
    required = ("num_nodes", "edges", "directed", "node_feat", "edge_feat", "target")
    for key in required:
        if key not in record:
            raise DataError(f"line {line_number}: missing field {key!r}")
    try:
        graph = build_graph(
            num_nodes=int(record["num_nodes"]),
            edges=np.asarray(record["edges"], dtype=np.int64).reshape(-1, 2),
            node_features=np.asarray(record["node_feat"], dtype=np.float64),
            edge_features=np.asarray(record["edge_feat"], dtype=np.float64),
            directed=bool(record["directed"]),
        )
    except (ValidationError, ValueError) as exc:
        raise DataError(f"line {line_number}: {exc}") from exc
    if not np.isfinite(graph.node_features).all() or not np.isfinite(
        graph.edge_features
    ).all():
        raise DataError(f"line {line_number}: non-finite feature value")
    return graph, _parse_target(record["target"], line_number)


def load_jsonl(path) -> GraphDataset:
    """Read a dataset file, checking the schema header and every record."""
    graphs: list[Graph] = []
    targets: list[np.ndarray] = []
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with handle:
        header_line = handle.readline()
        if not header_line.strip():
            raise DataError(f"{path}: empty file, expected a schema header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line 1: invalid JSON header: {exc}") from exc
        if not isinstance(header, dict) or header.get("schema") != JSONL_SCHEMA:
            raise DataError(
                f"{path}: line 1: expected schema header {JSONL_SCHEMA!r}, "
                f"got {header.get('schema') if isinstance(header, dict) else header!r}"
            )
        for line_number, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {line_number}: invalid JSON: {exc}")
            graph, target = _parse_graph_record(record, line_number)
            graphs.append(graph)
            targets.append(target)
    return GraphDataset(graphs=tuple(graphs), targets=tuple(targets))


def write_jsonl(path, records: Sequence[dict]) -> None:
    """Write graph records (already in schema form) below a header line."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps({"schema": JSONL_SCHEMA}) + "\n")
        for record in records:
            handle.write(json.dumps(record) + "\n")


def validate_jsonl(path) -> dict:
    """Schema scan that collects per-line problems instead of stopping.

    A wrong or unparseable header still raises, but record-level failures
    are gathered into the report so one bad line does not hide the rest.
    A file with no lines at all yields a zero-graph report. Averages cover
    the valid records; edge counts are as listed (one row per undirected
    edge).
    """
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    errors: list[str] = []
    node_counts: list[int] = []
    edge_counts: list[int] = []
    with handle:
        header_line = handle.readline()
        rest = handle.readlines()
        if not header_line.strip() and not any(line.strip() for line in rest):
            return {"num_graphs": 0, "avg_nodes": 0.0, "avg_edges": 0.0, "errors": []}
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line 1: invalid JSON header: {exc}")
        if not isinstance(header, dict) or header.get("schema") != JSONL_SCHEMA:
            raise DataError(
                f"{path}: line 1: expected schema header {JSONL_SCHEMA!r}"
            )
        for line_number, line in enumerate(rest, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {line_number}: invalid JSON: {exc}")
                continue
            try:
                graph, _ = _parse_graph_record(record, line_number)
            except DataError as exc:
                errors.append(str(exc))
                continue
            node_counts.append(graph.num_nodes)
            edge_counts.append(
                graph.num_edges if graph.directed else graph.num_edges // 2
            )
    count = len(node_counts)
    return {
        "num_graphs": count,
        "avg_nodes": float(np.mean(node_counts)) if count else 0.0,
        "avg_edges": float(np.mean(edge_counts)) if count else 0.0,
        "errors": errors,
    }


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    try:
        handle = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
