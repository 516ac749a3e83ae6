"""Full model assembly: batch preparation, encoder, layer stack, pooling,
task heads, parameter initialization, and checkpoint serialization.

A forward pass works on a prepared batch: the disjoint union of freshly
rewired graphs with their walk-probability lookups already extracted. Edge
orientation alternates across layers; pooling sums nodes, original edges,
and added edges separately.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoding import CacheEntry, FeatureEncoder, lookup_encodings
from .errors import DataError, ValidationError
from .graphs import Graph
from .layers import (
    ACTIVATIONS,
    AttentionTopology,
    GrassLayer,
    PowerNormV,
    deepnorm_alpha,
    deepnorm_beta,
)
from .rewiring import RewireConfig, RewiredGraph, rewire

CHECKPOINT_MAGIC = b"GRSS"
CHECKPOINT_VERSION = 1

TASKS = ("graph-regression", "graph-classification", "node-classification")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    width: int
    k: int
    node_in_dim: int
    edge_in_dim: int
    max_out: int
    max_in: int
    out_dim: int
    task: str
    head_hidden: int | None = None
    dropkey_rate: float = 0.0
    activation: str = "silu"
    degree_mode: str = "auto"
    rrwp_enabled: bool = True
    edge_flip_enabled: bool = True
    norm_kind: str = "pnv"
    pool_kind: str = "separate"
    log_length_scaling: bool = False

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValidationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.width < 1:
            raise ValidationError(f"width must be >= 1, got {self.width}")
        if self.out_dim < 1:
            raise ValidationError(f"out_dim must be >= 1, got {self.out_dim}")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.pool_kind not in ("separate", "joint"):
            raise ValidationError(f"unknown pool kind {self.pool_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")


@dataclass
class PreparedBatch:
    """Disjoint union of rewired graphs with all model inputs as tensors."""

    num_graphs: int
    num_nodes: int
    topology: AttentionTopology      # orientation of H itself (layer 1)
    edge_origin: torch.Tensor        # (E_H,) 0 original / 1 added
    node_graph_ids: torch.Tensor     # (V,)
    edge_graph_ids: torch.Tensor     # (E_H,)
    node_raw: torch.Tensor           # (V, k) float64 walk diagonals
    edge_raw: torch.Tensor           # (E_H, k) float64 walk pair entries
    out_degree: torch.Tensor         # (V,) base-graph degrees
    in_degree: torch.Tensor
    node_in: torch.Tensor | None     # (V, d_node) raw input features
    edge_in: torch.Tensor | None     # (E_base rows in slot order, d_edge)
    targets: torch.Tensor
    rewired: list = field(default_factory=list)


def prepare_batch(
    graphs: Sequence[Graph],
    entries: Sequence[CacheEntry],
    targets: Sequence[np.ndarray],
    rewire_cfg: RewireConfig,
    rng: np.random.Generator | None = None,
    task: str = "graph-regression",
    fixed_rewired: Sequence[RewiredGraph] | None = None,
) -> PreparedBatch:
    """Rewire each graph, look up encodings, and build the disjoint union.

    ``fixed_rewired`` bypasses sampling so tests can pin the topology; other
    callers get a fresh sample per graph drawn from ``rng``.
    """
    if not graphs:
        raise ValidationError("cannot prepare an empty batch")
    if len(graphs) != len(entries) or len(graphs) != len(targets):
        raise ValidationError("graphs, cache entries, and targets must align")
    if len({g.node_features.shape[1] for g in graphs}) != 1 or len(
        {g.edge_features.shape[1] for g in graphs}
    ) != 1:
        raise ValidationError("all graphs in a batch must share feature dimensions")

    edge_blocks, origin_blocks, node_raw_blocks, edge_raw_blocks = [], [], [], []
    node_ids, edge_ids = [], []
    offset = 0
    rewired_all = []
    for index, (g, entry) in enumerate(zip(graphs, entries)):
        if entry.rrwp.num_nodes != g.num_nodes:
            raise ValidationError(
                f"graph {index}: cache entry covers {entry.rrwp.num_nodes} nodes, "
                f"graph has {g.num_nodes}"
            )
        if fixed_rewired is not None:
            h = fixed_rewired[index]
        else:
            h = rewire(g, rewire_cfg, rng)
        rewired_all.append(h)
        node_raw, edge_raw = lookup_encodings(entry.rrwp, h)
        edge_blocks.append(h.edges + offset)
        origin_blocks.append(h.edge_origin)
        node_raw_blocks.append(node_raw)
        edge_raw_blocks.append(edge_raw)
        node_ids.append(np.full(g.num_nodes, index, dtype=np.int64))
        edge_ids.append(np.full(h.num_edges, index, dtype=np.int64))
        offset += g.num_nodes

    edges = np.concatenate(edge_blocks, axis=0)
    node_in_dim = graphs[0].node_features.shape[1]
    edge_in_dim = graphs[0].edge_features.shape[1]
    node_in = (
        torch.from_numpy(np.concatenate([g.node_features for g in graphs]))
        if node_in_dim
        else None
    )
    edge_in = (
        torch.from_numpy(np.concatenate([g.edge_features for g in graphs]))
        if edge_in_dim
        else None
    )

    if task == "node-classification":
        target_tensor = torch.from_numpy(
            np.concatenate([np.asarray(t).ravel() for t in targets]).astype(np.int64)
        )
    elif task == "graph-classification":
        target_tensor = torch.from_numpy(
            np.array([int(np.asarray(t).ravel()[0]) for t in targets], dtype=np.int64)
        )
    else:
        target_tensor = torch.from_numpy(
            np.stack([np.asarray(t, dtype=np.float64).ravel() for t in targets])
        )

    return PreparedBatch(
        num_graphs=len(graphs),
        num_nodes=offset,
        topology=AttentionTopology.build(edges, offset),
        edge_origin=torch.from_numpy(np.concatenate(origin_blocks)),
        node_graph_ids=torch.from_numpy(np.concatenate(node_ids)),
        edge_graph_ids=torch.from_numpy(np.concatenate(edge_ids)),
        node_raw=torch.from_numpy(np.concatenate(node_raw_blocks)),
        edge_raw=torch.from_numpy(np.concatenate(edge_raw_blocks)),
        out_degree=torch.from_numpy(
            np.concatenate([e.degrees.out_degree for e in entries])
        ),
        in_degree=torch.from_numpy(
            np.concatenate([e.degrees.in_degree for e in entries])
        ),
        node_in=node_in,
        edge_in=edge_in,
        targets=target_tensor,
        rewired=rewired_all,
    )


@dataclass
class ModelOutput:
    node_outputs: torch.Tensor
    edge_outputs: torch.Tensor
    pooled: torch.Tensor | None
    predictions: torch.Tensor


def pool(
    node_out: torch.Tensor,
    edge_out: torch.Tensor,
    node_graph_ids: torch.Tensor,
    edge_graph_ids: torch.Tensor,
    edge_origin: torch.Tensor,
    num_graphs: int,
    kind: str = "separate",
) -> torch.Tensor:
    """Sum-pool nodes and edges per graph.

    ``separate`` emits [node sum, original-edge sum, added-edge sum] (3n);
    ``joint`` pools all edges together (2n).
    """
    width = node_out.shape[1]
    nodes = torch.zeros(
        num_graphs, width, dtype=node_out.dtype
    ).index_add_(0, node_graph_ids, node_out)
    if kind == "joint":
        edges = torch.zeros(
            num_graphs, width, dtype=edge_out.dtype
        ).index_add_(0, edge_graph_ids, edge_out)
        return torch.cat([nodes, edges], dim=1)
    base_mask = edge_origin == 0
    original = torch.zeros(
        num_graphs, width, dtype=edge_out.dtype
    ).index_add_(0, edge_graph_ids[base_mask], edge_out[base_mask])
    added = torch.zeros(
        num_graphs, width, dtype=edge_out.dtype
    ).index_add_(0, edge_graph_ids[~base_mask], edge_out[~base_mask])
    return torch.cat([nodes, original, added], dim=1)


class GrassModel(nn.Module):
    """Encoder, L alternating-orientation attention layers, pooling, head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        width = config.width
        self.alpha = deepnorm_alpha(config.num_layers)
        self.beta = deepnorm_beta(config.num_layers)

        self.node_in_proj = (
            nn.Linear(config.node_in_dim, width) if config.node_in_dim else None
        )
        self.edge_in_proj = (
            nn.Linear(config.edge_in_dim, width) if config.edge_in_dim else None
        )
        self.added_edge_embedding = nn.Parameter(torch.zeros(width))
        self.encoder = FeatureEncoder(
            k=config.k,
            width=width,
            max_out=config.max_out,
            max_in=config.max_in,
            degree_mode=config.degree_mode,
            rrwp_enabled=config.rrwp_enabled,
        )
        self.layers = nn.ModuleList(
            GrassLayer(
                width=width,
                index=i,
                dropkey_rate=config.dropkey_rate,
                activation=config.activation,
                log_length_scaling=config.log_length_scaling,
                norm_kind=config.norm_kind,
            )
            for i in range(1, config.num_layers + 1)
        )

        if config.task == "node-classification":
            self.head = nn.Linear(width, config.out_dim)
        else:
            pooled_dim = (3 if config.pool_kind == "separate" else 2) * width
            if config.head_hidden:
                self.head = nn.Sequential(
                    nn.Linear(pooled_dim, config.head_hidden),
                    nn.SiLU()
                    if config.activation == "silu"
                    else nn.ReLU()
                    if config.activation == "relu"
                    else nn.GELU(),
                    nn.Linear(config.head_hidden, config.out_dim),
                )
            else:
                self.head = nn.Linear(pooled_dim, config.out_dim)

    def orientation_flipped(self, layer_index: int) -> bool:
        """Layer l (1-indexed) reads H's own orientation iff l is odd."""
        return self.config.edge_flip_enabled and layer_index % 2 == 0

    def input_width_features(
        self, batch: PreparedBatch, dtype: torch.dtype
    ) -> tuple[torch.Tensor | None, torch.Tensor]:
        """Project raw inputs to model width; added edges get the embedding."""
        x_in = None
        if self.node_in_proj is not None:
            if batch.node_in is None:
                raise ValidationError("model expects node input features")
            x_in = self.node_in_proj(batch.node_in.to(dtype))
        base_mask = batch.edge_origin == 0
        e_in = torch.zeros(batch.topology.num_edges, self.config.width, dtype=dtype)
        if self.edge_in_proj is not None:
            if batch.edge_in is None:
                raise ValidationError("model expects edge input features")
            if batch.edge_in.shape[0] != int(base_mask.sum()):
                raise ValidationError("edge feature rows do not match base edges")
            e_in = e_in.index_add(
                0,
                torch.nonzero(base_mask).squeeze(1),
                self.edge_in_proj(batch.edge_in.to(dtype)),
            )
        added_rows = torch.nonzero(~base_mask).squeeze(1)
        e_in = e_in.index_add(
            0,
            added_rows,
            self.added_edge_embedding.unsqueeze(0).expand(added_rows.shape[0], -1),
        )
        return x_in, e_in

    def forward(
        self,
        batch: PreparedBatch,
        generator: torch.Generator | None = None,
    ) -> ModelOutput:
        dtype = self.added_edge_embedding.dtype
        x_in, e_in = self.input_width_features(batch, dtype)
        x, e = self.encoder(
            batch.node_raw,
            batch.edge_raw,
            batch.out_degree,
            batch.in_degree,
            x_in,
            e_in,
        )
        topo = batch.topology
        topo_flipped = topo.flip()
        for index, layer in enumerate(self.layers, start=1):
            current = topo_flipped if self.orientation_flipped(index) else topo
            x, e = layer(x, e, current, alpha=self.alpha, generator=generator)

        if self.config.task == "node-classification":
            return ModelOutput(
                node_outputs=x, edge_outputs=e, pooled=None, predictions=self.head(x)
            )
        pooled = pool(
            x,
            e,
            batch.node_graph_ids,
            batch.edge_graph_ids,
            batch.edge_origin,
            batch.num_graphs,
            kind=self.config.pool_kind,
        )
        return ModelOutput(
            node_outputs=x,
            edge_outputs=e,
            pooled=pooled,
            predictions=self.head(pooled),
        )


def init_params(model: GrassModel, generator: torch.Generator) -> GrassModel:
    """Fan-in uniform init, scaled by beta on the residual output projections.

    Biases start at zero; embeddings and the added-edge vector use the same
    uniform range as a width-sized fan-in; norm gains stay at one.
    """
    width = model.config.width
    output_projections = set()
    for layer in model.layers:
        output_projections.add(id(layer.node_out.weight))
        output_projections.add(id(layer.edge_out.weight))

    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                fan_in = module.weight.shape[1]
                bound = fan_in ** -0.5
                module.weight.uniform_(-bound, bound, generator=generator)
                if id(module.weight) in output_projections:
                    module.weight.mul_(model.beta)
                module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                bound = width ** -0.5
                module.weight.uniform_(-bound, bound, generator=generator)
            elif isinstance(module, nn.BatchNorm1d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()
            elif isinstance(module, PowerNormV):
                module.gain.fill_(1.0)
                module.running_sq_mean.fill_(1.0)
        bound = width ** -0.5
        model.added_edge_embedding.uniform_(-bound, bound, generator=generator)
        for layer in model.layers:
            layer.b_node_act.zero_()
            layer.b_edge_act.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}


def save_checkpoint(path, config_echo: dict, model: nn.Module) -> None:
    """Write magic, version, config JSON echo, named tensors, and a crc32."""
    state = model.state_dict()
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_bytes = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    buffer.write(struct.pack("<I", len(config_bytes)))
    buffer.write(config_bytes)
    buffer.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        name_bytes = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(name_bytes)))
        buffer.write(name_bytes)
        if tensor.dtype not in _DTYPE_CODES:
            raise ValidationError(
                f"cannot serialize parameter {name} of dtype {tensor.dtype}"
            )
        code = _DTYPE_CODES[tensor.dtype]
        dims = tuple(tensor.shape)
        buffer.write(struct.pack("<BB", code, len(dims)))
        buffer.write(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        buffer.write(
            np.ascontiguousarray(tensor.detach().cpu().numpy(), _NUMPY_DTYPES[code])
            .tobytes()
        )
    body = buffer.getvalue()
    with open(path, "wb") as handle:
        handle.write(body)
        handle.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (config echo, named tensor dict); checksum verified."""
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16:
        raise DataError(f"{path}: file too short to be a checkpoint")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"{path}: checkpoint checksum mismatch")
    view = io.BytesIO(body)
    if view.read(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", view.read(4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", view.read(4))
    config_echo = json.loads(view.read(config_len).decode("utf-8"))
    (num_sections,) = struct.unpack("<I", view.read(4))
    state = {}
    for _ in range(num_sections):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", view.read(2))
        dims = struct.unpack(f"<{ndim}I", view.read(4 * ndim)) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        raw = view.read(count * np.dtype(_NUMPY_DTYPES[code]).itemsize)
        array = np.frombuffer(raw, dtype=_NUMPY_DTYPES[code]).reshape(dims).copy()
        state[name] = torch.from_numpy(array).to(_CODE_DTYPES[code])
    return config_echo, state


def model_config_from_echo(echo: dict) -> ModelConfig:
    fields = {k: v for k, v in echo.items() if k in ModelConfig.__annotations__}
    return ModelConfig(**fields)
