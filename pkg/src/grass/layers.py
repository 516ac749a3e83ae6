"""One attention layer: degree-scaled additive attention over directed edges,
unattended edge aggregation, FFN, and RMS post-normalization with scaled
residuals. Edge orientation alternates between consecutive layers; edge
storage slots never move, only the head/tail roles swap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ValidationError

ACTIVATIONS = {
    "silu": F.silu,
    "relu": F.relu,
    "gelu": F.gelu,
}

ATTENTION_EPSILON = 1e-5
EXP_CLAMP = 40.0


def deepnorm_alpha(num_layers: int) -> float:
    """Residual coefficient (2L)^(1/4) for an L-layer encoder stack."""
    if num_layers < 1:
        raise ValidationError(f"num_layers must be >= 1, got {num_layers}")
    return float((2 * num_layers) ** 0.25)


def deepnorm_beta(num_layers: int) -> float:
    """Init scale (8L)^(-1/4) applied to output projections only."""
    if num_layers < 1:
        raise ValidationError(f"num_layers must be >= 1, got {num_layers}")
    return float((8 * num_layers) ** -0.25)


@dataclass(frozen=True)
class AttentionTopology:
    """Directed endpoints of the rewired graph under one orientation.

    ``heads[s]`` and ``tails[s]`` give the role of edge slot s; flipping
    swaps the roles without renumbering slots, so features stay put.
    """

    num_nodes: int
    heads: torch.Tensor     # (E,) int64
    tails: torch.Tensor     # (E,) int64
    in_degree: torch.Tensor  # (V,) int64 rewired in-degree for this orientation
    flipped: bool

    @staticmethod
    def build(edges, num_nodes: int, flipped: bool = False) -> "AttentionTopology":
        # copy so read-only arrays (frozen graph edges) convert without warnings
        edges = torch.as_tensor(np.array(edges), dtype=torch.int64).reshape(-1, 2)
        if edges.numel() and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValidationError("topology edge endpoint out of range")
        heads, tails = edges[:, 0].clone(), edges[:, 1].clone()
        if flipped:
            heads, tails = tails, heads
        return AttentionTopology(
            num_nodes=num_nodes,
            heads=heads,
            tails=tails,
            in_degree=torch.bincount(tails, minlength=num_nodes),
            flipped=flipped,
        )

    def flip(self) -> "AttentionTopology":
        return replace(
            self,
            heads=self.tails,
            tails=self.heads,
            in_degree=torch.bincount(self.heads, minlength=self.num_nodes),
            flipped=not self.flipped,
        )

    @property
    def num_edges(self) -> int:
        return int(self.heads.shape[0])


def sample_dropkey_mask(
    num_edges: int,
    width: int,
    rate: float,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Per-edge per-channel keep mask; entries are kept with rate 1 - p."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropkey rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return torch.ones(num_edges, width, dtype=dtype)
    keep = torch.rand(num_edges, width, generator=generator) >= rate
    return keep.to(dtype)


class RmsSafeBatchNorm1d(nn.BatchNorm1d):
    """BatchNorm1d that falls back to running statistics for tiny batches.

    A training step over a single row has undefined batch variance; the
    fallback keeps such steps usable without corrupting the running state.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] <= 1:
            return F.batch_norm(
                x,
                self.running_mean,
                self.running_var,
                self.weight,
                self.bias,
                False,
                0.0,
                self.eps,
            )
        return super().forward(x)


class PowerNormV(nn.Module):
    """Divide by the batch's per-channel root mean square, times a gain.

    No mean subtraction. Training batches update a running quadratic mean
    used verbatim in eval mode; the denominator is floored at eps.
    """

    def __init__(self, width: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gain = nn.Parameter(torch.ones(width))
        self.register_buffer("running_sq_mean", torch.ones(width))

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        if self.training and values.shape[0] > 0:
            sq_mean = values.square().mean(dim=0)
            with torch.no_grad():
                self.running_sq_mean.mul_(1.0 - self.momentum).add_(
                    self.momentum * sq_mean.detach()
                )
        else:
            sq_mean = self.running_sq_mean
        return values / torch.sqrt(sq_mean.clamp(min=self.eps)) * self.gain


class GrassLayer(nn.Module):
    """Scores, attention-weighted node update, edge update, FFN, PN-V."""

    def __init__(
        self,
        width: int,
        index: int = 0,
        dropkey_rate: float = 0.0,
        activation: str = "silu",
        epsilon: float = ATTENTION_EPSILON,
        log_length_scaling: bool = False,
        norm_kind: str = "pnv",
    ):
        super().__init__()
        if width < 1:
            raise ValidationError(f"layer width must be >= 1, got {width}")
        if activation not in ACTIVATIONS:
            raise ValidationError(
                f"unknown activation {activation!r}; choose from "
                f"{sorted(ACTIVATIONS)}"
            )
        if not 0.0 <= dropkey_rate < 1.0:
            raise ValidationError(
                f"dropkey rate must be in [0, 1), got {dropkey_rate}"
            )
        if norm_kind not in ("pnv", "batchnorm", "none"):
            raise ValidationError(f"unknown norm kind {norm_kind!r}")
        self.width = width
        self.index = index
        self.dropkey_rate = dropkey_rate
        self.activation = activation
        self.epsilon = epsilon
        self.log_length_scaling = log_length_scaling
        self.norm_kind = norm_kind

        self.attn_edge = nn.Linear(width, width)
        self.tail_tail = nn.Linear(width, width)
        self.tail_head = nn.Linear(width, width)
        self.tail_edge = nn.Linear(width, width)
        self.edge_edge = nn.Linear(width, width)
        self.edge_head = nn.Linear(width, width)
        self.edge_tail = nn.Linear(width, width)
        self.node_out = nn.Linear(width, width)
        self.edge_out = nn.Linear(width, width)
        self.b_node_act = nn.Parameter(torch.zeros(width))
        self.b_edge_act = nn.Parameter(torch.zeros(width))
        if norm_kind == "pnv":
            self.pnv_node = PowerNormV(width)
            self.pnv_edge = PowerNormV(width)
        elif norm_kind == "batchnorm":
            self.pnv_node = RmsSafeBatchNorm1d(width, eps=1e-5, momentum=0.1)
            self.pnv_edge = RmsSafeBatchNorm1d(width, eps=1e-5, momentum=0.1)
        else:
            self.pnv_node = nn.Identity()
            self.pnv_edge = nn.Identity()

    def attention_scores(
        self,
        edge_feats: torch.Tensor,
        topo: AttentionTopology,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """s = mask * (in_degree(tail) * exp(W_attn e)), exponents clamped."""
        if not torch.isfinite(edge_feats).all():
            raise NumericError(f"layer {self.index}: non-finite edge features")
        logits = self.attn_edge(edge_feats)
        degree = topo.in_degree[topo.tails].to(edge_feats.dtype).unsqueeze(1)
        if self.log_length_scaling:
            # ablation variant: multiply logits by log(1 + in-degree) instead
            # of multiplying the exponential by the in-degree
            scores = torch.exp(torch.clamp(logits * degree.log1p(), max=EXP_CLAMP))
        else:
            scores = degree * torch.exp(torch.clamp(logits, max=EXP_CLAMP))
        if mask is not None:
            scores = scores * mask
        return scores

    def attention_weights(
        self, scores: torch.Tensor, topo: AttentionTopology
    ) -> torch.Tensor:
        """a = s / (sum of s over the tail's in-edges + epsilon)."""
        denom = torch.zeros(
            topo.num_nodes, self.width, dtype=scores.dtype
        ).index_add_(0, topo.tails, scores)
        return scores / (denom[topo.tails] + self.epsilon)

    def aggregate(
        self,
        x: torch.Tensor,
        e: torch.Tensor,
        a: torch.Tensor,
        topo: AttentionTopology,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape != (topo.num_nodes, self.width):
            raise ValidationError(
                f"node features shape {tuple(x.shape)} does not match topology"
            )
        if e.shape != (topo.num_edges, self.width):
            raise ValidationError(
                f"edge features shape {tuple(e.shape)} does not match topology"
            )
        messages = a * (self.tail_head(x)[topo.heads] + self.tail_edge(e))
        gathered = torch.zeros_like(x).index_add_(0, topo.tails, messages)
        x_tilde = self.tail_tail(x) + gathered
        e_tilde = (
            self.edge_edge(e)
            + self.edge_head(x)[topo.heads]
            + self.edge_tail(x)[topo.tails]
        )
        return x_tilde, e_tilde

    def ffn(
        self, x_tilde: torch.Tensor, e_tilde: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Single-linear FFN with pre-activation bias.

        The edge output belongs to the reversed ordered pair; since slots are
        fixed, no rows move and the next layer's flipped topology reads it
        under the new orientation.
        """
        phi = ACTIVATIONS[self.activation]
        x_hat = self.node_out(phi(x_tilde + self.b_node_act))
        e_hat = self.edge_out(phi(e_tilde + self.b_edge_act))
        return x_hat, e_hat

    def forward(
        self,
        x: torch.Tensor,
        e: torch.Tensor,
        topo: AttentionTopology,
        alpha: float = 1.0,
        mask: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Full layer: scores -> weights -> aggregate -> FFN -> residual -> PN-V.

        In training mode, a DropKey mask is sampled from ``generator`` unless
        an explicit ``mask`` is supplied; eval mode keeps every key.
        """
        if not torch.isfinite(x).all():
            raise NumericError(f"layer {self.index}: non-finite node features")
        if mask is None and self.training and self.dropkey_rate > 0.0:
            mask = sample_dropkey_mask(
                topo.num_edges,
                self.width,
                self.dropkey_rate,
                generator=generator,
                dtype=e.dtype,
            )
        scores = self.attention_scores(e, topo, mask)
        a = self.attention_weights(scores, topo)
        x_tilde, e_tilde = self.aggregate(x, e, a, topo)
        x_hat, e_hat = self.ffn(x_tilde, e_tilde)
        x_new = self.pnv_node(x + alpha * x_hat)
        e_new = self.pnv_edge(e + alpha * e_hat)
        return x_new, e_new
