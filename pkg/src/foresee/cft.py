"""Cross Fusion Transformer over the three field-of-view patch graphs."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .numerics import TransformerStack, gelu

VIEW_ORDER = ("l", "m", "s")  # coarse to fine, used to pick adjacent pairs


@dataclass(frozen=True)
class CftConfig:
    d_x: int = 64
    gnn_layers: int = 2
    gnn_hidden: int = 64
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    depth: int = 1
    fusion_channels: int = 64
    dropout: float = 0.0
    views: tuple = ("s", "m", "l")
    grid_shapes: tuple = ((8, 8), (6, 6), (4, 4))
    aggregation: str = "mean"

    def __post_init__(self):
        if self.gnn_layers < 1:
            raise ValidationError("need at least one GNN layer")
        if min(self.d_x, self.gnn_hidden, self.dim, self.ffn_dim, self.fusion_channels, self.depth) < 1:
            raise ValidationError("CFT dimensions must be positive")
        if self.dim % self.heads:
            raise ValidationError(f"transformer dim {self.dim} not divisible by {self.heads} heads")
        if not self.views or set(self.views) - {"s", "m", "l"} or len(set(self.views)) != len(self.views):
            raise ValidationError(f"views must be a non-empty subset of s, m, l; got {self.views}")
        if self.aggregation not in ("mean", "sum", "max"):
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")


class GNNLayer(nn.Module):
    """Sample-and-aggregate graph layer.

    Each neighbour sends ``message(h_n)``; messages are pooled over the
    neighbourhood (mean by default) and the node is updated with
    ``gelu(W [h_m | F_m | x_m] + b)``. ``message="identity"`` and
    ``update in {"identity", "aggregate"}`` exist for debugging.
    """

    def __init__(self, in_dim, out_dim, d_x, message="linear", update="full", aggregation="mean"):
        super().__init__()
        self.message_kind, self.update_kind, self.aggregation = message, update, aggregation
        msg_dim = out_dim if message == "linear" else in_dim
        self.message = nn.Linear(in_dim, out_dim, bias=False) if message == "linear" else nn.Identity()
        self.update = nn.Linear(in_dim + msg_dim + d_x, out_dim) if update == "full" else None

    def aggregate(self, msgs, adjacency):
        # adjacency: (..., o, o) binary
        if self.aggregation == "max":
            big = torch.where(adjacency[..., None] > 0, msgs[..., None, :, :], torch.full_like(msgs[..., None, :, :], -torch.inf))
            out = big.amax(dim=-2)
            return torch.where(torch.isfinite(out), out, torch.zeros_like(out))
        agg = adjacency @ msgs
        if self.aggregation == "mean":
            deg = adjacency.sum(dim=-1, keepdim=True)
            agg = agg / deg.clamp(min=1.0)
        return agg

    def forward(self, h, adjacency, x):
        if h.shape[-2] != adjacency.shape[-1] or x.shape[-2] != adjacency.shape[-1]:
            raise ShapeError(
                f"graph has {adjacency.shape[-1]} nodes, embeddings {h.shape[-2]}, node features {x.shape[-2]}"
            )
        agg = self.aggregate(self.message(h), adjacency)
        if self.update_kind == "identity":
            return h
        if self.update_kind == "aggregate":
            return agg
        return gelu(self.update(torch.cat([h, agg, x], dim=-1)))


def gnn_layer(adjacency, h_prev, x, layer: GNNLayer):
    return layer(h_prev, adjacency, x)


def transformer_encode(tokens, stack: TransformerStack):
    return stack(tokens)


def _as_batch(t):
    if t.dim() == 2:
        return t.unsqueeze(0), True
    if t.dim() == 3:
        return t, False
    raise ShapeError(f"token matrix must be (n, d) or (B, n, d), got {tuple(t.shape)}")


class CrossFusion(nn.Module):
    """Splice-mix-restore fusion of two or three token sequences.

    Each (n_i, d) sequence is viewed as a d-channel map over tokens, pooled to
    the shortest length, concatenated along channels, mixed by two 1-D
    convolutions, split, upsampled (nearest) back to n_i, gated by a
    channel-pooled fully connected layer and added to the original map with
    learnable weights.
    """

    def __init__(self, dim, n_inputs=2, channels=64, kernel_size=3):
        super().__init__()
        if n_inputs not in (2, 3):
            raise ValidationError("cross fusion takes two or three inputs")
        self.dim, self.n_inputs = dim, n_inputs
        width = dim * n_inputs
        self.conv1 = nn.Conv1d(width, channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(channels, width, kernel_size, padding=kernel_size // 2)
        self.gate = nn.Linear(width, width)
        self.fused_weight = nn.Parameter(torch.ones(n_inputs))
        self.residual_weight = nn.Parameter(torch.ones(n_inputs))

    def forward(self, *tokens):
        if len(tokens) != self.n_inputs:
            raise ValidationError(f"expected {self.n_inputs} token matrices, got {len(tokens)}")
        batched = [_as_batch(t) for t in tokens]
        squeeze = batched[0][1]
        tokens = [t for t, _ in batched]
        dims = {t.shape[-1] for t in tokens}
        if dims != {self.dim}:
            raise ShapeError(f"feature dims {sorted(dims)} do not match fusion dim {self.dim}")
        maps = [t.transpose(1, 2) for t in tokens]  # (B, d, n_i)
        lengths = [m.shape[-1] for m in maps]
        n_min = min(lengths)
        spliced = torch.cat([F.adaptive_avg_pool1d(m, n_min) for m in maps], dim=1)
        mixed = self.conv2(gelu(self.conv1(spliced)))
        gate = torch.sigmoid(self.gate(mixed.mean(dim=-1)))  # channel global average pooling
        outs = []
        for i, (m, n) in enumerate(zip(maps, lengths)):
            part = mixed[:, i * self.dim : (i + 1) * self.dim]
            part = F.interpolate(part, size=n, mode="nearest")
            part = part * gate[:, i * self.dim : (i + 1) * self.dim, None]
            out = self.fused_weight[i] * part + self.residual_weight[i] * m
            out = out.transpose(1, 2)
            outs.append(out.squeeze(0) if squeeze else out)
        return tuple(outs)


def cross_fuse_pair(a, b, params: CrossFusion):
    return params(a, b)


def cross_fuse_triple(l, m, s, params: CrossFusion):
    return params(l, m, s)


class CrossFusionTransformer(nn.Module):
    """GNN -> transformer -> pairwise fusion -> transformer -> all-view fusion, per selected view."""

    def __init__(self, config: CftConfig):
        super().__init__()
        self.config = c = config
        self.views = tuple(v for v in VIEW_ORDER if v in c.views)
        self.gnn = nn.ModuleDict()
        self.proj = nn.ModuleDict()
        self.pos = nn.ParameterDict()
        self.stack1 = nn.ModuleDict()
        self.stack2 = nn.ModuleDict()
        for v in self.views:
            layers = [GNNLayer(c.d_x, c.gnn_hidden, c.d_x, aggregation=c.aggregation)]
            layers += [
                GNNLayer(c.gnn_hidden, c.gnn_hidden, c.d_x, aggregation=c.aggregation) for _ in range(c.gnn_layers - 1)
            ]
            self.gnn[v] = nn.ModuleList(layers)
            self.proj[v] = nn.Linear(c.gnn_hidden, c.dim) if c.gnn_hidden != c.dim else nn.Identity()
            rows, cols = c.grid_shapes[("s", "m", "l").index(v)]
            self.pos[v] = nn.Parameter(torch.zeros(rows * cols, c.dim))
            self.stack1[v] = TransformerStack(c.dim, c.heads, c.ffn_dim, c.depth, c.dropout)
            self.stack2[v] = TransformerStack(c.dim, c.heads, c.ffn_dim, c.depth, c.dropout)
        self.pairs = list(zip(self.views[:-1], self.views[1:]))
        self.fuse_pairs = nn.ModuleList(CrossFusion(c.dim, 2, c.fusion_channels) for _ in self.pairs)
        self.fuse_all = CrossFusion(c.dim, len(self.views), c.fusion_channels) if len(self.views) >= 2 else None
        self.out_norm = nn.LayerNorm(c.dim)

    def encode_view(self, view, x, adjacency, pos_index):
        h = x
        for layer in self.gnn[view]:
            h = layer(h, adjacency, x)
        h = self.proj[view](h) + self.pos[view][pos_index]
        return self.stack1[view](h)

    def forward(self, graphs: dict):
        """``graphs[v]`` holds ``x`` (B, o, d_x), ``adjacency`` (B, o, o) and ``pos`` (B, o).

        Returns pathology tokens (B, sum o, dim) ordered small, medium, large,
        and their global mean (B, dim).
        """
        h = {v: self.encode_view(v, graphs[v]["x"], graphs[v]["adjacency"], graphs[v]["pos"]) for v in self.views}
        if self.pairs:
            acc = {v: [] for v in self.views}
            for (a, b), fuse in zip(self.pairs, self.fuse_pairs):
                fa, fb = fuse(h[a], h[b])
                acc[a].append(fa)
                acc[b].append(fb)
            h = {v: torch.stack(acc[v]).mean(dim=0) for v in self.views}
        h = {v: self.stack2[v](h[v]) for v in self.views}
        if self.fuse_all is not None:
            h = dict(zip(self.views, self.fuse_all(*(h[v] for v in self.views))))
        tokens = self.out_norm(torch.cat([h[v] for v in ("s", "m", "l") if v in h], dim=-2))
        return tokens, tokens.mean(dim=-2)
