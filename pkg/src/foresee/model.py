"""End-to-end survival model: CFT for pathology, HAE for molecular data, TriMAE, risk heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .cft import CftConfig, CrossFusionTransformer
from .dataio import SCALES, PatientRecord, Schema
from .errors import ValidationError
from .hae import HaeConfig, HybridAttentionEncoder
from .numerics import DTYPE, RngStream, init_parameters, set_dropout_generator
from .survival import SurvivalHead, inference_risk
from .trimae import TriMAE
from .wavelet import WaveletConfig
from .wsigraph import build_grid_graph


@dataclass(frozen=True)
class ModelConfig:
    d_x: int = 64
    rna_dim: int = 256
    cnv_mut_dim: int = 128
    grid_shapes: tuple = ((8, 8), (6, 6), (4, 4))
    dim: int = 64
    heads: int = 4
    depth: int = 1
    gnn_layers: int = 2
    gnn_hidden: int = 0  # 0 -> dim
    fusion_channels: int = 0  # 0 -> dim
    chunk: int = 16
    wavelet_order: int = 2
    wavelet_levels: int = 2
    beta: float = 0.25
    hae_variant: str = "full"
    trimae: bool = True
    mask_ratio: float = 0.85
    allow_low_mask: bool = False
    dropout: float = 0.2
    views: tuple = ("s", "m", "l")

    @classmethod
    def for_schema(cls, schema: Schema, **kw):
        return cls(d_x=schema.d_x, rna_dim=schema.rna_dim, cnv_mut_dim=schema.cnv_mut_dim, grid_shapes=schema.grid_shapes, **kw)

    def to_dict(self):
        d = asdict(self)
        d["grid_shapes"] = [list(s) for s in self.grid_shapes]
        d["views"] = list(self.views)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid_shapes"] = tuple(tuple(s) for s in d["grid_shapes"])
        d["views"] = tuple(d["views"])
        return cls(**d)

    def cft_config(self):
        return CftConfig(
            d_x=self.d_x,
            gnn_layers=self.gnn_layers,
            gnn_hidden=self.gnn_hidden or self.dim,
            dim=self.dim,
            heads=self.heads,
            ffn_dim=4 * self.dim,
            depth=self.depth,
            fusion_channels=self.fusion_channels or self.dim,
            dropout=self.dropout,
            views=tuple(self.views),
            grid_shapes=tuple(self.grid_shapes),
        )

    def hae_config(self, input_len):
        return HaeConfig(
            input_len=input_len,
            chunk=self.chunk,
            dim=self.dim,
            heads=self.heads,
            beta=self.beta,
            wavelet=WaveletConfig(self.wavelet_order, self.wavelet_levels),
            variant=self.hae_variant,
        )

    def token_counts(self):
        n_path = sum(r * c for s, (r, c) in zip(SCALES, self.grid_shapes) if s in self.views)
        return n_path, -(-self.rna_dim // self.chunk), -(-self.cnv_mut_dim // self.chunk)


class ForeseeModel(nn.Module):
    def __init__(self, config: ModelConfig, rng: RngStream | None = None):
        super().__init__()
        self.config = config
        self.cft = CrossFusionTransformer(config.cft_config())
        self.hae_rna = HybridAttentionEncoder(config.hae_config(config.rna_dim))
        self.hae_cm = HybridAttentionEncoder(config.hae_config(config.cnv_mut_dim))
        self.trimae = TriMAE(
            config.token_counts(),
            config.dim,
            heads=config.heads,
            ratio=config.mask_ratio,
            allow_low_mask=config.allow_low_mask,
            dropout=config.dropout,
        )
        self.head = SurvivalHead(config.dim)
        self.to(DTYPE)
        init_parameters(self, rng or RngStream(0, "init"))

    def set_dropout_rng(self, rng: RngStream | None):
        set_dropout_generator(self, None if rng is None else rng.torch_generator())

    def encode(self, batch):
        path, _ = self.cft(batch["graphs"])
        return [path, self.hae_rna(batch["rna"]), self.hae_cm(batch["cnv_mut"])]

    def forward(self, batch, mask_rng: RngStream | None = None, missing=None, use_trimae=None):
        """Returns a dict with ``outputs`` (B, 3), ``risk`` (B,), ``trimae_loss`` and the token lists.

        In training mode TriMAE masks every modality with ``mask_rng``. In
        eval mode ``missing`` (three per-branch (B, k) index arrays) marks
        deleted tokens: they are zeroed, then reconstructed when TriMAE is on.
        """
        use_trimae = self.config.trimae if use_trimae is None else use_trimae
        tokens = self.encode(batch)
        loss = tokens[0].new_zeros(())
        refined = tokens
        if self.training and use_trimae:
            refined, loss, _ = self.trimae(tokens, rng=mask_rng)
        elif missing is not None:
            refined = [zero_positions(t, m) for t, m in zip(tokens, missing)]
            if use_trimae:
                refined, loss, _ = self.trimae(refined, missing=missing)
        outputs = self.head(refined)
        return {"outputs": outputs, "risk": inference_risk(outputs), "trimae_loss": loss, "tokens": tokens, "refined": refined}


def zero_positions(tokens, index):
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        return tokens
    keep = torch.ones(tokens.shape[:2], dtype=tokens.dtype)
    keep[np.arange(index.shape[0])[:, None], index] = 0.0
    return tokens * keep[..., None]


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------


@dataclass
class PatientTensors:
    graphs: dict
    rna: torch.Tensor
    cnv_mut: torch.Tensor
    time: float
    event: int
    signature: tuple = field(default=())


def patient_tensors(p: PatientRecord, schema: Schema, views=SCALES) -> PatientTensors:
    graphs = {}
    for s in views:
        grid = p.pathology[s]
        g = build_grid_graph(grid.features, grid.coords, s)
        cols = schema.grid_shape(s)[1]
        graphs[s] = {
            "x": torch.as_tensor(g.features, dtype=DTYPE),
            "adjacency": torch.as_tensor(g.adjacency, dtype=DTYPE),
            "pos": torch.as_tensor(g.coords[:, 0] * cols + g.coords[:, 1], dtype=torch.long),
        }
    sig = tuple(graphs[s]["x"].shape[0] for s in views)
    return PatientTensors(
        graphs,
        torch.as_tensor(p.rna, dtype=DTYPE),
        torch.as_tensor(p.cnv_mut, dtype=DTYPE),
        float(p.time),
        int(p.event),
        sig,
    )


def collate(items: list[PatientTensors]) -> dict:
    if not items:
        raise ValidationError("empty batch")
    if len({it.signature for it in items}) != 1:
        raise ValidationError("patients in one batch must share graph node counts; group them first")
    views = items[0].graphs.keys()
    return {
        "graphs": {v: {k: torch.stack([it.graphs[v][k] for it in items]) for k in ("x", "adjacency", "pos")} for v in views},
        "rna": torch.stack([it.rna for it in items]),
        "cnv_mut": torch.stack([it.cnv_mut for it in items]),
        "time": np.array([it.time for it in items]),
        "event": np.array([it.event for it in items]),
    }


def group_by_signature(items, index):
    """Split ``index`` into runs of patients with identical graph node counts (order preserved)."""
    groups = {}
    for i in index:
        groups.setdefault(items[i].signature, []).append(i)
    return list(groups.values())
