"""Hybrid attention encoder for flat molecular vectors (RNA or CNV+MUT)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .numerics import MultiHeadAttention, gelu
from .wavelet import WaveletConfig, check_length, dwt_denoise

VARIANTS = ("full", "no_cta", "no_cna", "plain")


@dataclass(frozen=True)
class HaeConfig:
    input_len: int = 256
    chunk: int = 16
    dim: int = 64
    heads: int = 4
    beta: float = 0.25
    alpha: float = 1.0
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    denoise: bool = True
    variant: str = "full"

    def __post_init__(self):
        if self.input_len < 4:
            raise ValidationError("molecular input must have length >= 4")
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError(f"beta must lie in (0, 1], got {self.beta}")
        if math.floor(self.dim * self.beta) < 1:
            raise ValidationError("dim * beta must be at least 1")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown HAE variant {self.variant!r}")
        if self.chunk < 1:
            raise ValidationError("chunk size must be positive")
        check_length(self.input_len, self.wavelet.levels)

    @property
    def n_tokens(self) -> int:
        return -(-self.input_len // self.chunk)


def tokenize(x: torch.Tensor, chunk: int) -> torch.Tensor:
    """(..., L) -> (..., ceil(L / chunk), chunk), zero-padding the tail."""
    pad = (-x.shape[-1]) % chunk
    if pad:
        x = F.pad(x, (0, pad))
    return x.reshape(*x.shape[:-1], -1, chunk)


class ContextualAttention(nn.Module):
    """LN -> wavelet denoise -> LSTM over chunks -> LN -> self-attention."""

    def __init__(self, cfg: HaeConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_in = nn.LayerNorm(cfg.input_len)
        self.lstm = nn.LSTM(cfg.chunk, cfg.dim, batch_first=True)
        self.norm_mid = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads)

    def forward(self, x, denoise=None):
        denoise = self.cfg.denoise if denoise is None else denoise
        y = self.norm_in(x)
        if denoise:
            y = dwt_denoise(y, self.cfg.wavelet)
        seq = lstm_encode(tokenize(y, self.cfg.chunk), self.lstm)
        return self.attn(self.norm_mid(seq))


class ChannelAttention(nn.Module):
    """Squeeze-excite style gate over the embedding channels, scaled by a learnable alpha."""

    def __init__(self, cfg: HaeConfig):
        super().__init__()
        self.cfg = cfg
        inner = math.floor(cfg.dim * cfg.beta)
        self.norm_in = nn.LayerNorm(cfg.input_len)
        self.embed = nn.Linear(cfg.chunk, cfg.dim)
        self.squeeze = nn.Linear(cfg.dim, inner)
        self.expand = nn.Linear(inner, cfg.dim)
        self.alpha = nn.Parameter(torch.tensor(float(cfg.alpha)))
        self.last_gate = None

    def forward(self, x):
        tokens = self.embed(tokenize(self.norm_in(x), self.cfg.chunk))
        gate = torch.sigmoid(self.expand(gelu(self.squeeze(tokens.mean(dim=-2)))))
        self.last_gate = gate.detach()
        return self.alpha * tokens * gate.unsqueeze(-2)


def lstm_encode(sequence: torch.Tensor, lstm: nn.LSTM) -> torch.Tensor:
    """Per-step hidden states of a single-layer LSTM; ``sequence`` is (n, in) or (B, n, in)."""
    squeeze = sequence.dim() == 2
    if squeeze:
        sequence = sequence.unsqueeze(0)
    if sequence.shape[-2] < 1:
        raise ShapeError("LSTM needs at least one step")
    out, _ = lstm(sequence)
    return out.squeeze(0) if squeeze else out


class HybridAttentionEncoder(nn.Module):
    def __init__(self, cfg: HaeConfig):
        super().__init__()
        self.cfg = cfg
        self.cta = ContextualAttention(cfg)
        self.cna = ChannelAttention(cfg)
        self.embed = nn.Linear(cfg.chunk, cfg.dim)
        self.norm_tok = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads)
        self.out_norm = nn.LayerNorm(cfg.dim)

    def forward(self, x, variant=None):
        """(B, L) or (L,) -> (B, n_tokens, dim) or (n_tokens, dim)."""
        variant = variant or self.cfg.variant
        if variant not in VARIANTS:
            raise ValidationError(f"unknown HAE variant {variant!r}")
        if x.shape[-1] != self.cfg.input_len:
            raise ShapeError(f"expected molecular vector of length {self.cfg.input_len}, got {x.shape[-1]}")
        h = self.norm_tok(self.embed(tokenize(x, self.cfg.chunk)))
        if variant in ("full", "no_cna"):
            h = h + self.cta(x)
        if variant in ("full", "no_cta"):
            h = h + self.cna(x)
        return self.out_norm(self.attn(h))


def cta_path(x, params: ContextualAttention):
    return params(x)


def cna_path(x, params: ChannelAttention):
    return params(x)


def hae_forward(x, params: HybridAttentionEncoder, ablation="full"):
    return params(x, variant=ablation)
