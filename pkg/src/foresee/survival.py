"""Modality fusion, per-modality risk heads and the Cox partial-likelihood objective.

Sign convention: a larger output means a larger hazard (shorter survival).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, ValidationError
from .numerics import gelu

MODALITIES = ("P", "R", "CM")


class NoEventsWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    lambda_0: float = 5.0
    lambda_m: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.lambda_0 < 0 or any(w < 0 for w in self.lambda_m):
            raise ValidationError("loss weights must be non-negative")
        if len(self.lambda_m) != len(MODALITIES):
            raise ValidationError("need one Cox weight per modality")


@dataclass
class RiskOutput:
    O_P: float
    O_R: float
    O_CM: float

    @property
    def fused_risk(self) -> float:
        return inference_risk(self)


class MLP(nn.Module):
    def __init__(self, dim, hidden=None, out=None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden or dim)
        self.fc2 = nn.Linear(hidden or dim, out or dim)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class ModalityFusion(nn.Module):
    """``F = MLP(LN(MLP(x) + x) + x)``, applied token-wise."""

    def __init__(self, dim):
        super().__init__()
        self.inner = MLP(dim)
        self.norm = nn.LayerNorm(dim)
        self.outer = MLP(dim)

    def forward(self, x):
        if x.shape[-2] == 0:
            raise ShapeError("fusion input has no tokens")
        return self.outer(self.norm(self.inner(x) + x) + x)


def fuse_modalities(x, params: ModalityFusion):
    return params(x)


class RiskHead(nn.Module):
    """Global mean pooling followed by an MLP to a scalar."""

    def __init__(self, dim, hidden=None):
        super().__init__()
        self.mlp = MLP(dim, hidden or max(1, dim // 2), 1)

    def forward(self, tokens):
        return modality_risk(tokens, self.mlp)


def modality_risk(tokens, head):
    if tokens.shape[-2] == 0:
        raise ShapeError("cannot read out an empty token matrix")
    return head(tokens.mean(dim=-2)).squeeze(-1)


def cox_loss(risk, time, event):
    """Negative Cox partial log-likelihood summed over the batch.

    Risk sets are ``{j : t_j >= t_i}`` (ties included). Returns 0 and emits
    :class:`NoEventsWarning` when the batch has no events.
    """
    risk = torch.as_tensor(risk, dtype=torch.float64) if not isinstance(risk, torch.Tensor) else risk
    time = torch.as_tensor(np.asarray(time, dtype=float), dtype=risk.dtype)
    event = torch.as_tensor(np.asarray(event, dtype=float), dtype=risk.dtype)
    if risk.dim() != 1 or risk.shape != time.shape or risk.shape != event.shape:
        raise ShapeError(f"risk {tuple(risk.shape)}, time {tuple(time.shape)}, event {tuple(event.shape)} must be equal-length vectors")
    if risk.numel() == 0:
        raise ShapeError("empty batch")
    if (time <= 0).any():
        raise ValidationError("survival times must be positive")
    if not ((event == 0) | (event == 1)).all():
        raise ValidationError("event indicators must be 0 or 1")
    if event.sum() == 0:
        warnings.warn("no events in batch; Cox loss is 0", NoEventsWarning, stacklevel=2)
        return risk.sum() * 0.0
    at_risk = time[None, :] >= time[:, None]  # row i: members of R(t_i)
    masked = torch.where(at_risk, risk[None, :], torch.full_like(at_risk, -torch.inf, dtype=risk.dtype))
    log_denominator = torch.logsumexp(masked, dim=1)
    return (event * (log_denominator - risk)).sum()


def total_loss(cox, trimae, weights: LossWeights):
    cox = list(cox)
    if len(cox) != len(weights.lambda_m):
        raise ValidationError(f"{len(cox)} Cox terms for {len(weights.lambda_m)} weights")
    return sum(w * c for w, c in zip(weights.lambda_m, cox)) + weights.lambda_0 * trimae


def inference_risk(out) -> float:
    """Unweighted mean of the modality outputs."""
    if isinstance(out, RiskOutput):
        return (out.O_P + out.O_R + out.O_CM) / 3.0
    return out.mean(dim=-1)


class SurvivalHead(nn.Module):
    """Shared fusion trunk over all modality tokens, then one risk head per modality slice."""

    def __init__(self, dim):
        super().__init__()
        self.fusion = ModalityFusion(dim)
        self.heads = nn.ModuleDict({m: RiskHead(dim) for m in MODALITIES})

    def forward(self, tokens):
        """``tokens``: three (B, n_m, dim) tensors. Returns (B, 3) outputs ordered P, R, CM."""
        sizes = [t.shape[-2] for t in tokens]
        fused = self.fusion(torch.cat(tokens, dim=-2))
        slices = torch.split(fused, sizes, dim=-2)
        return torch.stack([self.heads[m](s) for m, s in zip(MODALITIES, slices)], dim=-1)
