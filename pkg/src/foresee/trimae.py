"""Triplet masked autoencoder over the pathology, RNA and CNV/MUT token sequences.

Branch k masks modality k only. Each branch encodes its visible tokens with
its own transformer; a lightweight decoder fills masked positions with a
shared mask token, cross-attends to the other two branches, self-attends and
projects back to the token dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, ValidationError
from .numerics import MultiHeadAttention, RngStream, TransformerBlock, TransformerStack

BRANCHES = ("P", "R", "CM")
MIN_MASK_RATIO = 0.8


class MaskRatioError(ValidationError):
    """Mask ratio below the 80% floor without an explicit override."""


@dataclass
class MaskSpec:
    branch: str
    n: int
    masked: np.ndarray  # (B, n_masked) sorted indices
    ratio: float

    @property
    def modality(self) -> str:
        return self.branch

    @property
    def n_masked(self) -> int:
        return self.masked.shape[1]

    def visible(self) -> np.ndarray:
        keep = np.ones((self.masked.shape[0], self.n), dtype=bool)
        np.put_along_axis(keep, self.masked, False, axis=1)
        return np.nonzero(keep)[1].reshape(self.masked.shape[0], -1)

    def bool_mask(self) -> np.ndarray:
        m = np.zeros((self.masked.shape[0], self.n), dtype=bool)
        np.put_along_axis(m, self.masked, True, axis=1)
        return m

    @classmethod
    def from_indices(cls, branch, n, masked):
        masked = np.asarray(masked, dtype=np.int64)
        if masked.ndim == 1:
            masked = masked[None, :]
        masked = np.sort(masked, axis=1)
        if masked.size and (masked.min() < 0 or masked.max() >= n):
            raise ValidationError(f"mask index out of range for {n} tokens")
        if any(len(set(row)) != len(row) for row in masked.tolist()):
            raise ValidationError("mask indices must be unique")
        ratio = masked.shape[1] / n
        return cls(branch, n, masked, ratio)


def sample_mask(n: int, ratio: float, branch: str, rng: RngStream, batch: int = 1, allow_low_mask: bool = False) -> MaskSpec:
    """``ceil(ratio * n)`` distinct masked positions per row, uniform without replacement.

    The count is capped at ``n - 1`` so the encoder always sees one token.
    """
    if branch not in BRANCHES:
        raise ValidationError(f"unknown branch {branch!r}")
    if n < 2:
        raise ValidationError("need at least two tokens to mask")
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"mask ratio must lie in (0, 1), got {ratio}")
    if ratio < MIN_MASK_RATIO and not allow_low_mask:
        raise MaskRatioError(f"mask ratio {ratio} is below {MIN_MASK_RATIO}; set allow_low_mask to override")
    k = min(math.ceil(round(ratio * n, 9)), n - 1)
    g = rng.generator
    rows = [np.sort(g.choice(n, size=k, replace=False)) for _ in range(batch)]
    return MaskSpec(branch, n, np.stack(rows).astype(np.int64), ratio)


def _gather(tokens, index):
    idx = torch.as_tensor(index, dtype=torch.long)
    return torch.gather(tokens, 1, idx[..., None].expand(-1, -1, tokens.shape[-1]))


class Branch(nn.Module):
    def __init__(self, n_tokens, dim, dec_dim, heads, dec_heads, depth, dropout):
        super().__init__()
        self.n_tokens = n_tokens
        self.enc_pos = nn.Parameter(torch.zeros(n_tokens, dim))
        self.encoder = TransformerStack(dim, heads, 4 * dim, depth, dropout)
        self.enc_norm = nn.LayerNorm(dim)
        self.to_dec = nn.Linear(dim, dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(dec_dim))
        self.dec_pos = nn.Parameter(torch.zeros(n_tokens, dec_dim))
        self.norm_q = nn.LayerNorm(dec_dim)
        self.norm_kv = nn.LayerNorm(dec_dim)
        self.cross = MultiHeadAttention(dec_dim, dec_heads)
        self.self_block = TransformerBlock(dec_dim, dec_heads, 2 * dec_dim, dropout)
        self.head_norm = nn.LayerNorm(dec_dim)
        self.head = nn.Linear(dec_dim, dim)

    def decode(self, seq, kv=None):
        if kv is not None:
            seq = seq + self.cross(self.norm_q(seq), self.norm_kv(kv))
        seq = self.self_block(seq)
        return self.head(self.head_norm(seq))


class TriMAE(nn.Module):
    def __init__(self, token_counts, dim, heads=4, depth=1, dec_dim=None, ratio=0.85, allow_low_mask=False, dropout=0.0):
        super().__init__()
        if len(token_counts) != 3:
            raise ValidationError("TriMAE needs token counts for exactly three modalities")
        dec_dim = dec_dim or max(heads, dim // 2)
        dec_heads = heads if dec_dim % heads == 0 else 1
        self.token_counts = tuple(int(n) for n in token_counts)
        self.dim, self.dec_dim = dim, dec_dim
        self.ratio, self.allow_low_mask = ratio, allow_low_mask
        # Training cuts the gradient through the reconstruction target, the
        # visible-mean anchor and the spliced reconstructions. Switch off to
        # get the exact derivative of the loss (used by gradient checks).
        self.stop_gradients = True
        if ratio < MIN_MASK_RATIO and not allow_low_mask:
            raise MaskRatioError(f"mask ratio {ratio} is below {MIN_MASK_RATIO}; set allow_low_mask to override")
        self.branches = nn.ModuleDict(
            {b: Branch(n, dim, dec_dim, heads, dec_heads, depth, dropout) for b, n in zip(BRANCHES, self.token_counts)}
        )

    def _sg(self, t):
        return t.detach() if self.stop_gradients else t

    def sample_masks(self, ns, batch, rng: RngStream):
        return [sample_mask(n, self.ratio, b, rng, batch, self.allow_low_mask) for b, n in zip(BRANCHES, ns)]

    def encode_visible(self, tokens, spec: MaskSpec):
        branch = self.branches[spec.branch]
        if tokens.shape[-2] != spec.n:
            raise ShapeError(f"branch {spec.branch}: {tokens.shape[-2]} tokens but mask built for {spec.n}")
        if spec.n_masked >= spec.n:
            raise ValidationError(f"branch {spec.branch}: every token is masked, nothing to encode")
        vis = spec.visible()
        x = _gather(tokens, vis) + branch.enc_pos[torch.as_tensor(vis)]
        return branch.enc_norm(branch.encoder(x))

    def decoder_inputs(self, latents, specs):
        seqs = []
        for lat, spec in zip(latents, specs):
            branch = self.branches[spec.branch]
            B = lat.shape[0]
            if lat.shape[1] != spec.n - spec.n_masked:
                raise ShapeError(f"branch {spec.branch}: latent length {lat.shape[1]} inconsistent with mask")
            seq = branch.mask_token.expand(B, spec.n, self.dec_dim)
            vis = torch.as_tensor(spec.visible(), dtype=torch.long)
            seq = seq.scatter(1, vis[..., None].expand(-1, -1, self.dec_dim), branch.to_dec(lat))
            seqs.append(seq + branch.dec_pos[: spec.n])
        return seqs

    def decode_reconstruct(self, latents, specs, anchors=None):
        """Decode every branch back to its full length.

        ``anchors`` optionally holds one (B, 1, dim) vector per branch that is
        added to the head output, so the decoder predicts an offset from it.
        """
        if len(latents) != 3 or len(specs) != 3:
            raise ValidationError("decoder needs three latents and three mask specs")
        seqs = self.decoder_inputs(latents, specs)
        outs = []
        for k, spec in enumerate(specs):
            kv = torch.cat([seqs[j] for j in range(3) if j != k], dim=1)
            out = self.branches[spec.branch].decode(seqs[k], kv)
            outs.append(out if anchors is None else out + anchors[k])
        return outs

    def reconstruct(self, tokens, specs):
        latents = [self.encode_visible(t, s) for t, s in zip(tokens, specs)]
        # per-patient mean of the visible tokens: the mean-imputation guess
        anchors = [self._sg(_gather(t, s.visible()).mean(dim=1, keepdim=True)) for t, s in zip(tokens, specs)]
        return self.decode_reconstruct(latents, specs, anchors)

    def forward(self, tokens, rng: RngStream | None = None, enabled=True, missing=None):
        """Returns ``(refined_tokens, loss, specs)``.

        Training (``missing is None``): sample masks from ``rng``, reconstruct,
        and splice reconstructions into the masked positions. Inference:
        ``missing`` lists per-branch (B, k) index arrays of absent tokens,
        which are treated as masked and replaced by reconstructions.
        """
        tokens = list(tokens)
        if not enabled:
            return tokens, tokens[0].new_zeros(()), None
        ns = [t.shape[1] for t in tokens]
        B = tokens[0].shape[0]
        if missing is None:
            if rng is None:
                raise ValidationError("TriMAE training pass needs a masking rng")
            specs = self.sample_masks(ns, B, rng)
        else:
            specs = [MaskSpec.from_indices(b, n, m) for b, n, m in zip(BRANCHES, ns, missing)]
            if all(s.n_masked == 0 for s in specs):
                return tokens, tokens[0].new_zeros(()), specs
        recon = self.reconstruct(tokens, specs)
        refined = []
        for t, r, s in zip(tokens, recon, specs):
            m = torch.as_tensor(s.bool_mask())[..., None]
            # the decoder learns from the reconstruction loss only
            refined.append(torch.where(m, self._sg(r), t))
        active = [k for k, s in enumerate(specs) if s.n_masked > 0]
        loss = trimae_loss([recon[k] for k in active], [self._sg(tokens[k]) for k in active], [specs[k] for k in active])
        return refined, loss, specs


def masked_mse(reconstructed, original, spec: MaskSpec):
    if spec.n_masked == 0:
        raise ValidationError(f"branch {spec.branch}: no masked positions, reconstruction loss undefined")
    if reconstructed.shape != original.shape:
        raise ShapeError(f"reconstruction {tuple(reconstructed.shape)} vs original {tuple(original.shape)}")
    r = _gather(reconstructed, spec.masked)
    o = _gather(original, spec.masked)
    return ((r - o) ** 2).mean()


def trimae_loss(reconstructed, originals, specs):
    """Masked-position MSE per branch, averaged over branches."""
    if not specs:
        raise ValidationError("no branches to score")
    return sum(masked_mse(r, o, s) for r, o, s in zip(reconstructed, originals, specs)) / len(specs)


def encode_visible(tokens, spec, params: TriMAE):
    return params.encode_visible(tokens, spec)


def decode_reconstruct(branch_latents, specs, params: TriMAE):
    return params.decode_reconstruct(branch_latents, specs)


def trimae_forward(modality_tokens, rng, params: TriMAE, enabled=True):
    refined, loss, _ = params(modality_tokens, rng=rng, enabled=enabled)
    return refined, loss
