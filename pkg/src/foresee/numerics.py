"""Differentiable building blocks shared by every encoder.

Everything runs in float64 on top of torch autograd. Randomness is routed
through :class:`RngStream` so that init, dropout, masking, data generation and
fold assignment draw from independent, reproducible streams.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, TrainingDivergenceError, ValidationError

DTYPE = torch.float64

PURPOSES = ("init", "dropout", "masking", "datagen", "folds")


class RngStream:
    """Seeded random stream tagged with a purpose label.

    Two streams with the same ``(seed, purpose)`` produce identical draws; a
    different purpose gives a statistically independent stream.
    """

    def __init__(self, seed: int, purpose: str, *, _spawn_key: tuple[int, ...] = ()):
        if purpose not in PURPOSES:
            raise ValidationError(f"unknown rng purpose {purpose!r}; expected one of {PURPOSES}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.purpose = purpose
        self._spawn_key = _spawn_key
        tag = zlib.crc32(purpose.encode())
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, tag, *_spawn_key])
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, purpose={self.purpose!r}, key={self._spawn_key})"

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream (e.g. one per fold or per epoch)."""
        return RngStream(self.seed, self.purpose, _spawn_key=self._spawn_key + (int(index),))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.generator.integers(0, 2**62)))
        return g


# ----------------------------------------------------------------------------
# functional ops
# ----------------------------------------------------------------------------


def linear_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``y = W x + b`` applied over the last axis of ``x``. ``weight`` is (out, in)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}")
    y = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {tuple(bias.shape)} does not match weight shape {tuple(weight.shape)}")
        y = y + bias
    return y


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm: gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)} do not match input {tuple(x.shape)}"
        )
    if eps <= 0:
        raise ValidationError("layer_norm: eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi written through erf."""
    if isinstance(x, torch.Tensor):
        return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if x.shape[dim] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def dropout_mask(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout. Identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


# ----------------------------------------------------------------------------
# modules
# ----------------------------------------------------------------------------


class Dropout(nn.Module):
    """Dropout drawing from an explicit generator instead of the global torch RNG."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.generator: torch.Generator | None = None

    def forward(self, x):
        return dropout_mask(x, self.rate, self.training, self.generator)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads.

    Self-attention when ``kv`` is omitted, cross-attention otherwise. Inputs
    may carry any number of leading batch axes.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ValidationError(f"model dim {dim} is not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights = None

    def _split(self, t):
        return t.reshape(*t.shape[:-1], self.heads, self.head_dim).transpose(-3, -2)

    def forward(self, x, kv=None, keep_weights=False):
        kv = x if kv is None else kv
        if x.shape[-2] == 0 or kv.shape[-2] == 0:
            raise ShapeError("attention over an empty token sequence")
        q = self._split(self.q(x) * (1.0 / math.sqrt(self.head_dim)))
        k, v = self._split(self.k(kv)), self._split(self.v(kv))
        scores = q @ k.transpose(-1, -2)
        weights = torch.softmax(scores, dim=-1)
        if keep_weights:
            self.last_weights = weights.detach()
        ctx = (weights @ v).transpose(-3, -2)
        return self.out(ctx.reshape(*ctx.shape[:-2], self.dim))


def multi_head_attention(q_tokens, kv_tokens, heads: int, params: MultiHeadAttention) -> torch.Tensor:
    if params.heads != heads:
        raise ValidationError(f"attention module has {params.heads} heads, {heads} requested")
    return params(q_tokens, kv_tokens)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(gelu(self.fc1(x))))


class TransformerBlock(nn.Module):
    """Pre-norm block: ``x + MSA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.drop = Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ffn(self.norm2(x)))


class TransformerStack(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, depth: int, dropout: float = 0.0):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, ffn_dim, dropout) for _ in range(depth))

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def init_parameters(module: nn.Module, rng: RngStream, embed_std: float = 0.02) -> None:
    """Fan-in uniform weights, zero biases, unit/zero norm affines.

    Free-standing parameters (positional tables, mask tokens) get small
    normal noise; scalar mixing weights keep whatever the owner set.
    """
    g = rng.torch_generator()
    handled = set()
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / math.sqrt(sub.in_features)
                sub.weight.copy_(torch.rand(sub.weight.shape, generator=g, dtype=sub.weight.dtype) * 2 * bound - bound)
                handled.add(id(sub.weight))
                if sub.bias is not None:
                    sub.bias.zero_()
                    handled.add(id(sub.bias))
            elif isinstance(sub, nn.Conv1d):
                fan_in = sub.in_channels * sub.kernel_size[0]
                bound = 1.0 / math.sqrt(fan_in)
                sub.weight.copy_(torch.rand(sub.weight.shape, generator=g, dtype=sub.weight.dtype) * 2 * bound - bound)
                handled.add(id(sub.weight))
                if sub.bias is not None:
                    sub.bias.zero_()
                    handled.add(id(sub.bias))
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()
                handled.update((id(sub.weight), id(sub.bias)))
            elif isinstance(sub, nn.LSTM):
                for name, p in sub.named_parameters():
                    bound = 1.0 / math.sqrt(sub.hidden_size)
                    if name.startswith("bias"):
                        p.zero_()
                    else:
                        p.copy_(torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 * bound - bound)
                    handled.add(id(p))
        for name, p in module.named_parameters():
            if id(p) in handled or p.dim() == 0:
                continue
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * embed_std)


def set_dropout_generator(module: nn.Module, generator: torch.Generator | None) -> None:
    for sub in module.modules():
        if isinstance(sub, Dropout):
            sub.generator = generator


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 5e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adam_step(params, state: OptimizerState) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    ``params`` is an iterable of ``(name, parameter)``; gradients are read
    from ``parameter.grad`` (missing gradients count as zero).
    """
    params = [(n, p) for n, p in params if p.requires_grad]
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingDivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            v = state.exp_avg_sq[name]
            if m.shape != p.shape:
                raise ShapeError(f"optimizer state for {name!r} has shape {tuple(m.shape)}, parameter {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            p.addcdiv_(m / c1, (v / c2).sqrt().add_(state.eps), value=-state.lr)
            if not torch.isfinite(p).all():
                raise TrainingDivergenceError(f"parameter {name!r} became non-finite at step {t}")


# ----------------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------------


def finite_difference_check(f, params, h: float = 1e-5, coords_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is a zero-argument closure returning a scalar tensor; ``params`` is
    an iterable of tensors with ``requires_grad``. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. ``coords_per_param`` limits
    the check to a random subset of coordinates of each tensor.
    """
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise TrainingDivergenceError("loss is not finite")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    pick = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            idx = range(flat.numel())
            if coords_per_param is not None and flat.numel() > coords_per_param:
                idx = pick.choice(flat.numel(), size=coords_per_param, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise TrainingDivergenceError("loss is not finite under perturbation")
                numeric = (up - down) / (2 * h)
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
