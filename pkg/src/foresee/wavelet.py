"""Periodic orthonormal Daubechies wavelet transform and soft-threshold denoising.

Works on numpy arrays and on torch tensors; the torch path is differentiable
(analysis and synthesis are fixed orthogonal matrices, shrinkage has
subgradient 0 at the kinks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ValidationError

MAX_ORDER = 10


@dataclass(frozen=True)
class WaveletConfig:
    order: int = 2  # N in dbN
    levels: int = 2
    threshold: str = "universal"  # or "fixed"
    lam: float = 0.0  # used when threshold == "fixed"

    def __post_init__(self):
        if not 1 <= self.order <= MAX_ORDER:
            raise ValidationError(f"Daubechies order must be in 1..{MAX_ORDER}, got {self.order}")
        if self.levels < 1:
            raise ValidationError("need at least one decomposition level")
        if self.threshold not in ("universal", "fixed"):
            raise ValidationError(f"unknown threshold rule {self.threshold!r}")
        if self.lam < 0:
            raise ValidationError("threshold must be non-negative")


@lru_cache(maxsize=None)
def daubechies_lowpass(order: int) -> np.ndarray:
    """Minimum-phase dbN scaling filter of length 2N, normalised to sum sqrt(2)."""
    if not 1 <= order <= MAX_ORDER:
        raise ValidationError(f"Daubechies order must be in 1..{MAX_ORDER}, got {order}")
    n = order
    # z^(N-1) * sum_k C(N-1+k, k) y^k with y = -(z-1)^2 / (4z)
    poly = np.zeros(2 * n - 1)
    for k in range(n):
        term = np.polynomial.polynomial.polypow([-1.0, 1.0], 2 * k)  # (z-1)^2k, ascending
        term = term * math.comb(n - 1 + k, k) * (-1) ** k / 4**k
        shifted = np.zeros(2 * n - 1)
        shifted[n - 1 - k : n - 1 - k + len(term)] = term
        poly += shifted
    roots = np.polynomial.polynomial.polyroots(poly) if n > 1 else np.array([])
    inside = roots[np.abs(roots) < 1]
    h = np.polynomial.polynomial.polypow([1.0, 1.0], n)
    for r in inside:
        h = np.polynomial.polynomial.polymul(h, [-r, 1.0])
    h = np.real(h)[::-1]
    h = h * math.sqrt(2.0) / h.sum()
    _check_qmf(h)
    return h


def _check_qmf(h):
    for k in range(len(h) // 2):
        s = float(np.dot(h[: len(h) - 2 * k], h[2 * k :]))
        if abs(s - (1.0 if k == 0 else 0.0)) > 1e-10:
            raise ValidationError("wavelet filter is not orthonormal")


def highpass_from_lowpass(h: np.ndarray) -> np.ndarray:
    L = len(h)
    return np.array([(-1) ** j * h[L - 1 - j] for j in range(L)])


@lru_cache(maxsize=None)
def _single_level_matrix(n: int, order: int) -> np.ndarray:
    h = daubechies_lowpass(order)
    g = highpass_from_lowpass(h)
    half = n // 2
    W = np.zeros((n, n))
    for k in range(half):
        for j in range(len(h)):
            W[k, (2 * k + j) % n] += h[j]
            W[half + k, (2 * k + j) % n] += g[j]
    return W


@lru_cache(maxsize=None)
def analysis_matrix(n: int, order: int, levels: int) -> np.ndarray:
    """Orthogonal ``(n, n)`` map from a signal to ``[a_J, d_J, ..., d_1]``."""
    check_length(n, levels)
    total = np.eye(n)
    size = n
    for _ in range(levels):
        step = np.eye(n)
        step[:size, :size] = _single_level_matrix(size, order)
        total = step @ total
        size //= 2
    total.setflags(write=False)
    return total


def check_length(n: int, levels: int) -> None:
    if n < 2**levels or n % (2**levels):
        raise ValidationError(f"signal length {n} too short / not divisible for {levels} decomposition levels")


def dwt_forward(signal, cfg: WaveletConfig):
    """Returns ``(approx, [detail_level1 (finest), ..., detail_levelJ])``."""
    x = np.asarray(signal, dtype=float)
    n = x.shape[-1]
    coeffs = x @ analysis_matrix(n, cfg.order, cfg.levels).T
    size = n >> cfg.levels
    approx = coeffs[..., :size]
    details = []
    for _ in range(cfg.levels):
        details.append(coeffs[..., size : 2 * size])
        size *= 2
    return approx, details[::-1]


def dwt_inverse(approx, details, cfg: WaveletConfig):
    coeffs = np.concatenate([approx, *details[::-1]], axis=-1)
    n = coeffs.shape[-1]
    return coeffs @ analysis_matrix(n, cfg.order, cfg.levels)


def soft_threshold(coeffs, lam):
    negative = (lam < 0).any() if isinstance(lam, torch.Tensor) else np.any(np.asarray(lam) < 0)
    if negative:
        raise ValidationError("threshold must be non-negative")
    if isinstance(coeffs, torch.Tensor):
        return torch.sign(coeffs) * torch.relu(coeffs.abs() - lam)
    c = np.asarray(coeffs, dtype=float)
    return np.sign(c) * np.maximum(np.abs(c) - lam, 0.0)


def dwt_denoise(signal, cfg: WaveletConfig):
    """Analyse, soft-threshold the detail coefficients, synthesise.

    Accepts ``(..., n)`` numpy arrays or torch tensors. The universal
    threshold ``sigma * sqrt(2 ln n)`` uses ``sigma = median(|d_1|) / 0.6745``
    estimated per signal from the finest details.
    """
    is_torch = isinstance(signal, torch.Tensor)
    x = signal if is_torch else np.asarray(signal, dtype=float)
    n = x.shape[-1]
    W = analysis_matrix(n, cfg.order, cfg.levels)
    if is_torch:
        W = torch.tensor(W, dtype=x.dtype)
    coeffs = x @ W.T
    n_approx = n >> cfg.levels
    approx, details = coeffs[..., :n_approx], coeffs[..., n_approx:]
    if cfg.threshold == "fixed":
        lam = cfg.lam
    else:
        finest = details[..., -(n // 2) :]
        if is_torch:
            sigma = torch.quantile(finest.abs(), 0.5, dim=-1, keepdim=True) / 0.6745
        else:
            sigma = np.median(np.abs(finest), axis=-1, keepdims=True) / 0.6745
        lam = sigma * math.sqrt(2.0 * math.log(n))
    details = soft_threshold(details, lam)
    if is_torch:
        return torch.cat([approx, details], dim=-1) @ W
    return np.concatenate([approx, details], axis=-1) @ W
