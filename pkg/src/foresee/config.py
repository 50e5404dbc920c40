"""Run configuration with presets, JSON files and flag overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError
from .hae import VARIANTS
from .model import ModelConfig
from .survival import LossWeights
from .trimae import MIN_MASK_RATIO, MaskRatioError

ALL_VIEWS = ("s", "m", "l")

# Dataclass defaults are the full-size setup; "desk" shrinks it for CPU runs.
PRESETS = {
    "paper": {"dim": 500, "gnn_hidden": 500, "fusion_channels": 500, "heads": 4, "batch_size": 50, "epochs": 50},
    "desk": {"dim": 32, "gnn_hidden": 32, "fusion_channels": 32, "heads": 4, "batch_size": 50, "epochs": 12},
}


@dataclass(frozen=True)
class RunConfig:
    cohort: str | None = None
    n_patients: int = 200
    censoring: float = 0.3
    hazard_scale: float = 1e-3
    risk_scale: float = 2.5
    preset: str = "paper"
    dim: int = 500
    heads: int = 4
    depth: int = 1
    gnn_layers: int = 2
    gnn_hidden: int = 500
    fusion_channels: int = 500
    chunk: int = 16
    wavelet_order: int = 2
    wavelet_levels: int = 2
    beta: float = 0.25
    hae_variant: str = "full"
    trimae: bool = True
    mask_ratio: float = 0.85
    allow_low_mask: bool = False
    lr: float = 5e-3
    weight_decay: float = 1e-5
    batch_size: int = 50
    epochs: int = 50
    decoder_epochs: int = 20
    dropout: float = 0.2
    lambda_0: float = 5.0
    lambda_m: tuple = (1.0, 1.0, 1.0)
    views: tuple = ALL_VIEWS
    folds: int = 5
    seed: int = 0
    out: str = "runs/out"

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}")
        if self.n_patients < 2:
            raise ValidationError("n_patients must be at least 2")
        if not 0 <= self.censoring < 1:
            raise ValidationError("censoring must lie in [0, 1)")
        if self.hazard_scale <= 0 or self.risk_scale < 0:
            raise ValidationError("hazard_scale must be positive and risk_scale non-negative")
        if self.hae_variant not in VARIANTS:
            raise ValidationError(f"hae_variant must be one of {VARIANTS}")
        if not self.views or set(self.views) - set(ALL_VIEWS) or len(set(self.views)) != len(self.views):
            raise ValidationError(f"views must be a non-empty subset of {ALL_VIEWS}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValidationError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 2 or self.epochs < 1:
            raise ValidationError("batch_size must be >= 2 and epochs >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.mask_ratio < MIN_MASK_RATIO and not self.allow_low_mask:
            raise MaskRatioError(f"mask_ratio {self.mask_ratio} is below {MIN_MASK_RATIO}; set allow_low_mask to override")
        if self.decoder_epochs < 0:
            raise ValidationError("decoder_epochs must be non-negative")
        if self.folds < 2:
            raise ValidationError("need at least 2 folds")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")
        LossWeights(self.lambda_0, tuple(self.lambda_m))
        self.model_config(None)
        return self

    def model_config(self, schema) -> ModelConfig:
        kw = dict(
            dim=self.dim,
            heads=self.heads,
            depth=self.depth,
            gnn_layers=self.gnn_layers,
            gnn_hidden=self.gnn_hidden,
            fusion_channels=self.fusion_channels,
            chunk=self.chunk,
            wavelet_order=self.wavelet_order,
            wavelet_levels=self.wavelet_levels,
            beta=self.beta,
            hae_variant=self.hae_variant,
            trimae=self.trimae,
            mask_ratio=self.mask_ratio,
            allow_low_mask=self.allow_low_mask,
            dropout=self.dropout,
            views=tuple(self.views),
        )
        cfg = ModelConfig.for_schema(schema, **kw) if schema is not None else ModelConfig(**kw)
        # constructs the sub-configs, which validate themselves
        cfg.cft_config()
        cfg.hae_config(cfg.rna_dim)
        cfg.hae_config(cfg.cnv_mut_dim)
        return cfg

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_0, tuple(self.lambda_m))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_m"] = list(self.lambda_m)
        d["views"] = list(self.views)
        return d


_FIELDS = {f.name for f in fields(RunConfig)}


def _coerce(overrides: dict) -> dict:
    unknown = set(overrides) - _FIELDS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    out = dict(overrides)
    for key in ("views", "lambda_m"):
        if key in out and out[key] is not None:
            v = out[key]
            if isinstance(v, str):
                v = [s.strip() for s in v.split(",") if s.strip()]
            out[key] = tuple(float(x) for x in v) if key == "lambda_m" else tuple(v)
    return out


def resolve_config(file_path=None, overrides: dict | None = None, env=None, default_preset="paper") -> RunConfig:
    """Preset < JSON config file < explicit overrides. Seed falls back to ``FORESEE_SEED``."""
    env = os.environ if env is None else env
    file_values = {}
    if file_path is not None:
        try:
            file_values = json.loads(Path(file_path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {file_path} not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {file_path} is not valid JSON: {exc}") from exc
    file_values = _coerce(file_values)
    overrides = _coerce({k: v for k, v in (overrides or {}).items() if v is not None})
    preset = overrides.get("preset", file_values.get("preset", default_preset))
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}")
    values = {**PRESETS[preset], **file_values, **overrides, "preset": preset}
    if "seed" not in values and env.get("FORESEE_SEED"):
        try:
            values["seed"] = int(env["FORESEE_SEED"])
        except ValueError:
            raise ValidationError(f"FORESEE_SEED must be an integer, got {env['FORESEE_SEED']!r}") from None
    return replace(RunConfig(), **values).validate()
