"""Multimodal survival prediction from multi-scale pathology graphs and molecular profiles.

Submodules: ``numerics`` (layers, seeding, optimiser), ``dataio`` (cohorts),
``wsigraph`` (patch graphs), ``cft`` (pathology encoder), ``wavelet`` and
``hae`` (molecular encoder), ``trimae`` (masked reconstruction),
``survival`` (risk heads and Cox loss), ``metrics`` (evaluation),
``training`` and ``cli`` (pipeline front end).
"""

from .config import RunConfig, resolve_config
from .dataio import Cohort, PatientRecord, Schema, generate_cohort, read_cohort, write_cohort
from .errors import ShapeError, TrainingDivergenceError, UndefinedMetricError, ValidationError
from .metrics import c_index, km_curve, log_rank_p, median_risk_split
from .model import ForeseeModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "ForeseeModel",
    "ModelConfig",
    "PatientRecord",
    "RunConfig",
    "Schema",
    "ShapeError",
    "TrainingDivergenceError",
    "UndefinedMetricError",
    "ValidationError",
    "c_index",
    "generate_cohort",
    "km_curve",
    "log_rank_p",
    "median_risk_split",
    "read_cohort",
    "resolve_config",
    "write_cohort",
]
