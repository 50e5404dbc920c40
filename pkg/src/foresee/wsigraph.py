"""Spatial patch graphs: every patch is linked to its (up to) 8 grid neighbours."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import SCALES, PatientRecord
from .errors import ValidationError


@dataclass
class ScaleGraph:
    features: np.ndarray  # (o, d_x)
    coords: np.ndarray  # (o, 2)
    edges: frozenset  # {(m, n)} with m < n
    adjacency: np.ndarray  # (o, o) 0/1
    scale: str

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def mean_aggregator(self) -> np.ndarray:
        """Row-normalised adjacency; isolated nodes get an all-zero row."""
        deg = self.degrees().astype(float)
        return np.divide(self.adjacency, deg[:, None], out=np.zeros(self.adjacency.shape), where=deg[:, None] > 0)


def build_grid_graph(features, coords, scale: str) -> ScaleGraph:
    features = np.asarray(features, dtype=float)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if scale not in SCALES:
        raise ValidationError(f"unknown scale {scale!r}")
    o = len(coords)
    if o < 1:
        raise ValidationError("graph needs at least one node")
    if features.ndim != 2 or features.shape[0] != o:
        raise ValidationError(f"{features.shape[0] if features.ndim else 0} feature rows for {o} coordinates")
    if len({tuple(c) for c in coords.tolist()}) != o:
        raise ValidationError(f"duplicate grid coordinates in {scale} view")
    cheb = np.abs(coords[:, None, :] - coords[None, :, :]).max(axis=-1)
    adjacency = (cheb == 1).astype(np.int8)
    m, n = np.nonzero(np.triu(adjacency, k=1))
    edges = frozenset(zip(m.tolist(), n.tolist()))
    return ScaleGraph(features, coords, edges, adjacency, scale)


def build_multiscale(patient: PatientRecord) -> tuple[ScaleGraph, ScaleGraph, ScaleGraph]:
    """Small, medium and large field-of-view graphs for one patient."""
    return tuple(
        build_grid_graph(patient.pathology[s].features, patient.pathology[s].coords, s) for s in SCALES
    )


def full_grid_edge_count(rows: int, cols: int) -> int:
    return rows * (cols - 1) + cols * (rows - 1) + 2 * (rows - 1) * (cols - 1)
