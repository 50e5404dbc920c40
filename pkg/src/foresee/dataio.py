"""Cohorts: synthetic generation, on-disk format, validation and fold splits."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import ValidationError
from .numerics import RngStream

SCALES = ("s", "m", "l")
SCALE_NAMES = {"s": "small", "m": "medium", "l": "large"}
FORMAT_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


@dataclass(frozen=True)
class Schema:
    d_x: int = 64
    rna_dim: int = 256
    cnv_mut_dim: int = 128
    grid_shapes: tuple = ((8, 8), (6, 6), (4, 4))  # small, medium, large

    def grid_shape(self, scale: str) -> tuple[int, int]:
        return tuple(self.grid_shapes[SCALES.index(scale)])

    def to_dict(self):
        return {
            "d_x": self.d_x,
            "rna_dim": self.rna_dim,
            "cnv_mut_dim": self.cnv_mut_dim,
            "grid_shapes": {s: list(self.grid_shape(s)) for s in SCALES},
        }

    @classmethod
    def from_dict(cls, d):
        try:
            shapes = tuple(tuple(int(v) for v in d["grid_shapes"][s]) for s in SCALES)
            return cls(int(d["d_x"]), int(d["rna_dim"]), int(d["cnv_mut_dim"]), shapes)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed schema in manifest: {exc}") from exc


@dataclass
class PatchGrid:
    """Patch features of one field of view with integer (row, col) grid positions."""

    coords: np.ndarray  # (o, 2) int64
    features: np.ndarray  # (o, d_x) float64

    def __eq__(self, other):
        return (
            isinstance(other, PatchGrid)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )


@dataclass
class PatientRecord:
    id: str
    pathology: dict  # scale -> PatchGrid
    rna: np.ndarray
    cnv_mut: np.ndarray
    time: float
    event: int

    @property
    def pathology_small(self):
        return self.pathology["s"]

    @property
    def pathology_medium(self):
        return self.pathology["m"]

    @property
    def pathology_large(self):
        return self.pathology["l"]

    def __eq__(self, other):
        return (
            isinstance(other, PatientRecord)
            and self.id == other.id
            and all(self.pathology[s] == other.pathology[s] for s in SCALES)
            and np.array_equal(self.rna, other.rna)
            and np.array_equal(self.cnv_mut, other.cnv_mut)
            and self.time == other.time
            and self.event == other.event
        )


@dataclass
class Cohort:
    patients: list
    schema: Schema
    latent_risk: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.patients)

    @property
    def ids(self):
        return [p.id for p in self.patients]

    @property
    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.patients], dtype=float)

    @property
    def events(self) -> np.ndarray:
        return np.array([p.event for p in self.patients], dtype=int)

    def subset(self, index) -> "Cohort":
        index = list(index)
        latent = None if self.latent_risk is None else self.latent_risk[index]
        return Cohort([self.patients[i] for i in index], self.schema, latent, dict(self.meta))

    def validate(self) -> None:
        if not self.patients:
            raise ValidationError("cohort has no patients")
        seen = set()
        for p in self.patients:
            if p.id in seen:
                raise ValidationError(f"duplicate patient id {p.id!r}")
            seen.add(p.id)
            validate_patient(p, self.schema)
        if self.latent_risk is not None and len(self.latent_risk) != len(self.patients):
            raise ValidationError("latent_risk length does not match patient count")


def validate_patient(p: PatientRecord, schema: Schema) -> None:
    def bad(field_name, why):
        raise ValidationError(f"patient {p.id!r}, field {field_name}: {why}")

    if not _ID_RE.match(p.id):
        bad("id", "ids may only contain letters, digits, '_', '.', '-'")
    if not (isinstance(p.time, float | int) and math.isfinite(p.time) and p.time > 0):
        bad("time", f"survival time must be a positive finite number, got {p.time!r}")
    if p.event not in (0, 1):
        bad("event", f"event indicator must be 0 or 1, got {p.event!r}")
    for scale in SCALES:
        grid = p.pathology.get(scale)
        name = f"pathology_{SCALE_NAMES[scale]}"
        if grid is None or len(grid.coords) == 0:
            bad(name, "grid is empty")
        if grid.features.shape != (len(grid.coords), schema.d_x):
            bad(name, f"feature matrix shape {grid.features.shape} != ({len(grid.coords)}, {schema.d_x})")
        if not np.isfinite(grid.features).all():
            bad(name, "non-finite feature value")
        rows, cols = schema.grid_shape(scale)
        c = grid.coords
        if c.min() < 0 or (c[:, 0] >= rows).any() or (c[:, 1] >= cols).any():
            bad(name, f"grid coordinate outside the {rows}x{cols} grid")
        if len({(int(r), int(q)) for r, q in c}) != len(c):
            bad(name, "duplicate grid coordinate")
    for name, vec, dim in (("rna", p.rna, schema.rna_dim), ("cnv_mut", p.cnv_mut, schema.cnv_mut_dim)):
        if vec.shape != (dim,):
            bad(name, f"length {vec.shape} != {dim}")
        if not np.isfinite(vec).all():
            bad(name, "non-finite value")


# ----------------------------------------------------------------------------
# synthetic cohort
# ----------------------------------------------------------------------------


def _censor_fraction(t_max, hazard_scale, risk_scale):
    # E_z[(1 - exp(-lam T)) / (lam T)], lam = h exp(risk_scale z), z ~ N(0, 1)
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    lam_t = hazard_scale * np.exp(risk_scale * nodes) * t_max
    frac = -np.expm1(-lam_t) / lam_t
    return float(weights @ frac / weights.sum())


def censoring_horizon(censoring_rate, hazard_scale, risk_scale):
    """Upper bound of the uniform censoring window giving the requested censoring rate."""
    if censoring_rate == 0:
        return math.inf
    f = lambda log_t: _censor_fraction(math.exp(log_t), hazard_scale, risk_scale) - censoring_rate
    lo, hi = -math.log(hazard_scale) - 40, -math.log(hazard_scale) + 40
    return math.exp(brentq(f, lo, hi, xtol=1e-12))


def generate_cohort(
    n: int,
    schema: Schema | None = None,
    hazard_scale: float = 1e-3,
    censoring_rate: float = 0.3,
    rng: RngStream | None = None,
    risk_scale: float = 2.5,
    path_signal: float = 0.5,
    rna_signal: float = 0.6,
) -> Cohort:
    """Draw a cohort whose survival is driven by a known latent factor.

    Each patient gets ``z ~ N(0, 1)`` and log relative hazard
    ``risk_scale * z`` (stored as ``latent_risk``). Pathology grids carry
    ``z`` inside a contiguous sub-block, RNA loads on ``z`` through gene
    blocks, CNV/MUT spikes fire more often for larger ``z``. Times are
    exponential with rate ``hazard_scale * exp(risk_scale * z)`` and
    independent uniform censoring is calibrated to ``censoring_rate``.
    """
    schema = schema or Schema()
    rng = rng or RngStream(0, "datagen")
    if n < 2:
        raise ValidationError("cohort needs at least two patients")
    if not 0.0 <= censoring_rate < 1.0:
        raise ValidationError(f"censoring_rate must lie in [0, 1), got {censoring_rate}")
    if min(schema.d_x, schema.rna_dim, schema.cnv_mut_dim) < 4:
        raise ValidationError("feature dimensions must be at least 4")
    if hazard_scale <= 0:
        raise ValidationError("hazard_scale must be positive")
    g = rng.generator

    # cohort-level structure
    base = {s: 0.5 * g.standard_normal((*schema.grid_shape(s), schema.d_x)) for s in SCALES}
    direction = {s: path_signal * g.standard_normal(schema.d_x) for s in SCALES}
    block = 16
    n_blocks = -(-schema.rna_dim // block)
    rna_loading = np.repeat(rna_signal * g.standard_normal(n_blocks), block)[: schema.rna_dim]
    rna_offset = g.standard_normal(schema.rna_dim)
    cm_offset = -2.5 + 0.5 * g.standard_normal(schema.cnv_mut_dim)

    z = g.standard_normal(n)
    latent = risk_scale * z
    t_max = censoring_horizon(censoring_rate, hazard_scale, risk_scale)
    patients = []
    for i in range(n):
        pathology = {}
        for s in SCALES:
            rows, cols = schema.grid_shape(s)
            feats = base[s] + g.standard_normal((rows, cols, schema.d_x))
            br, bc = max(1, rows // 2), max(1, cols // 2)
            r0, c0 = g.integers(0, rows - br + 1), g.integers(0, cols - bc + 1)
            feats[r0 : r0 + br, c0 : c0 + bc] += z[i] * direction[s]
            rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
            coords = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64)
            pathology[s] = PatchGrid(coords, feats.reshape(rows * cols, schema.d_x))
        rna = rna_offset + rna_loading * z[i] + g.standard_normal(schema.rna_dim)
        rate = 1.0 / (1.0 + np.exp(-(cm_offset + 0.8 * z[i])))
        spikes = g.random(schema.cnv_mut_dim) < rate
        cnv_mut = spikes * (1.0 + 0.1 * g.standard_normal(schema.cnv_mut_dim))
        death = g.exponential(1.0 / (hazard_scale * math.exp(latent[i])))
        death = max(death, np.finfo(float).tiny)
        censor = g.uniform(0.0, t_max) if math.isfinite(t_max) else math.inf
        event = int(death <= censor)
        time = float(death if event else max(censor, np.finfo(float).tiny))
        patients.append(PatientRecord(f"p{i:04d}", pathology, rna, cnv_mut, time, event))
    meta = {"hazard_scale": hazard_scale, "censoring_rate": censoring_rate, "risk_scale": risk_scale}
    return Cohort(patients, schema, latent, meta)


# ----------------------------------------------------------------------------
# on-disk format
# ----------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def _patient_files(pid):
    return {
        "s": f"P_{pid}_s.csv",
        "m": f"P_{pid}_m.csv",
        "l": f"P_{pid}_l.csv",
        "rna": f"R_{pid}.csv",
        "cnv_mut": f"CM_{pid}.csv",
    }


def write_cohort(cohort: Cohort, directory) -> Path:
    """Write ``cohort`` under ``directory``; returns the manifest path."""
    cohort.validate()
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    d_x = cohort.schema.d_x
    entries = []
    for k, p in enumerate(cohort.patients):
        files = _patient_files(p.id)
        for s in SCALES:
            grid = p.pathology[s]
            lines = ["row,col," + ",".join(f"f{j}" for j in range(d_x))]
            for (r, c), row in zip(grid.coords, grid.features):
                lines.append(f"{int(r)},{int(c)}," + ",".join(map(_fmt, row)))
            (out / files[s]).write_text("\n".join(lines) + "\n")
        (out / files["rna"]).write_text(",".join(map(_fmt, p.rna)) + "\n")
        (out / files["cnv_mut"]).write_text(",".join(map(_fmt, p.cnv_mut)) + "\n")
        entry = {"id": p.id, "files": files}
        if cohort.latent_risk is not None:
            entry["latent_risk"] = float(cohort.latent_risk[k])
        entries.append(entry)
    surv = ["id,time,event"] + [f"{p.id},{_fmt(p.time)},{p.event}" for p in cohort.patients]
    (out / "survival.csv").write_text("\n".join(surv) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "schema": cohort.schema.to_dict(),
        "survival_file": "survival.csv",
        "meta": cohort.meta,
        "patients": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _read_reals(path: Path, pid: str, field_name: str) -> np.ndarray:
    if not path.exists():
        raise ValidationError(f"patient {pid!r}, field {field_name}: missing file {path.name}")
    text = path.read_text().strip()
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"patient {pid!r}, field {field_name}: unparsable value ({exc})") from exc


def _read_grid(path: Path, pid: str, field_name: str, d_x: int) -> PatchGrid:
    if not path.exists():
        raise ValidationError(f"patient {pid!r}, field {field_name}: missing file {path.name}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[:2] != ["row", "col"] or len(header) != d_x + 2:
        raise ValidationError(f"patient {pid!r}, field {field_name}: header does not match d_x={d_x}")
    try:
        coords = np.array([[int(r[0]), int(r[1])] for r in body], dtype=np.int64).reshape(-1, 2)
        feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=float).reshape(len(body), -1)
    except ValueError as exc:
        raise ValidationError(f"patient {pid!r}, field {field_name}: unparsable value ({exc})") from exc
    return PatchGrid(coords, feats)


def read_cohort(directory) -> Cohort:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported cohort format version {manifest.get('format_version')!r}")
    schema = Schema.from_dict(manifest.get("schema", {}))
    entries = manifest.get("patients") or []
    if not entries:
        raise ValidationError("manifest lists no patients")

    spath = root / manifest.get("survival_file", "survival.csv")
    if not spath.exists():
        raise ValidationError(f"missing survival file {spath.name}")
    survival = {}
    with spath.open(newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["id"]
            try:
                t = float(row["time"])
            except (TypeError, ValueError):
                raise ValidationError(f"patient {pid!r}, field time: unparsable value {row['time']!r}") from None
            ev = row["event"].strip()
            if ev not in ("0", "1"):
                raise ValidationError(f"patient {pid!r}, field event: must be 0 or 1, got {ev!r}")
            survival[pid] = (t, int(ev))

    patients, latent = [], []
    for entry in entries:
        pid = entry["id"]
        if pid not in survival:
            raise ValidationError(f"patient {pid!r}, field survival: no row in {spath.name}")
        files = entry["files"]
        pathology = {
            s: _read_grid(root / files[s], pid, f"pathology_{SCALE_NAMES[s]}", schema.d_x) for s in SCALES
        }
        rna = _read_reals(root / files["rna"], pid, "rna")
        cm = _read_reals(root / files["cnv_mut"], pid, "cnv_mut")
        t, ev = survival[pid]
        patients.append(PatientRecord(pid, pathology, rna, cm, t, ev))
        latent.append(entry.get("latent_risk"))
    latent_arr = None
    if all(v is not None for v in latent):
        latent_arr = np.array(latent, dtype=float)
    cohort = Cohort(patients, schema, latent_arr, manifest.get("meta", {}))
    cohort.validate()
    return cohort


def kfold_split(n: int, k: int, rng: RngStream) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got k={k}")
    if k > n:
        raise ValidationError(f"cannot split {n} patients into {k} folds")
    perm = rng.generator.permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]
