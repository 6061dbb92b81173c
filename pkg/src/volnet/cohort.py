"""Patient manifests, cohort statistics and the synthetic cohort generator."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadLabel, DuplicateId, EmptySplit, ParseError
from .tensor import RngStream
from .volume import CtVolume, load_volume, resample_isotropic, save_volume, window_rescale

MANIFEST_COLUMNS = [
    "patient_id", "cohort", "split", "volume_path",
    "gtv_x_mm", "gtv_y_mm", "gtv_z_mm", "hpv_label",
    "age", "sex", "t_stage", "n_stage", "tumor_cm3",
]
SPLITS = ("train", "val", "test")
CONTINUOUS_COVARIATES = ("age", "tumor_cm3")
CATEGORICAL_COVARIATES = ("sex", "t_stage", "n_stage")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    cohort: str
    split: str
    volume_path: str
    gtv_center_mm: tuple[float, float, float]
    hpv_label: int
    age: Optional[float] = None
    sex: Optional[str] = None
    t_stage: Optional[str] = None
    n_stage: Optional[str] = None
    tumor_cm3: Optional[float] = None


@dataclass
class CohortManifest:
    records: list[PatientRecord]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.patient_id in seen:
                raise DuplicateId(f"duplicate patient_id {r.patient_id!r}")
            seen.add(r.patient_id)

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[PatientRecord]:
        return [r for r in self.records if r.split == name]

    def volume_file(self, record: PatientRecord) -> Path:
        return self.base_dir / record.volume_path


def _optional_float(text, row, column):
    if text is None or text.strip() == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row, column) from None


def _optional_str(text):
    return text.strip() or None if text is not None else None


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ParseError(f"unexpected header {header}", row=1)
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) > len(MANIFEST_COLUMNS):
                raise ParseError(f"{len(row)} fields, expected {len(MANIFEST_COLUMNS)}", rowno)
            row = row + [""] * (len(MANIFEST_COLUMNS) - len(row))
            f = dict(zip(MANIFEST_COLUMNS, row))
            for col in ("patient_id", "cohort", "split", "volume_path"):
                if not f[col].strip():
                    raise ParseError("required field is empty", rowno, col)
            if f["split"] not in SPLITS:
                raise ParseError(f"split must be one of {SPLITS}, got {f['split']!r}", rowno, "split")
            if f["hpv_label"].strip() not in ("0", "1"):
                raise BadLabel(f"hpv_label must be 0 or 1, got {f['hpv_label']!r}", rowno, "hpv_label")
            center = []
            for col in ("gtv_x_mm", "gtv_y_mm", "gtv_z_mm"):
                value = _optional_float(f[col], rowno, col)
                if value is None:
                    raise ParseError("required field is empty", rowno, col)
                center.append(value)
            records.append(PatientRecord(
                patient_id=f["patient_id"].strip(),
                cohort=f["cohort"].strip(),
                split=f["split"],
                volume_path=f["volume_path"].strip(),
                gtv_center_mm=tuple(center),
                hpv_label=int(f["hpv_label"]),
                age=_optional_float(f["age"], rowno, "age"),
                sex=_optional_str(f["sex"]),
                t_stage=_optional_str(f["t_stage"]),
                n_stage=_optional_str(f["n_stage"]),
                tumor_cm3=_optional_float(f["tumor_cm3"], rowno, "tumor_cm3"),
            ))
    return CohortManifest(records, path.parent)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_manifest(m: CohortManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in m.records:
            x, y, z = r.gtv_center_mm
            writer.writerow([
                r.patient_id, r.cohort, r.split, r.volume_path,
                _fmt(x), _fmt(y), _fmt(z), r.hpv_label,
                _fmt(r.age), _fmt(r.sex), _fmt(r.t_stage), _fmt(r.n_stage), _fmt(r.tumor_cm3),
            ])


def class_counts(m: CohortManifest, split: str) -> tuple[int, int]:
    """(n_pos, n_neg) in one split."""
    labels = [r.hpv_label for r in m.split(split)]
    if not labels:
        raise EmptySplit(f"split {split!r} has no patients")
    n_pos = sum(labels)
    return n_pos, len(labels) - n_pos


def quantile(values, q: float) -> float:
    """Linear interpolation between order statistics (the "type 7" rule)."""
    xs = sorted(values)
    if not xs:
        raise ValueError("quantile of empty sequence")
    h = (len(xs) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


@dataclass
class CovariateStats:
    n: int
    mean: float
    q25: float
    q75: float

    def __str__(self):
        return f"{self.mean:.2f} ({self.q25:.2f}-{self.q75:.2f})"


def covariate_stats(values) -> Optional[CovariateStats]:
    values = [v for v in values if v is not None]
    if not values:
        return None
    return CovariateStats(len(values), sum(values) / len(values), quantile(values, 0.25), quantile(values, 0.75))


@dataclass
class CohortSummary:
    # keyed by (cohort, hpv_label)
    counts: dict
    continuous: dict
    categorical: dict

    def total(self) -> int:
        return sum(self.counts.values())

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.counts):
            cohort, label = key
            lines.append(f"{cohort} HPV {'pos' if label else 'neg'}: n={self.counts[key]}")
            for name in CONTINUOUS_COVARIATES:
                stats = self.continuous[key].get(name)
                lines.append(f"  {name}: {stats if stats else 'n/a'}")
            for name in CATEGORICAL_COVARIATES:
                tally = self.categorical[key].get(name, {})
                if tally:
                    lines.append(f"  {name}: " + "/".join(f"{k}:{v}" for k, v in sorted(tally.items())))
        return "\n".join(lines)


def cohort_summary(m: CohortManifest) -> CohortSummary:
    groups: dict = {}
    for r in m.records:
        groups.setdefault((r.cohort, r.hpv_label), []).append(r)
    counts, continuous, categorical = {}, {}, {}
    for key, rs in groups.items():
        counts[key] = len(rs)
        continuous[key] = {name: covariate_stats(getattr(r, name) for r in rs) for name in CONTINUOUS_COVARIATES}
        categorical[key] = {
            name: dict(Counter(getattr(r, name) for r in rs if getattr(r, name) is not None))
            for name in CATEGORICAL_COVARIATES
        }
    return CohortSummary(counts, continuous, categorical)


# Synthetic cohort ---------------------------------------------------------

BACKGROUND_SD_HU = 30.0
CLASS_MEAN_HU = {0: -50.0, 1: 50.0}
RADIUS_RANGE_VOX = (8, 16)
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class SynthSpec:
    n_pos: int
    n_neg: int
    dims: tuple[int, int, int] = (96, 96, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)


def stratified_split_sizes(n: int) -> tuple[int, int, int]:
    n_train = math.floor(n * SPLIT_FRACTIONS[0] + 0.5)
    n_val = math.floor(n * SPLIT_FRACTIONS[1] + 0.5)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def synth_volume(label: int, dims, spacing, stream: RngStream):
    """One synthetic HU volume: normal(0, 30) background with a class-shifted ellipsoid.

    Returns ``(volume, center_voxel, radii_voxels)``.  Ellipsoid voxels carry the
    class mean (-50 HU negative, +50 HU positive) plus the same background noise.
    """
    dims = tuple(int(n) for n in dims)
    radii = stream.int_range(*RADIUS_RANGE_VOX, size=3)
    # Keep the center at least half a radius from each face so most of the ellipsoid lies inside.
    center = []
    for n, r in zip(dims, radii):
        margin = min(int(r) // 2, (n - 1) // 2)
        center.append(int(stream.int_range(margin, n - 1 - margin)))
    noise = stream.normal01(dims) * BACKGROUND_SD_HU
    grid = np.ogrid[tuple(slice(0, n) for n in dims)]
    inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0
    hu = noise + np.where(inside, CLASS_MEAN_HU[label], 0.0)
    voxels = np.clip(np.floor(hu + 0.5), -32768, 32767).astype(np.int16)
    return CtVolume(voxels, tuple(spacing), (0.0, 0.0, 0.0)), tuple(center), tuple(int(r) for r in radii)


def synth_generate(spec: SynthSpec, seed: int, out_dir) -> CohortManifest:
    """Write a synthetic cohort (RV1 volumes + manifest.csv) into ``out_dir``."""
    if spec.n_pos < 1 or spec.n_neg < 1:
        raise ValueError("synthetic cohort needs n_pos >= 1 and n_neg >= 1")
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    labels = [1] * spec.n_pos + [0] * spec.n_neg
    split_of = {}
    split_stream = RngStream(seed, "synth", (0,))
    for label in (1, 0):
        members = [i for i, y in enumerate(labels) if y == label]
        order = [members[j] for j in split_stream.permutation(len(members))]
        n_train, n_val, _ = stratified_split_sizes(len(members))
        for rank, idx in enumerate(order):
            split_of[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    records = []
    for idx, label in enumerate(labels):
        pid = f"syn{idx:04d}"
        volume, center, _ = synth_volume(label, spec.dims, spec.spacing, RngStream(seed, "synth", (1, idx)))
        rel = f"volumes/{pid}.json"
        save_volume(volume, out_dir / rel)
        records.append(PatientRecord(
            patient_id=pid, cohort="synthetic", split=split_of[idx], volume_path=rel,
            gtv_center_mm=volume.point_mm(center), hpv_label=label,
        ))
    manifest = CohortManifest(records, out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def preprocess_cohort(m: CohortManifest, out_dir, target_mm: float = 1.0) -> CohortManifest:
    """Resample every volume to isotropic ``target_mm`` and window it to u8.

    Writes ``out_dir/volumes/<patient_id>.json`` plus ``out_dir/manifest.csv``
    pointing at them; GTV centers are physical and therefore unchanged.
    """
    out_dir = Path(out_dir)
    records = []
    for r in m.records:
        volume = window_rescale(resample_isotropic(load_volume(m.volume_file(r)), target_mm))
        rel = f"volumes/{r.patient_id}.json"
        save_volume(volume, out_dir / rel)
        records.append(replace(r, volume_path=rel))
    derived = CohortManifest(records, out_dir)
    save_manifest(derived, out_dir / "manifest.csv")
    return derived
