"""Measured-HRIR dataset handling.

Ingests an exchange-layout bundle (per-subject `hrir.bin` files plus an
`anthropometry.csv` table) into a validated on-disk store, computes
anthropometric normalization statistics, assigns direction labels, and
builds leave-one-out cross-validation folds.

`hrir.bin` format (all little-endian):

    magic   4 bytes  b"HRIR"
    version u8       1
    T       u32      samples per channel
    L       u32      number of directions in the file
    rate    u32      sample rate in Hz
    then L records of:
        azimuth    f32  radians in [0, 2pi)
        elevation  f32  radians in [-pi/2, pi/2]
        left       T x f32
        right      T x f32

Loaded records are immutable; reads are safe to run concurrently. Import
is single-writer.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .errors import (
    ConfigurationError,
    DegenerateFeatureError,
    FormatError,
    InsufficientDataError,
    SchemaError,
    ShapeError,
)
from .metrics import HrirPair

# Feature count of the anthropometric convention used throughout: 17 head
# and torso measurements plus the 10 pinna measurements of one ear.
N_FEATURES = 27

_MAGIC = b"HRIR"
_VERSION = 1
_HEADER = struct.Struct("<4sBIII")
_DOA = struct.Struct("<ff")

STORE_MANIFEST = "store.json"
ANTHRO_TABLE = "anthropometry.csv"


@dataclass(frozen=True)
class Doa:
    """A direction of arrival with its integer grid label."""

    azimuth: float
    elevation: float
    label: int

    def __post_init__(self):
        if not (0.0 <= self.azimuth < 2 * math.pi):
            raise ShapeError(f"azimuth {self.azimuth} outside [0, 2pi)")
        if not (-math.pi / 2 <= self.elevation <= math.pi / 2):
            raise ShapeError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        if self.label < 0:
            raise ShapeError("label must be non-negative")


@dataclass(frozen=True)
class AnthroVector:
    """Raw anthropometric features, optionally with their normalized form."""

    values: np.ndarray
    normalized: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != (N_FEATURES,):
            raise SchemaError(
                f"expected {N_FEATURES} anthropometric features, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise SchemaError("anthropometric features must be finite")
        if self.normalized is not None:
            norm = np.asarray(self.normalized, dtype=np.float64)
            object.__setattr__(self, "normalized", norm)
            if norm.shape != (N_FEATURES,):
                raise SchemaError("normalized vector has wrong length")
            if np.any(norm <= 0) or np.any(norm >= 1):
                raise SchemaError("normalized features must lie strictly in (0, 1)")


@dataclass(frozen=True)
class AnthroStats:
    """Per-feature mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise SchemaError("mean and std must be 1-D and aligned")
        if np.any(std <= 0):
            raise SchemaError("std entries must be strictly positive")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: HRIRs over the direction grid plus anthropometry."""

    subject_id: int
    hrirs: tuple
    anthro: AnthroVector
    sample_rate: float

    def __post_init__(self):
        if not self.hrirs:
            raise FormatError(f"subject {self.subject_id} has no HRIRs")
        labels = [doa.label for doa, _ in self.hrirs]
        if sorted(labels) != list(range(len(labels))):
            raise FormatError(
                f"subject {self.subject_id}: labels must be a permutation of 0..L-1"
            )
        lengths = {pair.length for _, pair in self.hrirs}
        rates = {pair.sample_rate for _, pair in self.hrirs}
        if len(lengths) != 1:
            raise FormatError(f"subject {self.subject_id}: mixed HRIR lengths {lengths}")
        if rates != {self.sample_rate}:
            raise FormatError(f"subject {self.subject_id}: mixed sample rates {rates}")

    @property
    def grid_size(self) -> int:
        return len(self.hrirs)

    @property
    def hrir_length(self) -> int:
        return self.hrirs[0][1].length

    def pair_for_label(self, label: int) -> HrirPair:
        for doa, pair in self.hrirs:
            if doa.label == label:
                return pair
        raise KeyError(label)


@dataclass(frozen=True)
class DatasetFold:
    """One LOOCV fold: a single held-out test subject plus train/val split."""

    test_subject: int
    train_subjects: tuple
    val_subjects: tuple

    def __post_init__(self):
        object.__setattr__(self, "train_subjects", tuple(self.train_subjects))
        object.__setattr__(self, "val_subjects", tuple(self.val_subjects))
        groups = [{self.test_subject}, set(self.train_subjects), set(self.val_subjects)]
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise ConfigurationError("fold sets must be pairwise disjoint")


# ---------------------------------------------------------------------------
# hrir.bin read/write


def write_hrir_file(path, entries, sample_rate: float) -> None:
    """Write direction/impulse-response entries in the hrir.bin format.

    entries: sequence of (azimuth_rad, elevation_rad, left, right) with
    float32-representable samples. Raises FormatError on inconsistent
    channel lengths.
    """
    path = Path(path)
    entries = list(entries)
    if not entries:
        raise FormatError("refusing to write an hrir.bin with no records")
    t = len(entries[0][2])
    chunks = [_HEADER.pack(_MAGIC, _VERSION, t, len(entries), int(round(sample_rate)))]
    for az, el, left, right in entries:
        left = np.asarray(left, dtype="<f4")
        right = np.asarray(right, dtype="<f4")
        if left.shape != (t,) or right.shape != (t,):
            raise FormatError(f"inconsistent channel length in {path}")
        chunks.append(_DOA.pack(az, el))
        chunks.append(left.tobytes())
        chunks.append(right.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def read_hrir_file(path):
    """Read an hrir.bin file -> (sample_rate, [(az, el, left, right), ...])."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, l, rate = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    record_size = _DOA.size + 2 * 4 * t
    expected = _HEADER.size + l * record_size
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    entries = []
    offset = _HEADER.size
    for _ in range(l):
        az, el = _DOA.unpack_from(raw, offset)
        offset += _DOA.size
        left = np.frombuffer(raw, dtype="<f4", count=t, offset=offset).copy()
        offset += 4 * t
        right = np.frombuffer(raw, dtype="<f4", count=t, offset=offset).copy()
        offset += 4 * t
        entries.append((az, el, left, right))
    return float(rate), entries


# ---------------------------------------------------------------------------
# bundle import

@dataclass
class ImportResult:
    count: int
    subject_ids: list
    skipped: list = field(default_factory=list)  # (subject_id, reason)


def _read_anthro_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty anthropometric table")
    header = rows[0]
    if len(header) < 2 or header[0] != "subject_id":
        raise SchemaError(f"{path}: first column must be subject_id")
    feature_names = header[1:]
    if len(feature_names) != N_FEATURES:
        raise SchemaError(
            f"{path}: expected {N_FEATURES} feature columns, found {len(feature_names)}"
        )
    table = {}
    for idx, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {idx} has {len(row)} fields, header has {len(header)}")
        try:
            sid = int(row[0])
        except ValueError as exc:
            raise SchemaError(f"{path}: line {idx}: bad subject id {row[0]!r}") from exc
        values = []
        complete = True
        for cell in row[1:]:
            cell = cell.strip()
            if cell == "":
                complete = False
                values.append(math.nan)
                continue
            try:
                v = float(cell)
            except ValueError as exc:
                raise SchemaError(f"{path}: line {idx}: non-numeric value {cell!r}") from exc
            if math.isnan(v):
                complete = False
            values.append(v)
        table[sid] = (np.array(values), complete)
    return feature_names, table


def _read_subject_bins(subject_dir: Path):
    """Merge every *.bin under one subject dir, enforcing consistency."""
    files = sorted(subject_dir.glob("*.bin"))
    if not files:
        raise FormatError(f"{subject_dir}: no hrir.bin files")
    rate = None
    length = None
    merged = []
    seen = set()
    for f in files:
        file_rate, entries = read_hrir_file(f)
        for az, el, left, right in entries:
            if rate is None:
                rate, length = file_rate, left.shape[0]
            if file_rate != rate:
                raise FormatError(f"{subject_dir}: sample rate differs across files")
            if left.shape[0] != length:
                raise FormatError(f"{subject_dir}: HRIR length differs across files")
            key = (az, el)
            if key in seen:
                raise FormatError(f"{subject_dir}: duplicate direction {key}")
            seen.add(key)
            merged.append((az, el, left, right))
    return rate, merged


def _canonical_order(entries):
    """Sort direction entries by (elevation, azimuth); label = sorted index."""
    return sorted(entries, key=lambda e: (e[1], e[0]))


def import_bundle(source_dir, out_dir) -> ImportResult:
    """Validate an exchange bundle and write the canonical subject store.

    Subjects with incomplete anthropometry (or HRIRs without a table row,
    and vice versa) are skipped and reported. Returns an ImportResult whose
    count is the number of subject records written. An empty source yields
    count 0 and no output files.
    """
    source_dir = Path(source_dir)
    out_dir = Path(out_dir)
    if not source_dir.is_dir():
        raise FileNotFoundError(f"source directory not found: {source_dir}")

    anthro_path = source_dir / ANTHRO_TABLE
    feature_names: list = []
    table: dict = {}
    if anthro_path.exists():
        feature_names, table = _read_anthro_table(anthro_path)

    subjects_root = source_dir / "subjects"
    hrir_ids = {}
    if subjects_root.is_dir():
        for child in sorted(subjects_root.iterdir()):
            if not child.is_dir():
                continue
            try:
                sid = int(child.name)
            except ValueError:
                continue
            hrir_ids[sid] = child

    skipped = []
    for sid in sorted(set(table) - set(hrir_ids)):
        skipped.append((sid, "no HRIR files"))
    for sid in sorted(set(hrir_ids) - set(table)):
        skipped.append((sid, "no anthropometric row"))

    imported = []
    grid = None
    for sid in sorted(set(hrir_ids) & set(table)):
        values, complete = table[sid]
        if not complete:
            skipped.append((sid, "missing anthropometric feature"))
            continue
        rate, entries = _read_subject_bins(hrir_ids[sid])
        entries = _canonical_order(entries)
        doas = [(az, el) for az, el, _, _ in entries]
        if grid is None:
            grid = doas
        elif doas != grid:
            raise FormatError(
                f"subject {sid}: direction grid differs from the canonical grid"
            )
        imported.append((sid, rate, entries, values))

    if imported:
        rates = {rate for _, rate, _, _ in imported}
        lengths = {entries[0][2].shape[0] for _, _, entries, _ in imported}
        if len(rates) != 1:
            raise FormatError(f"mixed sample rates across subjects: {sorted(rates)}")
        if len(lengths) != 1:
            raise FormatError(f"mixed HRIR lengths across subjects: {sorted(lengths)}")

        out_dir.mkdir(parents=True, exist_ok=True)
        for sid, rate, entries, _ in imported:
            write_hrir_file(out_dir / "subjects" / str(sid) / "hrir.bin", entries, rate)
        with open(out_dir / ANTHRO_TABLE, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id"] + list(feature_names))
            for sid, _, _, values in imported:
                writer.writerow([sid] + [repr(float(v)) for v in values])
        manifest = {
            "format": 1,
            "subject_ids": [sid for sid, _, _, _ in imported],
            "feature_names": list(feature_names),
            "hrir_length": int(imported[0][2][0][2].shape[0]),
            "grid_size": len(grid),
            "sample_rate": imported[0][1],
            "skipped": [{"subject_id": sid, "reason": why} for sid, why in skipped],
        }
        with open(out_dir / STORE_MANIFEST, "w") as fh:
            json.dump(manifest, fh, indent=2)

    return ImportResult(
        count=len(imported),
        subject_ids=[sid for sid, _, _, _ in imported],
        skipped=skipped,
    )


class SubjectStore:
    """Read access to a directory of per-subject hrir.bin files.

    Works on canonical stores written by import_bundle (with anthropometry)
    and on bare generated sets (subjects/<id>/hrir.bin only). Records are
    cached after first read and never mutated.
    """

    def __init__(self, root):
        self.root = Path(root)
        subjects_root = self.root / "subjects"
        if not subjects_root.is_dir():
            raise FileNotFoundError(f"no subjects/ directory under {self.root}")
        ids = []
        for child in sorted(subjects_root.iterdir()):
            if child.is_dir() and (child / "hrir.bin").exists():
                try:
                    ids.append(int(child.name))
                except ValueError:
                    continue
        if not ids:
            raise FormatError(f"{self.root}: store contains no subjects")
        self.subject_ids = sorted(ids)

        self.feature_names = None
        self._anthro = {}
        anthro_path = self.root / ANTHRO_TABLE
        if anthro_path.exists():
            self.feature_names, table = _read_anthro_table(anthro_path)
            self._anthro = {sid: vals for sid, (vals, _) in table.items()}

        self._cache: dict = {}
        first = self._load_entries(self.subject_ids[0])
        self.sample_rate = first[0]
        self.hrir_length = first[1][0][2].shape[0]
        self.doa_grid = tuple(
            Doa(azimuth=float(az) % (2 * math.pi), elevation=float(el), label=i)
            for i, (az, el, _, _) in enumerate(first[1])
        )

    @property
    def grid_size(self) -> int:
        return len(self.doa_grid)

    def _load_entries(self, subject_id: int):
        rate, entries = read_hrir_file(
            self.root / "subjects" / str(subject_id) / "hrir.bin"
        )
        return rate, _canonical_order(entries)

    def anthro(self, subject_id: int) -> AnthroVector:
        if subject_id not in self._anthro:
            raise KeyError(f"no anthropometry for subject {subject_id}")
        return AnthroVector(values=self._anthro[subject_id])

    def subject(self, subject_id: int) -> SubjectRecord:
        if subject_id in self._cache:
            return self._cache[subject_id]
        rate, entries = self._load_entries(subject_id)
        if [(az, el) for az, el, _, _ in entries] != [
            (np.float32(d.azimuth), np.float32(d.elevation)) for d in self.doa_grid
        ]:
            raise FormatError(
                f"subject {subject_id}: direction grid differs from the store grid"
            )
        hrirs = tuple(
            (self.doa_grid[i], HrirPair(left=left, right=right, sample_rate=rate))
            for i, (_, _, left, right) in enumerate(entries)
        )
        anthro = (
            self.anthro(subject_id)
            if subject_id in self._anthro
            else AnthroVector(values=np.zeros(N_FEATURES))
        )
        record = SubjectRecord(
            subject_id=subject_id, hrirs=hrirs, anthro=anthro, sample_rate=rate
        )
        self._cache[subject_id] = record
        return record


# ---------------------------------------------------------------------------
# anthropometric normalization


def compute_anthro_stats(records) -> AnthroStats:
    """Per-feature population mean/std over the given subjects."""
    vectors = [r.anthro.values if isinstance(r, SubjectRecord) else r.values for r in records]
    if len(vectors) < 2:
        raise InsufficientDataError(
            f"need at least 2 subjects to compute statistics, got {len(vectors)}"
        )
    stacked = np.stack(vectors)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)  # population convention (divide by count)
    zero = np.flatnonzero(std == 0)
    if zero.size:
        raise DegenerateFeatureError(int(zero[0]))
    return AnthroStats(mean=mean, std=std)


def normalize_anthro(a: AnthroVector, stats: AnthroStats) -> AnthroVector:
    """Sigmoid-normalize features: 1 / (1 + exp(-(a - mean)/std))."""
    if stats.mean.shape != a.values.shape:
        raise SchemaError(
            f"stats dimension {stats.mean.shape} does not match features {a.values.shape}"
        )
    z = (a.values - stats.mean) / stats.std
    norm = expit(z)
    # expit underflows to exactly 0/1 for |z| beyond ~37; keep the open interval.
    norm = np.clip(norm, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return AnthroVector(values=a.values, normalized=norm)


def denormalize_anthro(normalized: np.ndarray, stats: AnthroStats) -> np.ndarray:
    """Invert normalize_anthro analytically: a = mean + std * logit(a_norm)."""
    normalized = np.asarray(normalized, dtype=np.float64)
    if stats.mean.shape != normalized.shape:
        raise SchemaError("stats dimension does not match normalized vector")
    return stats.mean + stats.std * logit(normalized)


# ---------------------------------------------------------------------------
# direction labeling


def angular_distance(az1: float, el1: float, az2: float, el2: float) -> float:
    """Great-circle angle between two directions, in radians."""
    dot = (
        math.sin(el1) * math.sin(el2)
        + math.cos(el1) * math.cos(el2) * math.cos(az1 - az2)
    )
    return math.acos(min(1.0, max(-1.0, dot)))


def doa_label(azimuth: float, elevation: float, grid) -> int:
    """Label of the grid direction nearest to the query (great circle).

    Exact grid members map to themselves; ties go to the lowest label.
    """
    if not grid:
        raise ConfigurationError("empty direction grid")
    best_label = None
    best_dist = None
    for doa in grid:
        d = angular_distance(azimuth, elevation, doa.azimuth, doa.elevation)
        if best_dist is None or d < best_dist or (d == best_dist and doa.label < best_label):
            best_dist = d
            best_label = doa.label
    return best_label


# ---------------------------------------------------------------------------
# folds


def make_loocv_folds(subject_ids, val_count: int, seed: int) -> list:
    """One fold per subject: that subject held out, val drawn from the rest.

    Validation subjects are drawn deterministically per fold from `seed`,
    so the same inputs always produce the same folds.
    """
    subject_ids = list(subject_ids)
    if len(set(subject_ids)) != len(subject_ids):
        raise ConfigurationError("subject ids must be unique")
    if val_count < 0 or val_count >= len(subject_ids) - 1:
        raise ConfigurationError(
            f"val_count={val_count} leaves no training subjects for "
            f"{len(subject_ids)} ids"
        )
    folds = []
    for index, test_id in enumerate(subject_ids):
        rest = [sid for sid in subject_ids if sid != test_id]
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
        val = sorted(rng.choice(len(rest), size=val_count, replace=False).tolist())
        val_ids = [rest[i] for i in val]
        train_ids = [sid for sid in rest if sid not in set(val_ids)]
        folds.append(
            DatasetFold(
                test_subject=test_id,
                train_subjects=tuple(train_ids),
                val_subjects=tuple(val_ids),
            )
        )
    return folds
