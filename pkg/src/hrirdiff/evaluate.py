"""Compare a generated HRIR store against ground truth.

Produces a metrics manifest (per-subject and global LSD in dB and mean
absolute ITD error in microseconds, with the reference targets recorded
alongside) plus the figure-data CSV exports: time-domain overlay,
magnitude overlay, and horizontal-plane ITD curves.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .dataset import SubjectStore, doa_label
from .errors import ManifestConflictError, SchemaError
from .metrics import (
    DEFAULT_NFFT,
    MAGNITUDE_FLOOR,
    BandSpec,
    apply_magnitude_floor,
    banded_hrtf,
    compute_itd,
    hrtf_magnitude,
    itd_curve,
    lsd,
)

# Published results the implementation is measured against at full scale
# (93-subject LOOCV on HUTUBS); recorded in every metrics manifest.
REFERENCE_TARGETS = {"global_lsd_db": 5.1, "itd_mae_us": 53.93}


def _check_alignment(gt: SubjectStore, gen: SubjectStore) -> None:
    if gt.subject_ids != gen.subject_ids:
        missing = sorted(set(gt.subject_ids) ^ set(gen.subject_ids))
        raise SchemaError(f"subject ids differ between stores: {missing}")
    gt_grid = [(d.azimuth, d.elevation) for d in gt.doa_grid]
    gen_grid = [(d.azimuth, d.elevation) for d in gen.doa_grid]
    if gt_grid != gen_grid:
        missing = [g for g in gt_grid if g not in gen_grid]
        extra = [g for g in gen_grid if g not in gt_grid]
        raise SchemaError(
f"direction grids differ; missing from generated: {missing[:6]}, unexpected: {extra[:6]}"
        )


def generated_config_hash(gen: SubjectStore) -> str | None:
    """Single config hash of a generated store; mixed hashes are refused."""
    hashes = set()
    for sid in gen.subject_ids:
        meta_path = gen.root / "subjects" / str(sid) / "hrir.meta.json"
        if meta_path.exists():
            with open(meta_path) as fh:
                hashes.add(json.load(fh).get("config_hash"))
    if len(hashes) > 1:
        raise ManifestConflictError(
            f"generated store mixes config hashes: {sorted(map(str, hashes))}"
        )
    return next(iter(hashes)) if hashes else None


def evaluate_stores(gt: SubjectStore, gen: SubjectStore, bands: BandSpec | None = None,
                    nfft: int = DEFAULT_NFFT, magnitude_floor: float = MAGNITUDE_FLOOR,
                    lowpass_hz: float = 1500.0) -> dict:
    """Metrics manifest comparing two aligned stores.

    Per-subject LSD pools every direction, band, and ear; the global
    values average the per-subject ones.
    """
    _check_alignment(gt, gen)
    if bands is None:
        bands = BandSpec.linear()
    config_hash = generated_config_hash(gen)

    per_subject = {}
    for sid in gt.subject_ids:
        gt_rec = gt.subject(sid)
        gen_rec = gen.subject(sid)
        gt_banded = []
        gen_banded = []
        itd_errors = []
        for (doa_g, pair_g), (_, pair_p) in zip(gt_rec.hrirs, gen_rec.hrirs):
            gt_banded.append(banded_hrtf(pair_g, bands, nfft))
            gen_banded.append(banded_hrtf(pair_p, bands, nfft))
            itd_g = compute_itd(pair_g, lowpass_hz=lowpass_hz)
            itd_p = compute_itd(pair_p, lowpass_hz=lowpass_hz)
            itd_errors.append(abs(itd_g - itd_p) * 1e6)
        subject_lsd = lsd(
            apply_magnitude_floor(np.stack(gt_banded), magnitude_floor),
            apply_magnitude_floor(np.stack(gen_banded), magnitude_floor),
        )
        per_subject[sid] = {
            "lsd_db": subject_lsd,
            "itd_mae_us": float(np.mean(itd_errors)),
        }

    return {
        "config_hash": config_hash,
        "band_count": bands.count,
        "nfft": nfft,
        "per_subject": {str(k): v for k, v in per_subject.items()},
        "global": {
            "lsd_db": float(np.mean([v["lsd_db"] for v in per_subject.values()])),
            "itd_mae_us": float(np.mean([v["itd_mae_us"] for v in per_subject.values()])),
        },
        "reference_targets": dict(REFERENCE_TARGETS),
    }


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_figure_data(out_dir, gt: SubjectStore, gen: SubjectStore,
                      subject_id: int | None = None,
                      azimuth: float = 0.0, elevation: float = 0.0,
                      nfft: int = DEFAULT_NFFT,
                      magnitude_floor: float = MAGNITUDE_FLOOR) -> list:
    """Write the three figure CSV exports; returns the created paths.

    fig_hrir.csv: (t_s, amp_gt, amp_pred) for the left ear at the chosen
    direction. fig_hrtf.csv: (freq_hz, mag_db_gt, mag_db_pred) for the same
    signal. fig_itd_{gt,pred}.csv: (azimuth_deg, itd_us) over the
    horizontal plane.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if subject_id is None:
        subject_id = gt.subject_ids[0]
    label = doa_label(azimuth, elevation, gt.doa_grid)
    gt_pair = gt.subject(subject_id).pair_for_label(label)
    gen_pair = gen.subject(subject_id).pair_for_label(label)

    paths = []
    t = np.arange(gt_pair.length) / gt_pair.sample_rate
    path = out_dir / "fig_hrir.csv"
    _write_csv(path, ["t_s", "amp_gt", "amp_pred"],
               zip(t, gt_pair.left, gen_pair.left))
    paths.append(path)

    spec_gt = hrtf_magnitude(gt_pair.left, gt_pair.sample_rate, nfft)
    spec_gen = hrtf_magnitude(gen_pair.left, gen_pair.sample_rate, nfft)
    db_gt = 20 * np.log10(apply_magnitude_floor(spec_gt.magnitudes, magnitude_floor))
    db_gen = 20 * np.log10(apply_magnitude_floor(spec_gen.magnitudes, magnitude_floor))
    path = out_dir / "fig_hrtf.csv"
    _write_csv(path, ["freq_hz", "mag_db_gt", "mag_db_pred"],
               zip(spec_gt.frequencies, db_gt, db_gen))
    paths.append(path)

    for tag, store in (("gt", gt), ("pred", gen)):
        record = store.subject(subject_id)
        curve = itd_curve(record.hrirs)
        path = out_dir / f"fig_itd_{tag}.csv"
        _write_csv(path, ["azimuth_deg", "itd_us"],
                   [(math.degrees(az), itd * 1e6) for az, itd in curve])
        paths.append(path)
    return paths


def write_metrics_manifest(out_dir, manifest: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
