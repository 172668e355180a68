"""Synthetic HRIR bundles for tests, smoke runs, and demos.

Subjects are simple spherical-head models: each ear receives a damped
sinusoid whose delay, amplitude, and center frequency depend on the
source azimuth/elevation and on a few of the subject's (randomly drawn)
anthropometric features. Small and fast, but with the real data's shape:
a shared direction grid, per-subject anthropometry, plausible ITDs.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .dataset import ANTHRO_TABLE, N_FEATURES, write_hrir_file

SPEED_OF_SOUND = 343.0  # m/s

# 17 head/torso measurements followed by the 10 pinna measurements of one
# ear (the convention the anthropometric table is expected to carry).
FEATURE_NAMES = [
    "head_width", "head_height", "head_depth", "pinna_offset_down",
    "pinna_offset_back", "neck_width", "neck_height", "neck_depth",
    "torso_top_width", "torso_top_height", "torso_top_depth",
    "shoulder_width", "head_offset_forward", "height", "seated_height",
    "head_circumference", "shoulder_circumference",
    "cavum_concha_height", "cymba_concha_height", "cavum_concha_width",
    "fossa_height", "pinna_height", "pinna_width",
    "intertragal_incisure_width", "cavum_concha_depth",
    "pinna_rotation_angle", "pinna_flare_angle",
]

assert len(FEATURE_NAMES) == N_FEATURES

# Rough per-feature scales (cm / degrees) the random subjects vary around.
_FEATURE_BASE = np.array([
    15.5, 21.0, 20.0, 3.0, 0.5, 11.0, 6.0, 10.0,
    32.0, 13.0, 24.0, 45.0, 3.0, 175.0, 90.0, 57.0, 110.0,
    1.9, 0.7, 1.6, 1.8, 6.4, 2.9, 0.5, 1.2, 24.0, 28.0,
])


def synthetic_grid(n_azimuths: int = 8, extra_elevations=(-math.pi / 4, math.pi / 4)):
    """Azimuth ring at zero elevation plus a frontal point per extra elevation."""
    points = [(2 * math.pi * k / n_azimuths, 0.0) for k in range(n_azimuths)]
    points.extend((0.0, el) for el in extra_elevations)
    return points


def _signed_azimuth(azimuth: float) -> float:
    return (azimuth + math.pi) % (2 * math.pi) - math.pi


def _ear_signal(freqs: np.ndarray, hrir_length: int, delay_s: float,
                amplitude: float, ripple_cycles: float, ripple_phase: float) -> np.ndarray:
    """Broadband pulse with sinusoidal spectral ripple and an exact
    linear-phase delay."""
    nyquist = freqs[-1]
    mags = amplitude * (1.0 + 0.35 * np.sin(
        2 * math.pi * ripple_cycles * freqs / nyquist + ripple_phase
    ))
    spectrum = mags * np.exp(-2j * math.pi * freqs * delay_s)
    return np.fft.irfft(spectrum, n=hrir_length)


def render_subject_hrir(azimuth: float, elevation: float, anthro: np.ndarray,
                        hrir_length: int, sample_rate: float):
    """Deterministic two-channel HRIR for one subject and direction.

    Interaural delay follows a spherical-head model scaled by the head
    width; ear spectra carry direction- and subject-dependent ripples with
    a level difference toward the far ear.
    """
    az = _signed_azimuth(azimuth)
    head_width_m = anthro[0] / 100.0
    itd_max = head_width_m / SPEED_OF_SOUND * 1.3
    itd = itd_max * math.sin(az) * math.cos(elevation)

    base_delay = 0.375 * hrir_length / sample_rate
    shadow = 0.4 * math.sin(az) * math.cos(elevation)
    cycles = 2.0 + anthro[21] / 3.2  # pinna-height-flavored ripple density
    phase_l = 0.7 * az + 1.9 * elevation + anthro[15] / 12.0
    phase_r = -0.7 * az + 1.9 * elevation + anthro[15] / 12.0 + 0.8

    freqs = np.fft.rfftfreq(hrir_length, d=1.0 / sample_rate)
    left = _ear_signal(freqs, hrir_length, base_delay - itd / 2,
                       0.9 * (1.0 + shadow), cycles, phase_l)
    right = _ear_signal(freqs, hrir_length, base_delay + itd / 2,
                        0.9 * (1.0 - shadow), cycles, phase_r)
    return left, right


def make_synthetic_bundle(out_dir, n_subjects: int = 3, hrir_length: int = 64,
                          sample_rate: float = 44100.0, seed: int = 0,
                          n_azimuths: int = 8, extra_elevations=(-math.pi / 4, math.pi / 4),
                          missing_feature_subjects=()) -> list:
    """Write a synthetic exchange bundle; returns the subject ids.

    Subjects listed in missing_feature_subjects get one blanked cell in the
    anthropometric table, which a subsequent import must skip and report.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    grid = synthetic_grid(n_azimuths=n_azimuths, extra_elevations=extra_elevations)

    subject_ids = list(range(1, n_subjects + 1))
    rows = []
    for sid in subject_ids:
        anthro = _FEATURE_BASE * (1.0 + 0.08 * rng.standard_normal(N_FEATURES))
        entries = []
        for az, el in grid:
            left, right = render_subject_hrir(az, el, anthro, hrir_length, sample_rate)
            entries.append((az, el, left, right))
        write_hrir_file(out_dir / "subjects" / str(sid) / "hrir.bin", entries, sample_rate)
        rows.append((sid, anthro))

    with open(out_dir / ANTHRO_TABLE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id"] + FEATURE_NAMES)
        for sid, anthro in rows:
            cells = [repr(float(v)) for v in anthro]
            if sid in missing_feature_subjects:
                cells[3] = ""
            writer.writerow([sid] + cells)
    return subject_ids
