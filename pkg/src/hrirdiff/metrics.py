"""Objective evaluation of two-channel impulse responses.

Covers magnitude spectra, band-averaged log-spectral distortion (LSD),
interaural time difference (ITD) estimation, and binaural rendering by
linear convolution. All operations are pure functions over numpy arrays
and are safe for unrestricted parallel use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .errors import (
    ConfigurationError,
    ContractViolation,
    DomainError,
    EmptySelectionError,
    ShapeError,
    UndefinedItdError,
)

# Floor applied to magnitudes before log-ratios so LSD never sees zeros.
MAGNITUDE_FLOOR = 1e-6

# FFT size used by the evaluation pipeline (fine enough that the default
# 44-band split of [0, 15 kHz] at 44.1 kHz leaves no band empty).
DEFAULT_NFFT = 2048

DEFAULT_BAND_COUNT = 44
DEFAULT_BAND_FMAX = 15000.0


@dataclass(frozen=True)
class HrirPair:
    """A two-channel head-related impulse response.

    left/right hold T samples each; sample_rate is in Hz. Samples must be
    finite and both channels must have the same length.
    """

    left: np.ndarray
    right: np.ndarray
    sample_rate: float

    def __post_init__(self):
        left = np.asarray(self.left, dtype=np.float64)
        right = np.asarray(self.right, dtype=np.float64)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        if left.ndim != 1 or right.ndim != 1:
            raise ShapeError("HRIR channels must be 1-D arrays")
        if left.shape != right.shape:
            raise ShapeError(
                f"channel length mismatch: left has {left.shape[0]} samples, "
                f"right has {right.shape[0]}"
            )
        if not self.sample_rate > 0:
            raise ShapeError("sample_rate must be positive")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise ShapeError("HRIR samples must be finite")

    @property
    def length(self) -> int:
        return self.left.shape[0]

    def as_array(self) -> np.ndarray:
        """Stack the channels into a (2, T) array (left first)."""
        return np.stack([self.left, self.right])

    @classmethod
    def from_array(cls, data: np.ndarray, sample_rate: float) -> "HrirPair":
        data = np.asarray(data)
        if data.ndim != 2 or data.shape[0] != 2:
            raise ShapeError(f"expected a (2, T) array, got {data.shape}")
        return cls(left=data[0], right=data[1], sample_rate=sample_rate)


@dataclass(frozen=True)
class MagnitudeSpectrum:
    """Magnitude of the DFT of one channel, with bin frequencies in Hz."""

    magnitudes: np.ndarray
    frequencies: np.ndarray
    doa_label: int | None = None

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        freqs = np.asarray(self.frequencies, dtype=np.float64)
        object.__setattr__(self, "magnitudes", mags)
        object.__setattr__(self, "frequencies", freqs)
        if mags.shape != freqs.shape:
            raise ShapeError("magnitudes and frequencies must align")
        if np.any(mags < 0):
            raise ShapeError("magnitudes must be non-negative")
        if np.any(np.diff(freqs) <= 0):
            raise ShapeError("bin frequencies must be ascending")


@dataclass(frozen=True)
class BandSpec:
    """Frequency bands given by K+1 strictly increasing edges in Hz."""

    edges: np.ndarray = field(
        default_factory=lambda: np.linspace(0.0, DEFAULT_BAND_FMAX, DEFAULT_BAND_COUNT + 1)
    )

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        object.__setattr__(self, "edges", edges)
        if edges.ndim != 1 or edges.size < 2:
            raise ConfigurationError("need at least two band edges")
        if np.any(np.diff(edges) <= 0):
            raise ConfigurationError("band edges must be strictly increasing")

    @property
    def count(self) -> int:
        return self.edges.size - 1

    @classmethod
    def linear(cls, count: int = DEFAULT_BAND_COUNT, f_min: float = 0.0,
               f_max: float = DEFAULT_BAND_FMAX) -> "BandSpec":
        if count < 1 or not f_max > f_min:
            raise ConfigurationError("invalid band layout")
        return cls(edges=np.linspace(f_min, f_max, count + 1))

    @classmethod
    def logarithmic(cls, count: int = DEFAULT_BAND_COUNT, f_min: float = 200.0,
                    f_max: float = DEFAULT_BAND_FMAX) -> "BandSpec":
        if count < 1 or not (0 < f_min < f_max):
            raise ConfigurationError("invalid band layout")
        return cls(edges=np.geomspace(f_min, f_max, count + 1))


def hrtf_magnitude(samples: np.ndarray, sample_rate: float, nfft: int = DEFAULT_NFFT,
                   doa_label: int | None = None) -> MagnitudeSpectrum:
    """Magnitude of the zero-padded DFT of one channel, bins 0..nfft/2."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ShapeError("expected a single channel")
    if nfft < samples.shape[0]:
        raise ConfigurationError(
            f"nfft={nfft} is shorter than the signal ({samples.shape[0]} samples)"
        )
    mags = np.abs(np.fft.rfft(samples, n=nfft))
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    return MagnitudeSpectrum(magnitudes=mags, frequencies=freqs, doa_label=doa_label)


def band_average(spec: MagnitudeSpectrum, bands: BandSpec) -> np.ndarray:
    """Arithmetic mean of bin magnitudes within each band.

    Bands are half-open [lo, hi) except the last, which includes its upper
    edge. Raises ConfigurationError naming the first empty band.
    """
    out = np.empty(bands.count)
    freqs = spec.frequencies
    for k in range(bands.count):
        lo, hi = bands.edges[k], bands.edges[k + 1]
        if k == bands.count - 1:
            mask = (freqs >= lo) & (freqs <= hi)
        else:
            mask = (freqs >= lo) & (freqs < hi)
        if not np.any(mask):
            raise ConfigurationError(
                f"band {k} ([{lo:.1f}, {hi:.1f}) Hz) contains no FFT bin"
            )
        out[k] = spec.magnitudes[mask].mean()
    return out


def banded_hrtf(pair: HrirPair, bands: BandSpec, nfft: int = DEFAULT_NFFT) -> np.ndarray:
    """Band-averaged magnitude spectra for both ears, shape (2, K)."""
    return np.stack([
        band_average(hrtf_magnitude(pair.left, pair.sample_rate, nfft), bands),
        band_average(hrtf_magnitude(pair.right, pair.sample_rate, nfft), bands),
    ])


def apply_magnitude_floor(mags: np.ndarray, floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    return np.maximum(np.asarray(mags, dtype=np.float64), floor)


def lsd(banded_gt: np.ndarray, banded_pred: np.ndarray) -> float:
    """Root-mean-square of the dB log-ratio between two banded spectra.

    Inputs may have any matching shape; the mean runs over every element
    (directions x bands, and ears if stacked). All values must be strictly
    positive: callers apply apply_magnitude_floor first.
    """
    gt = np.asarray(banded_gt, dtype=np.float64)
    pred = np.asarray(banded_pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ShapeError(f"banded shapes differ: {gt.shape} vs {pred.shape}")
    if np.any(gt <= 0) or np.any(pred <= 0):
        raise DomainError("magnitudes must be strictly positive; apply the magnitude floor")
    ratios_db = 20.0 * np.log10(gt / pred)
    return float(np.sqrt(np.mean(ratios_db**2)))


def _lowpass(x: np.ndarray, sample_rate: float, cutoff_hz: float) -> np.ndarray:
    b, a = signal.butter(4, cutoff_hz, btype="low", fs=sample_rate)
    padlen = min(3 * max(len(a), len(b)), x.shape[0] - 1)
    return signal.filtfilt(b, a, x, padlen=padlen)


def compute_itd(pair: HrirPair, lowpass_hz: float = 1500.0,
                silence_floor: float = 0.0, method: str = "xcorr") -> float:
    """Interaural time difference in seconds; positive when the left ear leads.

    method="xcorr" (default): lag of the cross-correlation maximum of the
    low-passed channels, refined by parabolic interpolation. method="onset":
    difference of the first samples exceeding -20 dB re the channel peak.
    """
    left = pair.left
    right = pair.right
    if np.max(np.abs(left)) <= silence_floor or np.max(np.abs(right)) <= silence_floor:
        raise UndefinedItdError("both channels must be above the silence floor")

    if method == "onset":
        onsets = []
        for ch in (left, right):
            thresh = np.max(np.abs(ch)) * 10 ** (-20 / 20)
            onsets.append(int(np.argmax(np.abs(ch) >= thresh)))
        return (onsets[1] - onsets[0]) / pair.sample_rate
    if method != "xcorr":
        raise ConfigurationError(f"unknown ITD method {method!r}")

    lf = _lowpass(left, pair.sample_rate, lowpass_hz)
    rf = _lowpass(right, pair.sample_rate, lowpass_hz)
    corr = signal.correlate(rf, lf, mode="full")
    lags = signal.correlation_lags(rf.shape[0], lf.shape[0], mode="full")
    peak = int(np.argmax(corr))
    lag = float(lags[peak])
    if 0 < peak < corr.shape[0] - 1:
        y0, y1, y2 = corr[peak - 1], corr[peak], corr[peak + 1]
        denom = y0 - 2 * y1 + y2
        if abs(denom) > 1e-30:
            lag += 0.5 * (y0 - y2) / denom
    return lag / pair.sample_rate


def itd_curve(hrirs, elevation_tol: float = 1e-3,
              lowpass_hz: float = 1500.0) -> list[tuple[float, float]]:
    """ITD over the horizontal plane, as (signed azimuth in rad, ITD in s).

    `hrirs` is a sequence of (doa, HrirPair) where doa exposes .azimuth and
    .elevation in radians. Directions with |elevation| <= elevation_tol are
    kept and the result is ordered by signed azimuth in [-pi, pi).
    """
    points = []
    for doa, pair in hrirs:
        if abs(doa.elevation) <= elevation_tol:
            az = (doa.azimuth + np.pi) % (2 * np.pi) - np.pi
            points.append((float(az), compute_itd(pair, lowpass_hz=lowpass_hz)))
    if not points:
        raise EmptySelectionError("no horizontal-plane directions in the set")
    points.sort(key=lambda p: p[0])
    return points


def render_binaural(pair: HrirPair, source: np.ndarray,
                    source_sample_rate: float) -> np.ndarray:
    """Convolve a mono source with both ears; returns (2, len + T - 1)."""
    if source_sample_rate != pair.sample_rate:
        raise ContractViolation(
            f"sample-rate mismatch: source {source_sample_rate} Hz vs HRIR {pair.sample_rate} Hz"
        )
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 1:
        raise ShapeError("source must be mono (1-D)")
    return np.stack([
        np.convolve(source, pair.left, mode="full"),
        np.convolve(source, pair.right, mode="full"),
    ])
