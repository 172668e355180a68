import math

import numpy as np
import pytest

from hrirdiff.errors import (
    ConfigurationError,
    ContractViolation,
    DomainError,
    EmptySelectionError,
    ShapeError,
    UndefinedItdError,
)
from hrirdiff.metrics import (
    BandSpec,
    HrirPair,
    apply_magnitude_floor,
    band_average,
    banded_hrtf,
    compute_itd,
    hrtf_magnitude,
    itd_curve,
    lsd,
    render_binaural,
)

FS = 44100.0


def click(length=64, at=20, width=5, rng=None):
    """Broadband test pulse: Hann-windowed noise burst."""
    rng = rng or np.random.default_rng(0)
    x = np.zeros(length)
    burst = rng.standard_normal(width) * np.hanning(width)
    x[at:at + width] = burst
    return x


class DoaStub:
    def __init__(self, azimuth, elevation):
        self.azimuth = azimuth
        self.elevation = elevation


# ---------------------------------------------------------------------------
# HrirPair


def test_hrir_pair_validation():
    with pytest.raises(ShapeError):
        HrirPair(left=np.zeros(4), right=np.zeros(5), sample_rate=FS)
    with pytest.raises(ShapeError):
        HrirPair(left=np.array([np.nan]), right=np.array([0.0]), sample_rate=FS)
    with pytest.raises(ShapeError):
        HrirPair(left=np.zeros(4), right=np.zeros(4), sample_rate=0)
    pair = HrirPair(left=np.arange(4.0), right=np.ones(4), sample_rate=FS)
    assert pair.as_array().shape == (2, 4)
    again = HrirPair.from_array(pair.as_array(), FS)
    assert np.array_equal(again.left, pair.left)


# ---------------------------------------------------------------------------
# spectra


def test_unit_impulse_has_flat_magnitude():
    x = np.zeros(64)
    x[0] = 1.0
    spec = hrtf_magnitude(x, FS, nfft=256)
    assert spec.magnitudes.shape == (129,)
    assert np.allclose(spec.magnitudes, 1.0, atol=1e-12)
    assert spec.frequencies[0] == 0.0
    assert spec.frequencies[-1] == pytest.approx(FS / 2)


def test_pure_delay_preserves_magnitudes():
    x = click()
    delayed = np.roll(x, 7)
    a = hrtf_magnitude(x, FS, nfft=256).magnitudes
    b = hrtf_magnitude(delayed, FS, nfft=256).magnitudes
    # circular shift is an exact linear-phase factor at every bin
    assert np.allclose(a, b, atol=1e-12)


def test_single_cycle_sinusoid_peaks_at_matching_bin():
    t = np.arange(64)
    x = np.sin(2 * np.pi * t / 64)
    spec = hrtf_magnitude(x, FS, nfft=64)
    # analytic DFT: all energy in bin 1 with magnitude T/2
    expected = np.zeros(33)
    expected[1] = 32.0
    assert np.allclose(spec.magnitudes, expected, atol=1e-9)


def test_nfft_shorter_than_signal_rejected():
    with pytest.raises(ConfigurationError):
        hrtf_magnitude(np.zeros(64), FS, nfft=32)


def test_band_average_flat_spectrum():
    spec = hrtf_magnitude(np.eye(1, 64, 0)[0], FS, nfft=2048)
    bands = BandSpec.linear()
    assert bands.count == 44
    out = band_average(spec, bands)
    assert np.allclose(out, 1.0)


def test_band_average_single_band_is_global_mean():
    x = click()
    spec = hrtf_magnitude(x, FS, nfft=256)
    out = band_average(spec, BandSpec(edges=[0.0, FS / 2]))
    assert out[0] == pytest.approx(spec.magnitudes.mean())


def test_band_average_two_band_split_matches_bin_oracle():
    x = click()
    spec = hrtf_magnitude(x, FS, nfft=512)
    split = 6000.0
    out = band_average(spec, BandSpec(edges=[0.0, split, FS / 2]))
    low = [m for f, m in zip(spec.frequencies, spec.magnitudes) if 0 <= f < split]
    high = [m for f, m in zip(spec.frequencies, spec.magnitudes) if split <= f <= FS / 2]
    assert out[0] == pytest.approx(sum(low) / len(low))
    assert out[1] == pytest.approx(sum(high) / len(high))


def test_empty_band_is_named():
    spec = hrtf_magnitude(click(), FS, nfft=64)  # bin spacing ~689 Hz
    with pytest.raises(ConfigurationError, match="band 1"):
        band_average(spec, BandSpec(edges=[0.0, 100.0, 200.0, FS / 2]))


def test_band_edges_must_increase():
    with pytest.raises(ConfigurationError):
        BandSpec(edges=[0.0, 100.0, 100.0])


# ---------------------------------------------------------------------------
# LSD


def test_lsd_identity_is_zero():
    h = np.abs(np.random.default_rng(0).standard_normal((5, 44))) + 0.1
    assert lsd(h, h) == 0.0


def test_lsd_constant_ratio_half():
    h = np.abs(np.random.default_rng(1).standard_normal((7, 44))) + 0.1
    assert lsd(h, h / 2) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_lsd_symmetry_and_scale_invariance():
    rng = np.random.default_rng(2)
    a = np.abs(rng.standard_normal((4, 10))) + 0.1
    b = np.abs(rng.standard_normal((4, 10))) + 0.1
    assert lsd(a, b) == pytest.approx(lsd(b, a), rel=1e-12)
    assert lsd(3.7 * a, 3.7 * b) == pytest.approx(lsd(a, b), rel=1e-9)


def test_lsd_rejects_nonpositive_and_mismatched():
    a = np.ones((2, 3))
    with pytest.raises(DomainError):
        lsd(a, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        lsd(a, np.ones((3, 2)))
    floored = apply_magnitude_floor(np.zeros((2, 3)))
    assert lsd(a, floored) > 0


def test_banded_lsd_equals_bin_level_on_single_bin_bands():
    x = click()
    y = click(rng=np.random.default_rng(9))
    nfft = 64
    spec_x = hrtf_magnitude(x, FS, nfft=nfft)
    spec_y = hrtf_magnitude(y, FS, nfft=nfft)
    df = FS / nfft
    edges = np.concatenate([spec_x.frequencies - df / 4, [spec_x.frequencies[-1] + df / 4]])
    bands = BandSpec(edges=edges)
    bx = apply_magnitude_floor(band_average(spec_x, bands))
    by = apply_magnitude_floor(band_average(spec_y, bands))
    direct = np.sqrt(np.mean((20 * np.log10(
        apply_magnitude_floor(spec_x.magnitudes) / apply_magnitude_floor(spec_y.magnitudes)
    ))**2))
    assert lsd(bx, by) == pytest.approx(direct, rel=1e-9)


# ---------------------------------------------------------------------------
# ITD


def shifted_pair(shift, length=256, at=60):
    base = click(length, at=at, width=9)
    right = np.roll(base, shift)
    return HrirPair(left=base, right=right, sample_rate=FS)


def test_itd_identical_channels_is_zero():
    pair = shifted_pair(0)
    assert compute_itd(pair) == pytest.approx(0.0, abs=1.0 / FS)


def test_itd_ten_sample_shift():
    pair = shifted_pair(10)
    expected = 10 / FS  # 226.76 us
    assert compute_itd(pair) == pytest.approx(expected, abs=1.0 / FS)


def test_itd_channel_swap_negates():
    pair = shifted_pair(10)
    swapped = HrirPair(left=pair.right, right=pair.left, sample_rate=FS)
    assert compute_itd(swapped) == pytest.approx(-compute_itd(pair), abs=1.0 / FS)


def test_itd_fractional_shift_oracle():
    # exact sub-sample delay built in the frequency domain
    length = 256
    base = click(length, at=80, width=9)
    shift = 6.35
    spectrum = np.fft.rfft(base)
    freqs = np.fft.rfftfreq(length, d=1.0 / FS)
    right = np.fft.irfft(spectrum * np.exp(-2j * np.pi * freqs * shift / FS), n=length)
    pair = HrirPair(left=base, right=right, sample_rate=FS)
    assert compute_itd(pair) == pytest.approx(shift / FS, abs=1.0 / FS)


def test_itd_onset_method():
    pair = shifted_pair(10)
    assert compute_itd(pair, method="onset") == pytest.approx(10 / FS, abs=1.0 / FS)
    with pytest.raises(ConfigurationError):
        compute_itd(pair, method="bogus")


def test_itd_silent_channel_rejected():
    silent = HrirPair(left=np.zeros(64), right=click(), sample_rate=FS)
    with pytest.raises(UndefinedItdError):
        compute_itd(silent)


def test_itd_curve_constructed_shifts():
    entries = []
    shifts = {-90: -12, -45: -7, 0: 0, 45: 7, 90: 12}
    for deg, shift in shifts.items():
        pair = shifted_pair(shift)
        entries.append((DoaStub(math.radians(deg % 360), 0.0), pair))
    entries.append((DoaStub(0.0, math.radians(45)), shifted_pair(3)))  # excluded
    curve = itd_curve(entries)
    assert len(curve) == len(shifts)
    azimuths = [round(math.degrees(az)) for az, _ in curve]
    assert azimuths == sorted(shifts)
    for az, itd in curve:
        expected = shifts[round(math.degrees(az))] / FS
        assert itd == pytest.approx(expected, abs=1.0 / FS)
    # odd symmetry of the constructed curve
    for (az_n, itd_n), (az_p, itd_p) in zip(curve[:2], curve[::-1][:2]):
        assert itd_n == pytest.approx(-itd_p, abs=2.0 / FS)


def test_itd_curve_empty_selection():
    entries = [(DoaStub(0.0, math.radians(45)), shifted_pair(3))]
    with pytest.raises(EmptySelectionError):
        itd_curve(entries)


def test_synthetic_fixture_itd_curve_is_odd(store):
    record = store.subject(1)
    curve = itd_curve(record.hrirs)
    by_az = {round(math.degrees(az)): itd for az, itd in curve}
    assert by_az[0] == pytest.approx(0.0, abs=2.0 / FS)
    assert by_az[90] == pytest.approx(-by_az[-90], abs=2.0 / FS)
    assert by_az[90] > 300e-6  # plausible head-width delay


# ---------------------------------------------------------------------------
# rendering


def test_render_impulse_recovers_hrir():
    pair = shifted_pair(4, length=32, at=10)
    impulse = np.zeros(8)
    impulse[0] = 1.0
    out = render_binaural(pair, impulse, FS)
    assert out.shape == (2, 8 + 32 - 1)
    assert np.allclose(out[0, :32], pair.left, atol=1e-15)
    assert np.allclose(out[1, :32], pair.right, atol=1e-15)


def test_render_zeros_gives_zeros():
    pair = shifted_pair(4, length=32, at=10)
    out = render_binaural(pair, np.zeros(16), FS)
    assert np.all(out == 0)


def test_render_matches_naive_convolution():
    rng = np.random.default_rng(3)
    pair = HrirPair(left=rng.standard_normal(24), right=rng.standard_normal(24),
                    sample_rate=FS)
    source = rng.standard_normal(64)
    out = render_binaural(pair, source, FS)

    def naive(sig, h):
        res = np.zeros(len(sig) + len(h) - 1)
        for i, s in enumerate(sig):
            for j, v in enumerate(h):
                res[i + j] += s * v
        return res

    assert np.max(np.abs(out[0] - naive(source, pair.left))) < 1e-10
    assert np.max(np.abs(out[1] - naive(source, pair.right))) < 1e-10


def test_render_is_linear_in_source():
    rng = np.random.default_rng(4)
    pair = HrirPair(left=rng.standard_normal(16), right=rng.standard_normal(16),
                    sample_rate=FS)
    x = rng.standard_normal(32)
    y = rng.standard_normal(32)
    combined = render_binaural(pair, 2.5 * x - 1.25 * y, FS)
    separate = 2.5 * render_binaural(pair, x, FS) - 1.25 * render_binaural(pair, y, FS)
    assert np.max(np.abs(combined - separate)) < 1e-10


def test_render_rejects_rate_mismatch():
    pair = shifted_pair(0, length=16, at=4)
    with pytest.raises(ContractViolation):
        render_binaural(pair, np.zeros(8), 48000.0)


def test_banded_hrtf_shape(store):
    record = store.subject(1)
    out = banded_hrtf(record.hrirs[0][1], BandSpec.linear())
    assert out.shape == (2, 44)
    assert np.all(out >= 0)
