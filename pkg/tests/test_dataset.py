import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrirdiff.dataset import (
    ANTHRO_TABLE,
    N_FEATURES,
    AnthroStats,
    AnthroVector,
    DatasetFold,
    Doa,
    SubjectStore,
    angular_distance,
    compute_anthro_stats,
    denormalize_anthro,
    doa_label,
    import_bundle,
    make_loocv_folds,
    normalize_anthro,
    read_hrir_file,
    write_hrir_file,
)
from hrirdiff.errors import (
    ConfigurationError,
    DegenerateFeatureError,
    FormatError,
    InsufficientDataError,
    SchemaError,
)
from hrirdiff.synthetic import make_synthetic_bundle


def vector(first=10.0, fill=1.0):
    values = np.full(N_FEATURES, fill)
    values[0] = first
    return AnthroVector(values=values)


# ---------------------------------------------------------------------------
# binary format


def test_hrir_file_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    entries = [
        (0.1, -0.2, rng.standard_normal(16).astype(np.float32),
         rng.standard_normal(16).astype(np.float32))
        for _ in range(3)
    ]
    path = tmp_path / "x.bin"
    write_hrir_file(path, entries, 44100)
    rate, back = read_hrir_file(path)
    assert rate == 44100
    assert len(back) == 3
    for (az, el, left, right), (az2, el2, left2, right2) in zip(entries, back):
        assert az2 == np.float32(az) and el2 == np.float32(el)
        assert np.array_equal(left, left2) and np.array_equal(right, right2)


def test_hrir_file_rejects_corruption(tmp_path):
    path = tmp_path / "x.bin"
    write_hrir_file(path, [(0.0, 0.0, np.zeros(8), np.zeros(8))], 44100)
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_hrir_file(path)
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(FormatError):
        read_hrir_file(path)


# ---------------------------------------------------------------------------
# import


def test_import_full_synthetic_bundle(tmp_path):
    make_synthetic_bundle(tmp_path / "b", n_subjects=3, hrir_length=32, seed=0)
    result = import_bundle(tmp_path / "b", tmp_path / "store")
    assert result.count == 3
    assert result.skipped == []
    store = SubjectStore(tmp_path / "store")
    assert store.subject_ids == [1, 2, 3]
    assert store.hrir_length == 32


def test_import_empty_source(tmp_path):
    (tmp_path / "empty").mkdir()
    result = import_bundle(tmp_path / "empty", tmp_path / "store")
    assert result.count == 0
    assert not (tmp_path / "store").exists()


def test_import_missing_source(tmp_path):
    with pytest.raises(FileNotFoundError):
        import_bundle(tmp_path / "nope", tmp_path / "store")


def test_import_skips_subject_with_missing_feature(tmp_path):
    make_synthetic_bundle(tmp_path / "b", n_subjects=3, hrir_length=32, seed=0,
                          missing_feature_subjects=(2,))
    result = import_bundle(tmp_path / "b", tmp_path / "store")
    assert result.count == 2
    assert result.subject_ids == [1, 3]
    assert result.skipped == [(2, "missing anthropometric feature")]


def test_import_reports_orphan_subjects(tmp_path):
    make_synthetic_bundle(tmp_path / "b", n_subjects=3, hrir_length=32, seed=0)
    # remove one subject's HRIR files but keep its table row
    hrir = tmp_path / "b" / "subjects" / "3" / "hrir.bin"
    hrir.unlink()
    hrir.parent.rmdir()
    result = import_bundle(tmp_path / "b", tmp_path / "store")
    assert result.count == 2
    assert (3, "no HRIR files") in result.skipped


def test_import_rejects_malformed_table(tmp_path):
    make_synthetic_bundle(tmp_path / "b", n_subjects=2, hrir_length=32, seed=0)
    table = tmp_path / "b" / ANTHRO_TABLE
    rows = list(csv.reader(open(table)))
    rows[1] = rows[1][:-1]  # wrong field count
    with open(table, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with pytest.raises(SchemaError, match="fields"):
        import_bundle(tmp_path / "b", tmp_path / "store")


def test_import_rejects_inconsistent_grid(tmp_path):
    make_synthetic_bundle(tmp_path / "b", n_subjects=2, hrir_length=32, seed=0)
    # rewrite subject 2 with a shifted direction
    path = tmp_path / "b" / "subjects" / "2" / "hrir.bin"
    rate, entries = read_hrir_file(path)
    az, el, left, right = entries[0]
    entries[0] = (az + 0.3, el, left, right)
    write_hrir_file(path, entries, rate)
    with pytest.raises(FormatError, match="grid"):
        import_bundle(tmp_path / "b", tmp_path / "store")


def test_import_then_reread_is_bit_identical(tmp_path):
    make_synthetic_bundle(tmp_path / "b", n_subjects=2, hrir_length=32, seed=3)
    import_bundle(tmp_path / "b", tmp_path / "store")
    store = SubjectStore(tmp_path / "store")
    # raw source entries, canonically ordered like the store
    rate, entries = read_hrir_file(tmp_path / "b" / "subjects" / "1" / "hrir.bin")
    entries = sorted(entries, key=lambda e: (e[1], e[0]))
    record = store.subject(1)
    for (az, el, left, right), (doa, pair) in zip(entries, record.hrirs):
        assert np.array_equal(left, pair.left.astype(np.float32))
        assert np.array_equal(right, pair.right.astype(np.float32))


# ---------------------------------------------------------------------------
# anthropometric statistics and normalization


def test_stats_hand_computed():
    stats = compute_anthro_stats([vector(first=1.0), vector(first=3.0, fill=2.0)])
    assert stats.mean[0] == pytest.approx(2.0)
    assert stats.std[0] == pytest.approx(1.0)  # population convention
    assert stats.mean[1] == pytest.approx(1.5)
    assert stats.std[1] == pytest.approx(0.5)


def test_stats_require_two_records():
    with pytest.raises(InsufficientDataError):
        compute_anthro_stats([vector()])


def test_stats_reject_zero_variance():
    with pytest.raises(DegenerateFeatureError) as err:
        compute_anthro_stats([vector(first=1.0), vector(first=2.0)])
    assert err.value.feature_index == 1  # all fill features identical


def test_normalize_closed_form_cases():
    rng = np.random.default_rng(0)
    mean = rng.uniform(1, 10, N_FEATURES)
    std = rng.uniform(0.5, 2, N_FEATURES)
    stats = AnthroStats(mean=mean, std=std)

    at_mean = normalize_anthro(AnthroVector(values=mean.copy()), stats)
    assert np.allclose(at_mean.normalized, 0.5, atol=1e-9)

    plus_sigma = normalize_anthro(AnthroVector(values=mean + std), stats)
    assert np.allclose(plus_sigma.normalized, 0.7310585786300049, atol=1e-9)

    minus_10 = normalize_anthro(AnthroVector(values=mean - 10 * std), stats)
    assert np.allclose(minus_10.normalized, 4.5397868702434395e-05, rtol=1e-9)
    assert np.all(minus_10.normalized > 0)


def test_normalize_dimension_mismatch():
    stats = AnthroStats(mean=np.zeros(5), std=np.ones(5))
    with pytest.raises(SchemaError):
        normalize_anthro(vector(), stats)


def test_normalize_monotone_per_feature(rng):
    stats = AnthroStats(mean=rng.uniform(-1, 1, N_FEATURES),
                        std=rng.uniform(0.1, 3, N_FEATURES))
    for _ in range(1000):
        a = rng.uniform(-5, 5, N_FEATURES)
        bump = rng.uniform(0.01, 1.0, N_FEATURES)
        lo = normalize_anthro(AnthroVector(values=a), stats).normalized
        hi = normalize_anthro(AnthroVector(values=a + bump), stats).normalized
        assert np.all(hi > lo)


def test_normalize_roundtrip(rng):
    stats = AnthroStats(mean=rng.uniform(-1, 1, N_FEATURES),
                        std=rng.uniform(0.1, 3, N_FEATURES))
    values = rng.uniform(-4, 4, N_FEATURES)
    norm = normalize_anthro(AnthroVector(values=values), stats).normalized
    back = denormalize_anthro(norm, stats)
    assert np.allclose(back, values, rtol=1e-9, atol=1e-9)


def test_anthro_vector_validation():
    with pytest.raises(SchemaError):
        AnthroVector(values=np.zeros(5))
    with pytest.raises(SchemaError):
        AnthroVector(values=np.zeros(N_FEATURES), normalized=np.ones(N_FEATURES))


# ---------------------------------------------------------------------------
# direction labels


def ring_grid(step_deg=10.0):
    n = int(round(360 / step_deg))
    return [Doa(math.radians(i * step_deg), 0.0, i) for i in range(n)]


def test_doa_label_identity_on_grid(store):
    grid = store.doa_grid
    labels = [doa_label(d.azimuth, d.elevation, grid) for d in grid]
    assert labels == [d.label for d in grid]


def test_doa_label_tie_breaks_low():
    grid = [Doa(0.0, 0.0, 3), Doa(math.radians(40), 0.0, 9)]
    # query exactly halfway between the two
    label = doa_label(math.radians(20), 0.0, grid)
    assert label == 3
    label = doa_label(math.radians(20), 0.0, list(reversed(grid)))
    assert label == 3


def test_doa_label_nearest_on_ring_matches_bruteforce():
    grid = ring_grid()

    def haversine(az1, el1, az2, el2):
        dlat = el2 - el1
        dlon = az2 - az1
        h = math.sin(dlat / 2) ** 2 + math.cos(el1) * math.cos(el2) * math.sin(dlon / 2) ** 2
        return 2 * math.asin(min(1.0, math.sqrt(h)))

    rng = np.random.default_rng(5)
    for _ in range(200):
        az = rng.uniform(0, 2 * math.pi)
        el = rng.uniform(-0.3, 0.3)
        expected = min(grid, key=lambda d: (haversine(az, el, d.azimuth, d.elevation), d.label))
        assert doa_label(az, el, grid) == expected.label
    assert doa_label(0.01, 0.0, grid) == 0


def test_doa_label_empty_grid():
    with pytest.raises(ConfigurationError):
        doa_label(0.0, 0.0, [])


def test_angular_distance_basics():
    assert angular_distance(0, 0, 0, 0) == 0.0
    assert angular_distance(0, 0, math.pi, 0) == pytest.approx(math.pi)
    assert angular_distance(1.0, math.pi / 2, 4.0, math.pi / 2) == pytest.approx(0.0)


def test_doa_validation():
    with pytest.raises(Exception):
        Doa(azimuth=-0.1, elevation=0.0, label=0)
    with pytest.raises(Exception):
        Doa(azimuth=0.0, elevation=2.0, label=0)


# ---------------------------------------------------------------------------
# folds


def test_folds_93_subjects():
    ids = list(range(1, 94))
    folds = make_loocv_folds(ids, val_count=9, seed=0)
    assert len(folds) == 93
    for fold in folds:
        assert len(fold.train_subjects) == 83
        assert len(fold.val_subjects) == 9


def test_folds_three_subjects_no_val():
    folds = make_loocv_folds([1, 2, 3], val_count=0, seed=0)
    assert [f.test_subject for f in folds] == [1, 2, 3]
    for fold in folds:
        assert len(fold.train_subjects) == 2
        assert fold.val_subjects == ()


def test_folds_deterministic():
    a = make_loocv_folds(list(range(20)), val_count=4, seed=42)
    b = make_loocv_folds(list(range(20)), val_count=4, seed=42)
    assert a == b
    c = make_loocv_folds(list(range(20)), val_count=4, seed=43)
    assert a != c


def test_folds_partition_exhaustively():
    ids = list(range(17))
    for fold in make_loocv_folds(ids, val_count=3, seed=9):
        combined = {fold.test_subject, *fold.train_subjects, *fold.val_subjects}
        assert combined == set(ids)
        assert len(fold.train_subjects) + len(fold.val_subjects) + 1 == len(ids)


def test_folds_val_count_too_large():
    with pytest.raises(ConfigurationError):
        make_loocv_folds([1, 2, 3], val_count=2, seed=0)


def test_fold_disjointness_enforced():
    with pytest.raises(ConfigurationError):
        DatasetFold(test_subject=1, train_subjects=(1, 2), val_subjects=(3,))


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(min_value=3, max_value=40),
    val=st.integers(min_value=0, max_value=10),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_folds_property(n, val, seed):
    ids = list(range(100, 100 + n))
    if val >= n - 1:
        with pytest.raises(ConfigurationError):
            make_loocv_folds(ids, val, seed)
        return
    folds = make_loocv_folds(ids, val, seed)
    assert [f.test_subject for f in folds] == ids
    for fold in folds:
        assert {fold.test_subject, *fold.train_subjects, *fold.val_subjects} == set(ids)


# ---------------------------------------------------------------------------
# store


def test_store_exposes_grid_and_anthro(store):
    assert store.grid_size == 6
    assert store.sample_rate == 44100.0
    assert [d.label for d in store.doa_grid] == list(range(6))
    anthro = store.anthro(1)
    assert anthro.values.shape == (N_FEATURES,)
    record = store.subject(1)
    assert record.grid_size == 6
    assert record.hrir_length == 64
    assert store.subject(1) is record  # cached


def test_store_missing_subject(store):
    with pytest.raises(KeyError):
        store.anthro(99)
