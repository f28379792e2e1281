"""Grid containers: registry, normalization, crop geometry, synthetic fields,
and the on-disk format."""

import json
import struct

import numpy as np
import pytest

from vartex import griddata as gd
from vartex.errors import (
    BadMagic,
    ConstantChannel,
    EmptySeries,
    HeaderCorrupt,
    IndivisibleGrid,
    NonFiniteInput,
    PayloadTruncated,
    ShapeMismatch,
    VariableCountMismatch,
    VersionMismatch,
)


def _series(T=4, V=2, H=4, W=8, seed=0, stats=None):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((T, V, H, W)).astype(np.float32)
    return gd.GridSeries(data, np.arange(T) * 6, gd.default_latitudes(H),
                         gd.VariableRegistry.synthetic(V), stats=stats)


# -- registry --------------------------------------------------------------------


def test_default_registry_has_47_channels():
    reg = gd.VariableRegistry.default()
    assert len(reg) == 47
    names = reg.names()
    assert names[:5] == list(gd.SURFACE_VARIABLES)
    assert "geopotential_500" in names
    assert "temperature_850" in names
    assert reg.index("geopotential", 500) == names.index("geopotential_500")
    assert reg.index_of_label("temperature_850") == names.index("temperature_850")


def test_registry_lookup_errors():
    reg = gd.VariableRegistry.default()
    with pytest.raises(KeyError):
        reg.index("no_such_field")
    with pytest.raises(KeyError):
        reg.index_of_label("geopotential_123")


def test_registry_rejects_duplicates():
    with pytest.raises(ValueError):
        gd.VariableRegistry((("t", None), ("t", None)))


def test_registry_json_round_trip():
    reg = gd.VariableRegistry.default()
    again = gd.VariableRegistry.from_json(json.loads(json.dumps(reg.to_json())))
    assert again.entries == reg.entries


def test_synthetic_registry_labels():
    reg = gd.VariableRegistry.synthetic(3)
    assert reg.names() == ["channel_00", "channel_01", "channel_02"]


# -- normalization ---------------------------------------------------------------


def test_fit_standardizer_two_point_channel():
    # values {1, 3}: mean 2, population std 1, so standardized values are -1/+1
    data = np.zeros((2, 1, 2, 2), dtype=np.float32)
    data[0] = 1.0
    data[1] = 3.0
    stats = gd.fit_standardizer(data)
    assert stats.mean[0] == 2.0
    assert stats.std[0] == 1.0
    z = stats.standardize(data[0])
    assert np.array_equal(z, np.full((1, 2, 2), -1.0, dtype=np.float32))


def test_fit_standardizer_matches_numpy_population_moments(rng):
    data = rng.standard_normal((6, 3, 4, 5)) * 7.0 + 2.0
    stats = gd.fit_standardizer(data)
    assert np.allclose(stats.mean, data.mean(axis=(0, 2, 3)), atol=1e-10)
    assert np.allclose(stats.std, data.std(axis=(0, 2, 3)), atol=1e-10)


def test_fit_standardizer_rejects_constant_channel():
    data = np.random.default_rng(0).standard_normal((4, 2, 3, 3))
    data[:, 1] = 5.0
    with pytest.raises(ConstantChannel):
        gd.fit_standardizer(data)


def test_fit_standardizer_needs_two_steps():
    with pytest.raises(EmptySeries):
        gd.fit_standardizer(np.ones((1, 2, 3, 3)))


def test_stats_round_trip(rng):
    stats = gd.NormStats(np.array([1.0, -2.0]), np.array([3.0, 0.5]))
    x = rng.standard_normal((2, 4, 4)).astype(np.float32)
    back = stats.destandardize(stats.standardize(x))
    assert np.allclose(back, x, atol=1e-5)
    again = gd.NormStats.from_json(stats.to_json())
    assert np.array_equal(again.mean, stats.mean)
    assert np.array_equal(again.std, stats.std)


def test_stats_reject_nonpositive_std():
    with pytest.raises(ConstantChannel):
        gd.NormStats(np.zeros(2), np.array([1.0, 0.0]))


# -- regions and crops -------------------------------------------------------------


def test_region_extract_and_validate():
    r = gd.Region(1, 2, 2, 3)
    x = np.arange(4 * 8).reshape(4, 8)
    assert np.array_equal(r.extract(x), x[1:3, 2:5])
    r.validate(4, 8)
    with pytest.raises(ShapeMismatch):
        gd.Region(3, 0, 2, 8).validate(4, 8)
    with pytest.raises(ShapeMismatch):
        gd.Region(0, 5, 4, 4).validate(4, 8)
    assert gd.Region.full(4, 8) == gd.Region(0, 0, 4, 8)


@pytest.mark.parametrize("H,W,S", [(8, 8, 1), (8, 8, 2), (32, 64, 4), (64, 128, 8)])
def test_canonical_crops_tile_exactly_once(H, W, S):
    crops = gd.canonical_crops(H, W, S)
    assert len(crops) == S * S
    hits = np.zeros((H, W), dtype=int)
    for r in crops:
        assert r.height == H // S and r.width == W // S
        hits[r.rows, r.cols] += 1
    assert (hits == 1).all()


def test_canonical_crops_row_major_order():
    crops = gd.canonical_crops(4, 4, 2)
    assert [(r.row_off, r.col_off) for r in crops] == [(0, 0), (0, 2), (2, 0), (2, 2)]


def test_canonical_crops_errors():
    with pytest.raises(IndivisibleGrid):
        gd.canonical_crops(32, 64, 3)
    with pytest.raises(IndivisibleGrid):
        gd.canonical_crops(32, 64, 0)
    with pytest.raises(IndivisibleGrid):
        gd.canonical_crops(8, 8, 2, patch_size=3)   # 4x4 crop, patch 3


def test_random_crop_seed_determinism():
    a = gd.random_crop(32, 64, 4, rng=123)
    b = gd.random_crop(32, 64, 4, rng=123)
    assert a == b


def test_random_crop_covers_all_positions():
    rng = np.random.default_rng(5)
    counts = {}
    for _ in range(10_000):
        r = gd.random_crop(8, 8, 2, rng=rng)
        counts[(r.row_off, r.col_off)] = counts.get((r.row_off, r.col_off), 0) + 1
    assert set(counts) == {(0, 0), (0, 4), (4, 0), (4, 4)}
    for n in counts.values():
        assert abs(n - 2500) < 250   # ~5.8 sigma for a fair draw


# -- series validation --------------------------------------------------------------


def test_series_rejects_bad_inputs():
    reg = gd.VariableRegistry.synthetic(2)
    lats = gd.default_latitudes(4)
    good = np.zeros((3, 2, 4, 8), dtype=np.float32)
    with pytest.raises(ShapeMismatch):
        gd.GridSeries(good[0], [0, 6, 12], lats, reg)
    bad = good.copy()
    bad[1, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteInput):
        gd.GridSeries(bad, [0, 6, 12], lats, reg)
    with pytest.raises(VariableCountMismatch):
        gd.GridSeries(good, [0, 6, 12], lats, gd.VariableRegistry.synthetic(3))
    with pytest.raises(ValueError):
        gd.GridSeries(good, [0, 12, 6], lats, reg)
    with pytest.raises(ValueError):
        gd.GridSeries(good, [0, 6, 18], lats, reg)
    with pytest.raises(ShapeMismatch):
        gd.GridSeries(good, [0, 6, 12], lats[:3], reg)
    with pytest.raises(ValueError):
        gd.GridSeries(good, [0, 6, 12], lats + 80.0, reg)
    with pytest.raises(ValueError):
        gd.GridSeries(good, [0, 6, 12], np.array([0.0, 10.0, 5.0, 20.0]), reg)


def test_series_step_and_lead():
    s = _series(T=10)
    assert s.step_hours == 6
    assert s.lead_steps(6) == 1
    assert s.lead_steps(24) == 4
    with pytest.raises(ValueError):
        s.lead_steps(9)
    with pytest.raises(ValueError):
        s.lead_steps(6 * 10)
    one = s.subseries(0, 1)
    with pytest.raises(EmptySeries):
        _ = one.step_hours


def test_subseries_keeps_metadata():
    s = _series(T=6)
    sub = s.subseries(2, 5)
    assert len(sub) == 3
    assert np.array_equal(sub.timestamps, s.timestamps[2:5])
    assert sub.registry is s.registry
    assert np.array_equal(sub.data, s.data[2:5])


def test_default_latitudes_grid():
    lats = gd.default_latitudes(32)
    assert lats[0] == -90.0 + 0.5 * 5.625
    assert np.allclose(np.diff(lats), 5.625)
    assert np.allclose(lats, -lats[::-1])   # symmetric about the equator


# -- synthetic generator -------------------------------------------------------------


def test_synthetic_is_deterministic():
    a = gd.generate_synthetic(gd.SynthConfig(num_variables=3, height=8, width=8, steps=12, seed=9))
    b = gd.generate_synthetic(gd.SynthConfig(num_variables=3, height=8, width=8, steps=12, seed=9))
    assert np.array_equal(a.data, b.data)
    assert a.data.dtype == np.float32


def test_synthetic_zero_advection_freezes_fields():
    cfg = gd.SynthConfig(num_variables=2, height=8, width=8, steps=5, seed=3,
                         advection_speed=0.0)
    s = gd.generate_synthetic(cfg)
    for t in range(1, 5):
        assert np.array_equal(s.data[t], s.data[0])


def test_synthetic_single_step_skips_standardization():
    s = gd.generate_synthetic(gd.SynthConfig(num_variables=2, height=8, width=8, steps=1))
    assert len(s) == 1
    assert s.stats is None


def test_synthetic_fit_window_is_standardized():
    cfg = gd.SynthConfig(num_variables=4, height=8, width=16, steps=64, seed=1,
                         stats_fraction=0.5)
    s = gd.generate_synthetic(cfg)
    n_fit = 32
    head = s.data[:n_fit].astype(np.float64)
    assert np.abs(head.mean(axis=(0, 2, 3))).max() < 1e-3
    assert np.abs(head.std(axis=(0, 2, 3)) - 1.0).max() < 1e-3
    assert s.stats is not None


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        gd.SynthConfig(num_variables=0)
    with pytest.raises(ValueError):
        gd.SynthConfig(steps=0)
    with pytest.raises(ValueError):
        gd.SynthConfig(stats_fraction=0.0)


# -- file format ---------------------------------------------------------------------


def test_grid_file_round_trip(tmp_path):
    stats = gd.NormStats(np.array([0.5, -1.0]), np.array([2.0, 3.0]))
    s = _series(T=5, V=2, H=4, W=8, seed=2, stats=stats)
    path = tmp_path / "s.vtxg"
    gd.write_grid(path, s)
    back = gd.read_grid(path)
    assert np.array_equal(back.data, s.data)          # bit-exact payload
    assert np.array_equal(back.timestamps, s.timestamps)
    assert np.array_equal(back.latitudes, s.latitudes)
    assert back.registry.entries == s.registry.entries
    assert np.array_equal(back.stats.mean, stats.mean)
    assert np.array_equal(back.stats.std, stats.std)


def test_grid_file_write_is_deterministic(tmp_path):
    s = _series(seed=4)
    p1, p2 = tmp_path / "a.vtxg", tmp_path / "b.vtxg"
    gd.write_grid(p1, s)
    gd.write_grid(p2, s)
    assert p1.read_bytes() == p2.read_bytes()


def test_read_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.vtxg"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(BadMagic):
        gd.read_grid(p)


def test_read_rejects_wrong_version(tmp_path):
    s = _series()
    p = tmp_path / "x.vtxg"
    gd.write_grid(p, s)
    blob = bytearray(p.read_bytes())
    blob[4] = 99
    p.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        gd.read_grid(p)


def test_read_rejects_corrupt_header(tmp_path):
    p = tmp_path / "x.vtxg"
    # header length runs past the end of the file
    p.write_bytes(gd.MAGIC + bytes([gd.FORMAT_VERSION]) + struct.pack("<I", 10_000) + b"{}")
    with pytest.raises(HeaderCorrupt):
        gd.read_grid(p)
    # header present but not JSON
    junk = b"\xff\xfe\x00junk"
    p.write_bytes(gd.MAGIC + bytes([gd.FORMAT_VERSION]) + struct.pack("<I", len(junk)) + junk)
    with pytest.raises(HeaderCorrupt):
        gd.read_grid(p)
    # valid JSON missing required fields
    doc = json.dumps({"dims": {"T": 1}}).encode()
    p.write_bytes(gd.MAGIC + bytes([gd.FORMAT_VERSION]) + struct.pack("<I", len(doc)) + doc)
    with pytest.raises(HeaderCorrupt):
        gd.read_grid(p)


def test_read_rejects_truncated_payload(tmp_path):
    s = _series(T=3, V=2, H=4, W=8)
    p = tmp_path / "x.vtxg"
    gd.write_grid(p, s)
    blob = p.read_bytes()
    p.write_bytes(blob[:-17])
    with pytest.raises(PayloadTruncated) as exc:
        gd.read_grid(p)
    assert exc.value.expected == 3 * 2 * 4 * 8 * 4
    assert exc.value.actual == exc.value.expected - 17


def test_series_manifest_shape():
    s = _series(T=3, V=2, H=4, W=8)
    man = gd.series_manifest(s)
    assert man["dims"] == {"T": 3, "V": 2, "H": 4, "W": 8}
    assert man["variables"] == ["channel_00", "channel_01"]
    assert man["stats"] is None
    assert man["latitude_range"][0] < 0 < man["latitude_range"][1]
