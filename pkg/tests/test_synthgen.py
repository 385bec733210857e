import warnings

import numpy as np
import pytest

from crshift.events import daily_advertiser_stats, serialize_event_log
from crshift.synthgen import (
    AdvertiserProfile,
    GeneratorWarning,
    SimConfig,
    generate_log,
    product_catalog,
    shift_heavy_preset,
    table1_preset,
)
from crshift.variation import nvi
from tests.conftest import small_sim


def test_deterministic(small_log):
    assert serialize_event_log(generate_log(small_sim())) == serialize_event_log(small_log)
    assert serialize_event_log(generate_log(small_sim(seed=6))) != serialize_event_log(small_log)


def test_profiles_are_independent():
    a = generate_log(small_sim())
    cfg = small_sim()
    changed = SimConfig(cfg.day_range, (cfg.profiles[0], AdvertiserProfile("b", 300, 0.02)), cfg.seed)
    b = generate_log(changed)
    fa, fb = a.frame, b.frame
    ra = fa[fa.advertiser_id == "a"].reset_index(drop=True)
    rb = fb[fb.advertiser_id == "a"].reset_index(drop=True)
    assert ra.astype(str).equals(rb.astype(str))


def test_volume_and_rate(small_log):
    stats = daily_advertiser_stats(small_log)
    n, c = stats.window_totals("b", 0, 39)
    assert n == pytest.approx(250 * 40, rel=0.03)
    assert c / n == pytest.approx(0.08, abs=4 * np.sqrt(0.08 * 0.92 / n) + 0.005)


def test_shift_measured_by_nvi(small_log):
    stats = daily_advertiser_stats(small_log)
    v = nvi(stats, "a", 30)
    assert 1.5 < v < 2.5
    assert abs(nvi(stats, "b", 30) - 1) < 0.3


def test_catalog_is_fixed_per_product():
    prices, cat = product_catalog("a", {"product_id": 5, "brand": 3}, 1)
    p2, c2 = product_catalog("a", {"product_id": 5, "brand": 3}, 1)
    assert np.array_equal(prices, p2) and np.array_equal(cat["brand"], c2["brand"])
    assert np.all((prices >= 5) & (prices <= 200))


def test_clamp_warning():
    prof = AdvertiserProfile("x", 200, 0.5, feature_effects={"device_type=device_type_0": 40.0})
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        generate_log(SimConfig((0, 2), (prof,), 1))
    assert any(issubclass(w.category, GeneratorWarning) for w in rec)


def test_profile_validation():
    with pytest.raises(ValueError):
        AdvertiserProfile("x", 0, 0.1)
    with pytest.raises(ValueError):
        AdvertiserProfile("x", 10, 0.6, shift_schedule=((0, 1, 2.0),))
    with pytest.raises(ValueError):
        SimConfig((0, 5), (AdvertiserProfile("x", 10, 0.1, shift_schedule=((3, 9, 1.2),)),))


def test_config_roundtrip(tmp_path):
    cfg = table1_preset()
    cfg.save(tmp_path / "c.json")
    assert SimConfig.load(tmp_path / "c.json") == cfg
    assert len(cfg.profiles) == 5 and cfg.day_range == (0, 89)
    sh = shift_heavy_preset()
    assert all(len(p.shift_schedule) >= 7 for p in sh.profiles)
