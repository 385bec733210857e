import io

import numpy as np
import pytest

from crshift.errors import CalibrationError, DegenerateMetricError, InsufficientDataError
from crshift.events import daily_advertiser_stats, log_from_records
from crshift.variation import (
    NviConfig,
    VariationLevel,
    calibrate_boundaries,
    classify_variation,
    extremeness,
    nearest_rank_quantile,
    nvi,
    nvi_series,
    write_nvi_csv,
)
from crshift.synthgen import generate_log
from tests.conftest import make_event, small_sim


def stats_from_counts(counts):
    """counts: {day: (events, conversions)} for advertiser 'a'."""
    recs = []
    for day, (n, c) in sorted(counts.items()):
        recs += [make_event(day, float(i), label=1 if i < c else -1) for i in range(n)]
    return daily_advertiser_stats(log_from_records(recs))


def test_nvi_ratio():
    counts = {d: (100, 1) for d in range(30)}
    counts.update({d: (100, 2) for d in range(30, 37)})
    stats = stats_from_counts(counts)
    assert nvi(stats, "a", 30) == pytest.approx(2.0)
    flat = stats_from_counts({d: (50, 5) for d in range(40)})
    assert nvi(flat, "a", 30) == pytest.approx(1.0)


def test_nvi_short_over_long_ratio_example():
    counts = {d: (1000, 10) for d in range(30)}
    counts.update({d: (1000, 12) for d in range(30, 37)})
    assert nvi(stats_from_counts(counts), "a", 30) == pytest.approx(1.2)


def test_nvi_errors():
    stats = stats_from_counts({d: (10, 0) for d in range(40)})
    with pytest.raises(DegenerateMetricError):
        nvi(stats, "a", 30)
    with pytest.raises(InsufficientDataError):
        nvi(stats, "zz", 30)


@pytest.mark.parametrize("v,level", [
    (0.6, VariationLevel.EXTREME), (1.0, VariationLevel.MODERATE), (0.94, VariationLevel.UNCLASSIFIED),
    (1.2, VariationLevel.AVERAGE), (1.04, VariationLevel.MODERATE), (1.3, VariationLevel.UNCLASSIFIED),
    (1.34, VariationLevel.EXTREME), (0.0, VariationLevel.EXTREME),
])
def test_classification(v, level):
    assert classify_variation(v) is level


def test_extremeness():
    assert extremeness(1.0) == 0
    assert extremeness(0.5) == 0.5
    with pytest.raises(ValueError):
        extremeness(-0.1)


def test_config_ordering():
    with pytest.raises(ValueError):
        NviConfig(boundaries=(0.1, 0.05, 0.3, 0.4))


def test_nearest_rank_grid():
    e = np.arange(1, 101) / 100
    assert [nearest_rank_quantile(e, q) for q in (0.2, 0.25, 0.75, 0.8)] == [0.20, 0.25, 0.75, 0.80]
    cfg = calibrate_boundaries(None, extremeness_values=e)
    assert cfg.boundaries == (0.20, 0.25, 0.75, 0.80)


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate_boundaries(None, extremeness_values=[0.1] * 200)
    with pytest.raises(CalibrationError):
        calibrate_boundaries(None, extremeness_values=np.linspace(0, 1, 50))


def test_calibrated_shares():
    log = generate_log(small_sim(n_days=90, shift=((40, 50, 1.5), (70, 80, 0.7))))
    stats = daily_advertiser_stats(log)
    cfg = NviConfig()
    values = [p.extremeness for a in stats.advertisers for p in nvi_series(stats, a, cfg)]
    cal = calibrate_boundaries(stats, cfg)
    levels = [classify_variation(1 + e, cal) for e in values]
    assert abs(levels.count(VariationLevel.MODERATE) / len(values) - 0.2) <= 0.03
    assert abs(levels.count(VariationLevel.EXTREME) / len(values) - 0.2) <= 0.03


def test_series_matches_pointwise(small_prep):
    stats = small_prep.stats
    pts = nvi_series(stats, "a")
    assert pts and all(p.day >= stats.first_day + 30 for p in pts)
    for p in pts:
        assert p.nvi == pytest.approx(nvi(stats, "a", p.day))
    buf = io.StringIO()
    write_nvi_csv(pts[:2], buf)
    assert buf.getvalue().splitlines()[0] == "advertiser,day,nvi,extremeness,level"
