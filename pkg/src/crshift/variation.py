"""Normalized Variation Index, variation-level classification and boundary calibration.

NVI for a period starting on day ``d`` is the pooled conversion rate over
``[d, d + short_days - 1]`` divided by the pooled rate over the preceding
``long_days`` days.  The numerator looks ahead of ``d``: NVI labels test
periods after the fact and must never feed model features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import CalibrationError, DegenerateMetricError, InsufficientDataError
from .events import DailyAdvertiserStats

CALIBRATION_QUANTILES = (0.20, 0.25, 0.75, 0.80)
MIN_CALIBRATION_SAMPLES = 100


class VariationLevel(str, Enum):
    MODERATE = "moderate"
    AVERAGE = "average"
    EXTREME = "extreme"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class NviConfig:
    short_days: int = 7
    long_days: int = 30
    boundaries: tuple[float, float, float, float] = (0.05, 0.07, 0.29, 0.34)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        if self.short_days < 1 or self.long_days < 1:
            raise ValueError("NVI windows must be positive")
        _check_order(self.boundaries)

    @property
    def moderate_max(self) -> float:
        return self.boundaries[0]

    @property
    def average_min(self) -> float:
        return self.boundaries[1]

    @property
    def average_max(self) -> float:
        return self.boundaries[2]

    @property
    def extreme_min(self) -> float:
        return self.boundaries[3]

    def to_dict(self) -> dict:
        return {"short_days": self.short_days, "long_days": self.long_days, "boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, d: dict) -> "NviConfig":
        return cls(**d)


def _check_order(b, error=ValueError) -> None:
    if len(b) != 4 or not (b[0] < b[1] <= b[2] < b[3]):
        raise error(f"boundaries must satisfy moderate_max < average_min <= average_max < extreme_min, got {b}")


def nvi(stats: DailyAdvertiserStats, advertiser, day: int, config: NviConfig = NviConfig(),
        short_days: int | None = None) -> float:
    """Ratio of the period's pooled CR to the preceding ``long_days`` pooled CR."""
    short_days = config.short_days if short_days is None else short_days
    e_num, c_num = stats.window_totals(advertiser, day, day + short_days - 1)
    e_den, c_den = stats.window_totals(advertiser, day - config.long_days, day - 1)
    if e_num == 0 or e_den == 0:
        raise InsufficientDataError(f"no events for {advertiser!r} in an NVI window around day {day}")
    if c_den == 0:
        raise DegenerateMetricError(f"no conversions for {advertiser!r} in [{day - config.long_days}, {day - 1}]")
    return (c_num / e_num) / (c_den / e_den)


def extremeness(v: float) -> float:
    """Distance ``|1 - v|`` of an NVI value from the no-variation point."""
    if v < 0:
        raise ValueError("NVI must be nonnegative")
    return abs(1.0 - v)


def classify_variation(v: float, config: NviConfig = NviConfig()) -> VariationLevel:
    """Map an NVI value to its level; values in the gaps between ranges are unclassified."""
    e = extremeness(v)
    if e <= config.moderate_max:
        return VariationLevel.MODERATE
    if config.average_min <= e <= config.average_max:
        return VariationLevel.AVERAGE
    if e >= config.extreme_min:
        return VariationLevel.EXTREME
    return VariationLevel.UNCLASSIFIED


@dataclass(frozen=True)
class NviPoint:
    advertiser: str
    day: int
    nvi: float
    extremeness: float
    level: VariationLevel


def nvi_series(stats: DailyAdvertiserStats, advertiser, config: NviConfig = NviConfig(),
               days: Iterable[int] | None = None) -> list[NviPoint]:
    """Every evaluable NVI point for ``advertiser``; non-evaluable days are skipped."""
    if days is None:
        days = range(stats.first_day + config.long_days, stats.last_day - config.short_days + 2)
    d = np.asarray(list(days), dtype=np.int64)
    if d.size == 0:
        return []
    e_num, c_num = stats.window_totals_array(advertiser, d, d + config.short_days - 1)
    e_den, c_den = stats.window_totals_array(advertiser, d - config.long_days, d - 1)
    # windows must lie inside the stats range to count as evaluable
    inside = (d - config.long_days >= stats.first_day) & (d + config.short_days - 1 <= stats.last_day)
    ok = inside & (e_num > 0) & (e_den > 0) & (c_den > 0)
    points = []
    for i in np.flatnonzero(ok):
        v = (c_num[i] / e_num[i]) / (c_den[i] / e_den[i])
        points.append(NviPoint(str(advertiser), int(d[i]), float(v), abs(1.0 - v), classify_variation(v, config)))
    return points


def nearest_rank_quantile(sorted_values: np.ndarray, q: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(round(q * n, 9)))
    return float(sorted_values[rank - 1])


def calibrate_boundaries(stats: DailyAdvertiserStats, config: NviConfig = NviConfig(),
                         extremeness_values=None) -> NviConfig:
    """Set boundaries to the nearest-rank 0.20/0.25/0.75/0.80 quantiles of extremeness.

    Extremeness is collected over every evaluable (advertiser, day); pass
    ``extremeness_values`` to calibrate on a precomputed sample instead.
    """
    if extremeness_values is None:
        extremeness_values = [p.extremeness for a in stats.advertisers for p in nvi_series(stats, a, config)]
    e = np.sort(np.asarray(extremeness_values, dtype=np.float64))
    if e.size < MIN_CALIBRATION_SAMPLES:
        raise CalibrationError(f"need >= {MIN_CALIBRATION_SAMPLES} NVI evaluations, got {e.size}")
    bounds = tuple(nearest_rank_quantile(e, q) for q in CALIBRATION_QUANTILES)
    _check_order(bounds, CalibrationError)
    return NviConfig(config.short_days, config.long_days, bounds)


NVI_COLUMNS = ("advertiser", "day", "nvi", "extremeness", "level")


def write_nvi_csv(points: Iterable[NviPoint], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(NVI_COLUMNS)
    for p in points:
        writer.writerow([p.advertiser, p.day, repr(p.nvi), repr(p.extremeness), p.level.value])
