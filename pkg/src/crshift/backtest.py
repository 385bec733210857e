"""Longitudinal train-daily / score-daily evaluation, condition studies and sweeps.

For every test day ``d`` each model is trained on days strictly before ``d``
and scores the events of day ``d``.  Per-event NLL terms are reduced to
per-(advertiser, day) partial sums; every report cell is an exact
``math.fsum`` over those partials, so period NLLs are sums (not averages)
and the global cell equals the sum of its advertiser cells.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateMetricError,
    InsufficientDataError,
    LeakageError,
)
from .events import EventLog
from .metrics import llhn, llhn_uplift, naive_nll_from_counts, nll_terms
from .models import ModelKind, ModelSpec, PreparedLog, TrainedModel, component_probabilities, mix, train_model
from .variation import NviConfig, VariationLevel, classify_variation, extremeness, nvi, nvi_series

logger = logging.getLogger(__name__)

GLOBAL_SCOPE = "global"
SWEEP_PERIODS = 5


def default_model_specs(**overrides) -> tuple[tuple[str, ModelSpec], ...]:
    """One spec per model kind, named after the kind."""
    return tuple((k.value, ModelSpec(kind=k, **overrides)) for k in ModelKind)


@dataclass(frozen=True)
class BacktestConfig:
    test_days: tuple[int, int]
    model_specs: tuple[tuple[str, ModelSpec], ...] = field(default_factory=default_model_specs)
    baseline_name: str = "baseline"
    nvi: NviConfig = field(default_factory=NviConfig)
    per_advertiser: bool = True
    min_test_events_per_cell: int = 50
    period_days: int = 7

    def __post_init__(self):
        object.__setattr__(self, "test_days", tuple(self.test_days))
        object.__setattr__(self, "model_specs", tuple((n, s) for n, s in self.model_specs))
        names = [n for n, _ in self.model_specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names {names}")
        if self.baseline_name not in names:
            raise ConfigError(f"baseline {self.baseline_name!r} is not among the model specs {names}")
        if self.test_days[0] > self.test_days[1]:
            raise ConfigError(f"empty test range {self.test_days}")
        if self.period_days < 1 or self.min_test_events_per_cell < 0:
            raise ConfigError("period_days must be positive and min_test_events_per_cell nonnegative")

    @property
    def specs(self) -> dict[str, ModelSpec]:
        return dict(self.model_specs)

    @property
    def max_window(self) -> int:
        return max(s.long_window_days for _, s in self.model_specs)

    def check_history(self, log: EventLog, first_test_day: int | None = None) -> None:
        if log.day_range is None:
            raise ConfigError("event log is empty")
        first = self.test_days[0] if first_test_day is None else first_test_day
        if first - self.max_window < log.day_range[0]:
            raise ConfigError(
                f"test day {first} leaves fewer than {self.max_window} days of history "
                f"(log starts on day {log.day_range[0]})"
            )

    def to_dict(self) -> dict:
        return {
            "test_days": list(self.test_days),
            "models": [{"name": n, "spec": s.to_dict()} for n, s in self.model_specs],
            "baseline": self.baseline_name,
            "nvi": self.nvi.to_dict(),
            "per_advertiser": self.per_advertiser,
            "min_test_events_per_cell": self.min_test_events_per_cell,
            "period_days": self.period_days,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BacktestConfig":
        kw = {"test_days": tuple(d["test_days"])}
        if "models" in d:
            kw["model_specs"] = tuple((m["name"], ModelSpec.from_dict(m.get("spec", {}))) for m in d["models"])
        if "baseline" in d:
            kw["baseline_name"] = d["baseline"]
        if "nvi" in d:
            kw["nvi"] = NviConfig.from_dict(d["nvi"])
        for key in ("per_advertiser", "min_test_events_per_cell", "period_days"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)


class Scorer:
    """Trains models per test day and keeps per-(advertiser, day) NLL partial sums.

    Trained weights are keyed by :attr:`ModelSpec.training_key`, so specs that
    differ only in mixing weight share one training and an unchanged
    baseline is trained once across a sweep.
    """

    def __init__(self, log: EventLog | PreparedLog, jobs: int = 1, keep_models: bool = False):
        self.keep_models = keep_models
        self.models: dict[tuple[str, int], TrainedModel] = {}
        self.prep = log if isinstance(log, PreparedLog) else PreparedLog(log)
        self.jobs = max(1, int(jobs))
        self.n_adv = len(self.prep.adv_names)
        self._components: dict[tuple[str, int], list[np.ndarray]] = {}
        self._counts: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._partials: dict[tuple[str, float, int], np.ndarray] = {}
        self.trainings: list[tuple[int, str]] = []
        self.skipped_days: list[int] = []

    @property
    def advertisers(self) -> list[str]:
        return [str(a) for a in self.prep.adv_names]

    def day_rows(self, day: int) -> tuple[int, int]:
        return self.prep.bounds(day, day)

    def counts(self, day: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-advertiser (events, conversions) on ``day``."""
        if day not in self._counts:
            s, e = self.day_rows(day)
            codes = self.prep.adv_codes[s:e]
            pos = self.prep.labels[s:e] == 1
            self._counts[day] = (
                np.bincount(codes, minlength=self.n_adv),
                np.bincount(codes, weights=pos, minlength=self.n_adv).astype(np.int64),
            )
        return self._counts[day]

    def _train_and_score(self, spec: ModelSpec, day: int) -> list[np.ndarray]:
        s, e = self.day_rows(day)
        model = train_model(self.prep, spec, day)
        for w_lo, w_hi in model.windows:
            if w_hi >= day:
                raise LeakageError(f"model for day {day} trained through day {w_hi}")
        if self.keep_models:
            self.models[(spec.training_key, day)] = model
        stats = self.prep.stats.truncated(day) if spec.kind is ModelKind.HCRFM else None
        return component_probabilities(model, self.prep, s, e, stats)

    def ensure(self, specs: Iterable[ModelSpec], days: Iterable[int]) -> None:
        """Train and score every missing (spec, day) pair."""
        todo = []
        seen = set()
        for day in sorted(set(days)):
            s, e = self.day_rows(day)
            if e == s:
                if day not in self.skipped_days:
                    logger.info("day %d has no test events; skipped", day)
                    self.skipped_days.append(day)
                continue
            for spec in specs:
                key = (spec.training_key, day)
                if key not in self._components and key not in seen:
                    seen.add(key)
                    todo.append((key, spec, day))
        for spec in {t[1].encoder.fingerprint(): t[1] for t in todo}.values():
            self.prep.encoded(spec.encoder)  # encode once before any worker threads start
        if todo:
            self.prep.stats
        if self.jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                results = list(pool.map(lambda t: self._train_and_score(t[1], t[2]), todo))
        else:
            results = [self._train_and_score(spec, day) for _, spec, day in todo]
        for (key, spec, day), comps in zip(todo, results):
            self._components[key] = comps
            self.trainings.append((day, spec.kind.value))

    def probabilities(self, spec: ModelSpec, day: int) -> np.ndarray:
        self.ensure([spec], [day])
        return mix(self._components[(spec.training_key, day)], spec.alpha)

    def partials(self, spec: ModelSpec, day: int) -> np.ndarray:
        """Per-advertiser NLL sums of ``spec`` on ``day``."""
        key = (spec.training_key, spec.alpha, day)
        if key in self._partials:
            return self._partials[key]
        s, e = self.day_rows(day)
        if e == s:
            return np.zeros(self.n_adv)
        terms = nll_terms(self.probabilities(spec, day), self.prep.labels[s:e])
        out = np.bincount(self.prep.adv_codes[s:e], weights=terms, minlength=self.n_adv)
        self._partials[key] = out
        return out


@dataclass(frozen=True)
class CellMetrics:
    nll: float | None
    naive_nll: float | None
    llhn: float | None
    n_events: int
    n_conversions: int
    status: str


def cell_metrics(model_partials: Sequence[float], n_events: int, n_conv: int, min_events: int) -> CellMetrics:
    if n_events == 0 or n_events < min_events:
        return CellMetrics(None, None, None, n_events, n_conv, "insufficient_data")
    model = math.fsum(model_partials)
    naive = naive_nll_from_counts(n_events, n_conv)
    try:
        value = llhn(model, naive)
    except DegenerateMetricError:
        return CellMetrics(model, naive, None, n_events, n_conv, "degenerate")
    return CellMetrics(model, naive, value, n_events, n_conv, "ok")


REPORT_COLUMNS = (
    "advertiser", "period_start", "period_days", "model", "nll", "naive_nll", "llhn", "llhn_uplift",
    "nvi", "extremeness", "level", "n_events", "n_conversions", "status",
)


@dataclass(frozen=True)
class ReportRow:
    scope: str
    period_start: int
    period_days: int
    model: str
    nll: float | None
    naive_nll: float | None
    llhn: float | None
    llhn_uplift: float | None
    nvi: float | None
    level: str | None
    n_events: int
    n_conversions: int
    status: str

    @property
    def extremeness(self) -> float | None:
        return None if self.nvi is None else abs(1.0 - self.nvi)

    def as_record(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        uplift = fmt(self.llhn_uplift)
        if self.llhn_uplift is None and self.status == "undefined_uplift":
            uplift = "undefined"
        return [
            self.scope, str(self.period_start), str(self.period_days), self.model,
            fmt(self.nll), fmt(self.naive_nll), fmt(self.llhn), uplift,
            fmt(self.nvi), fmt(self.extremeness), self.level or "",
            str(self.n_events), str(self.n_conversions), self.status,
        ]


@dataclass
class BacktestReport:
    rows: list[ReportRow]
    trainings: list[tuple[int, str]] = field(default_factory=list)
    skipped_days: list[int] = field(default_factory=list)

    def select(self, **criteria) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow(row.as_record())


def _uplift_rows(cells: dict[str, CellMetrics], baseline: str, base_fields: dict) -> list[ReportRow]:
    rows = []
    base = cells[baseline]
    for name, cell in cells.items():
        uplift, status = None, cell.status
        if cell.status == "ok":
            if name == baseline:
                uplift = 0.0
            elif base.llhn is not None:
                try:
                    uplift = llhn_uplift(cell.llhn, base.llhn)
                except DegenerateMetricError:
                    status = "undefined_uplift"
            else:
                status = "undefined_uplift"
        rows.append(ReportRow(
            model=name, nll=cell.nll, naive_nll=cell.naive_nll, llhn=cell.llhn, llhn_uplift=uplift,
            n_events=cell.n_events, n_conversions=cell.n_conversions, status=status, **base_fields,
        ))
    return rows


def _annotate_nvi(stats, advertiser, start, length, config: NviConfig):
    try:
        v = nvi(stats, advertiser, start, config, short_days=length)
    except (InsufficientDataError, DegenerateMetricError):
        return None, None
    return v, classify_variation(v, config).value


def _cells_for(scorer: Scorer, specs: dict[str, ModelSpec], days: list[int], adv_index: int | None,
               min_events: int) -> dict[str, CellMetrics]:
    n_events = n_conv = 0
    for d in days:
        ev, cv = scorer.counts(d)
        if adv_index is None:
            n_events += int(ev.sum())
            n_conv += int(cv.sum())
        else:
            n_events += int(ev[adv_index])
            n_conv += int(cv[adv_index])
    cells = {}
    for name, spec in specs.items():
        parts = []
        for d in days:
            p = scorer.partials(spec, d)
            parts.extend(p.tolist() if adv_index is None else [p[adv_index]])
        cells[name] = cell_metrics(parts, n_events, n_conv, min_events)
    return cells


def _periods(first: int, last: int, length: int) -> list[tuple[int, int]]:
    return [(s, min(s + length - 1, last)) for s in range(first, last + 1, length)]


def run_backtest(log: EventLog | PreparedLog, config: BacktestConfig, scorer: Scorer | None = None,
                 jobs: int = 1) -> BacktestReport:
    """Train daily, score daily, and report per-scope, per-period metrics."""
    scorer = scorer or Scorer(log, jobs)
    config.check_history(scorer.prep.log)
    specs = config.specs
    first, last = config.test_days
    days = list(range(first, last + 1))
    scorer.ensure(specs.values(), days)
    stats = scorer.prep.stats

    periods = [(first, last)]
    if config.per_advertiser and last - first + 1 > config.period_days:
        periods += _periods(first, last, config.period_days)
    rows: list[ReportRow] = []
    for lo, hi in periods:
        period_days = [d for d in range(lo, hi + 1) if d not in scorer.skipped_days]
        base = {"scope": GLOBAL_SCOPE, "period_start": lo, "period_days": hi - lo + 1, "nvi": None, "level": None}
        rows += _uplift_rows(_cells_for(scorer, specs, period_days, None, config.min_test_events_per_cell),
                             config.baseline_name, base)
        if not config.per_advertiser:
            continue
        for k, adv in enumerate(scorer.advertisers):
            v, level = _annotate_nvi(stats, adv, lo, hi - lo + 1, config.nvi)
            base = {"scope": adv, "period_start": lo, "period_days": hi - lo + 1, "nvi": v, "level": level}
            rows += _uplift_rows(_cells_for(scorer, specs, period_days, k, config.min_test_events_per_cell),
                                 config.baseline_name, base)
    return BacktestReport(rows, list(scorer.trainings), list(scorer.skipped_days))


@dataclass(frozen=True)
class PeriodChoice:
    advertiser: str
    level: VariationLevel
    start: int | None
    nvi: float | None


def select_condition_periods(stats, advertiser: str, config: BacktestConfig,
                             candidate_days: Iterable[int]) -> dict[VariationLevel, PeriodChoice]:
    """Pick one period start per level: max extremeness for extreme, min for
    moderate, the (lower) median of the in-range values for average."""
    nvi_cfg = replace(config.nvi, short_days=config.period_days)
    points = nvi_series(stats, advertiser, nvi_cfg, candidate_days)
    out = {}
    for level in (VariationLevel.EXTREME, VariationLevel.AVERAGE, VariationLevel.MODERATE):
        pts = sorted((p for p in points if p.level is level), key=lambda p: (p.extremeness, p.day))
        if not pts:
            out[level] = PeriodChoice(advertiser, level, None, None)
            continue
        if level is VariationLevel.EXTREME:
            best = max(pts, key=lambda p: (p.extremeness, -p.day))
        elif level is VariationLevel.MODERATE:
            best = pts[0]
        else:
            best = pts[(len(pts) - 1) // 2]
        out[level] = PeriodChoice(advertiser, level, best.day, best.nvi)
    return out


CONDITION_LEVELS = (VariationLevel.EXTREME, VariationLevel.AVERAGE, VariationLevel.MODERATE)


def condition_study(log: EventLog | PreparedLog, config: BacktestConfig, scorer: Scorer | None = None,
                    jobs: int = 1) -> BacktestReport:
    """Per-advertiser uplift on one extreme, one average and one moderate period."""
    if not config.per_advertiser:
        raise ConfigError("condition_study needs per_advertiser = true")
    scorer = scorer or Scorer(log, jobs)
    prep = scorer.prep
    first_day, last_day = prep.log.day_range
    stats = prep.stats
    lo = max(config.test_days[0], first_day + config.max_window, first_day + config.nvi.long_days)
    hi = min(config.test_days[1], last_day) - config.period_days + 1
    if hi < lo:
        raise ConfigError("test range leaves no evaluable condition period")
    candidates = range(lo, hi + 1)

    choices = {adv: select_condition_periods(stats, adv, config, candidates) for adv in scorer.advertisers}
    needed = sorted({c.start + i for ch in choices.values() for c in ch.values() if c.start is not None
                     for i in range(config.period_days)})
    specs = config.specs
    scorer.ensure(specs.values(), needed)

    rows: list[ReportRow] = []
    for level in CONDITION_LEVELS:
        for k, adv in enumerate(scorer.advertisers):
            choice = choices[adv][level]
            if choice.start is None:
                for name in specs:
                    rows.append(ReportRow(adv, -1, config.period_days, name, None, None, None, None,
                                          None, level.value, 0, 0, "unavailable"))
                continue
            days = [d for d in range(choice.start, choice.start + config.period_days)
                    if d not in scorer.skipped_days]
            base = {"scope": adv, "period_start": choice.start, "period_days": config.period_days,
                    "nvi": choice.nvi, "level": level.value}
            rows += _uplift_rows(_cells_for(scorer, specs, days, k, config.min_test_events_per_cell),
                                 config.baseline_name, base)
    return BacktestReport(rows, list(scorer.trainings), list(scorer.skipped_days))


def condition_table(report: BacktestReport) -> dict[str, dict[str, dict[str, float | None]]]:
    """``{level: {model: {advertiser: uplift}}}``, the three-block comparison layout."""
    table: dict = {}
    for r in report.rows:
        if r.level is None:
            continue
        table.setdefault(r.level, {}).setdefault(r.model, {})[r.scope] = r.llhn_uplift
    return table


@dataclass(frozen=True)
class SweepPoint:
    param: float
    mean_uplift: float
    period_uplifts: tuple[float, ...]


def sweep_periods(log: EventLog, period_days: int = 7, n_periods: int = SWEEP_PERIODS) -> list[tuple[int, int]]:
    """Consecutive non-overlapping periods ending on the log's last day."""
    last = log.day_range[1]
    start = last - n_periods * period_days + 1
    return [(start + i * period_days, start + (i + 1) * period_days - 1) for i in range(n_periods)]


def _template(base: BacktestConfig, kind: ModelKind) -> ModelSpec:
    for _, spec in base.model_specs:
        if spec.kind is kind:
            return spec
    return replace(base.specs[base.baseline_name], kind=kind)


def _sweep(scorer: Scorer, base: BacktestConfig, variants: list[tuple[float, ModelSpec]]) -> list[SweepPoint]:
    log = scorer.prep.log
    periods = sweep_periods(log, base.period_days)
    longest = max([base.max_window] + [s.long_window_days for _, s in variants])
    if periods[0][0] - longest < log.day_range[0]:
        raise ConfigError(f"log too short for {SWEEP_PERIODS} {base.period_days}-day periods "
                          f"after {longest} days of history")
    baseline = base.specs[base.baseline_name]
    all_days = [d for lo, hi in periods for d in range(lo, hi + 1)]
    scorer.ensure([baseline] + [s for _, s in variants], all_days)
    out = []
    for param, spec in variants:
        ups = []
        for lo, hi in periods:
            days = [d for d in range(lo, hi + 1) if d not in scorer.skipped_days]
            cells = _cells_for(scorer, {"b": baseline, "m": spec}, days, None, base.min_test_events_per_cell)
            try:
                ups.append(llhn_uplift(cells["m"].llhn, cells["b"].llhn))
            except (DegenerateMetricError, TypeError):
                ups.append(float("nan"))
        defined = [u for u in ups if not math.isnan(u)]
        mean = math.fsum(defined) / len(defined) if defined else float("nan")
        out.append(SweepPoint(float(param), mean, tuple(ups)))
    return out


def sweep_half_life(log: EventLog | PreparedLog, base: BacktestConfig, half_lives: Sequence[float],
                    scorer: Scorer | None = None, jobs: int = 1) -> list[SweepPoint]:
    """Mean TDWM uplift over the last five 7-day periods, per half-life."""
    if len(half_lives) < 2:
        raise ConfigError("a sweep needs at least two half-life values")
    if any(h <= 0 for h in half_lives):
        raise ValueError("half-lives must be positive")
    scorer = scorer or Scorer(log, jobs)
    template = _template(base, ModelKind.TDWM)
    return _sweep(scorer, base, [(h, replace(template, half_life_days=float(h))) for h in half_lives])


def sweep_alpha(log: EventLog | PreparedLog, base: BacktestConfig, alphas: Sequence[float],
                scorer: Scorer | None = None, jobs: int = 1) -> list[SweepPoint]:
    """Mean MLTSTM uplift over the last five 7-day periods, per mixing weight."""
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alpha values must lie in [0, 1]")
    if 0.0 not in alphas or 1.0 not in alphas:
        raise ValueError("the alpha grid must include both endpoints 0 and 1")
    scorer = scorer or Scorer(log, jobs)
    template = _template(base, ModelKind.MLTSTM)
    return _sweep(scorer, base, [(a, replace(template, alpha=float(a))) for a in alphas])


SWEEP_COLUMNS = ("param", "mean_uplift")


def write_sweep_csv(points: Sequence[SweepPoint], fh, param_name: str = "param") -> None:
    writer = csv.writer(fh, lineterminator="\n")
    n = max((len(p.period_uplifts) for p in points), default=0)
    writer.writerow([param_name, "mean_uplift"] + [f"period_{i + 1}_uplift" for i in range(n)])
    for p in points:
        writer.writerow([repr(p.param), repr(p.mean_uplift)] + [repr(u) for u in p.period_uplifts])


def extremeness_uplift_table(report: BacktestReport, period_start: int | None = None) -> list[dict]:
    """Per-advertiser extremeness and uplift by model, most extreme first."""
    by_adv: dict[str, dict] = {}
    for r in report.rows:
        if r.scope == GLOBAL_SCOPE or r.nvi is None:
            continue
        if period_start is not None and r.period_start != period_start:
            continue
        entry = by_adv.setdefault((r.scope, r.period_start), {"advertiser": r.scope, "period_start": r.period_start,
                                                              "extremeness": extremeness(r.nvi)})
        entry[r.model] = r.llhn_uplift
    return sorted(by_adv.values(), key=lambda e: (-e["extremeness"], e["advertiser"], e["period_start"]))
