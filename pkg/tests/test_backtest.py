import io
import math
from dataclasses import replace

import numpy as np
import pytest

from crshift.backtest import (
    REPORT_COLUMNS,
    BacktestConfig,
    Scorer,
    condition_study,
    condition_table,
    extremeness_uplift_table,
    run_backtest,
    select_condition_periods,
    sweep_alpha,
    sweep_half_life,
    sweep_periods,
    write_sweep_csv,
)
from crshift.errors import ConfigError
from crshift.events import log_from_records
from crshift.metrics import llhn, model_nll, naive_nll
from crshift.models import ModelKind, ModelSpec, PreparedLog, score_rows, train_model
from crshift.variation import NviConfig, VariationLevel, nvi_series
from tests.conftest import SMALL_ENCODER, make_event


def specs(**kw):
    base = dict(encoder=SMALL_ENCODER, long_window_days=10, short_window_days=4)
    base.update(kw)
    return tuple((k.value, ModelSpec(kind=k, **base)) for k in ModelKind)


@pytest.fixture(scope="module")
def scorer(small_prep):
    return Scorer(small_prep)


@pytest.fixture(scope="module")
def report(small_prep, scorer):
    cfg = BacktestConfig(test_days=(25, 39), model_specs=specs(), min_test_events_per_cell=10)
    return run_backtest(small_prep, cfg, scorer=scorer)


def test_config_validation(small_log):
    with pytest.raises(ConfigError):
        BacktestConfig(test_days=(25, 30), model_specs=specs(), baseline_name="nope")
    with pytest.raises(ConfigError):
        BacktestConfig(test_days=(25, 30), model_specs=specs() + specs()[:1])
    with pytest.raises(ConfigError):
        BacktestConfig(test_days=(30, 25), model_specs=specs())
    cfg = BacktestConfig(test_days=(5, 10), model_specs=specs())
    with pytest.raises(ConfigError):
        run_backtest(small_log, cfg)
    d = BacktestConfig(test_days=(25, 30), model_specs=specs()).to_dict()
    assert BacktestConfig.from_dict(d).to_dict() == d


def test_global_cell_matches_direct_computation(small_prep, report):
    """Independent oracle: retrain per day, score, sum NLL over the whole range."""
    sp = dict(specs())["tdwm"]
    probs, labels = [], []
    for day in range(25, 40):
        m = train_model(small_prep, sp, day)
        s, e = small_prep.bounds(day, day)
        probs.append(score_rows(m, small_prep, s, e))
        labels.append(small_prep.labels[s:e])
    p, y = np.concatenate(probs), np.concatenate(labels)
    row = report.select(scope="global", period_start=25, period_days=15, model="tdwm")[0]
    assert row.nll == pytest.approx(model_nll(p, y), rel=1e-12)
    assert row.naive_nll == pytest.approx(naive_nll(y), rel=1e-12)
    assert row.llhn == pytest.approx(llhn(model_nll(p, y), naive_nll(y)), rel=1e-9)
    assert row.n_events == len(y)


def test_global_is_sum_of_advertisers(report):
    for row in report.select(scope="global"):
        parts = [r for r in report.rows if r.scope != "global" and r.model == row.model
                 and r.period_start == row.period_start and r.period_days == row.period_days]
        assert math.fsum(r.nll for r in parts) == pytest.approx(row.nll, rel=1e-12)
        assert sum(r.n_events for r in parts) == row.n_events


def test_baseline_rows_and_periods(report):
    assert all(r.llhn_uplift == 0.0 for r in report.select(model="baseline", status="ok"))
    starts = sorted({r.period_start for r in report.select(scope="a")})
    assert starts == [25, 32, 39]
    row = report.select(scope="a", period_start=32, model="hcrfm")[0]
    assert row.nvi is not None and row.level in {lv.value for lv in VariationLevel}
    assert row.llhn_uplift == pytest.approx(
        (row.llhn - report.select(scope="a", period_start=32, model="baseline")[0].llhn)
        / report.select(scope="a", period_start=32, model="baseline")[0].llhn)


def test_every_training_precedes_its_day(scorer):
    assert len(scorer.trainings) == 15 * 4
    days = {d for d, _ in scorer.trainings}
    assert days == set(range(25, 40))


def test_csv_layout(report):
    buf = io.StringIO()
    report.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == list(REPORT_COLUMNS)
    assert len(lines) == 1 + len(report.rows)


def test_insufficient_cells(small_prep, scorer):
    cfg = BacktestConfig(test_days=(25, 26), model_specs=specs(), min_test_events_per_cell=10**6)
    rep = run_backtest(small_prep, cfg, scorer=scorer)
    assert {r.status for r in rep.rows} == {"insufficient_data"}
    assert all(r.llhn is None for r in rep.rows)


def test_threads_match_serial(small_prep, report):
    cfg = BacktestConfig(test_days=(25, 39), model_specs=specs(), min_test_events_per_cell=10)
    par = run_backtest(PreparedLog(small_prep.log), cfg, jobs=2)
    assert [r.as_record() for r in par.rows] == [r.as_record() for r in report.rows]


def test_empty_day_is_skipped():
    recs = []
    rng = np.random.default_rng(0)
    for day in list(range(12)) + [13, 14]:
        recs += [make_event(day, float(k), label=1 if rng.random() < 0.3 else -1, product_id=f"p{k % 3}")
                 for k in range(40)]
    log = log_from_records(recs)
    cfg = BacktestConfig(test_days=(11, 14), model_specs=specs(long_window_days=5, short_window_days=2),
                         min_test_events_per_cell=1, per_advertiser=False)
    rep = run_backtest(log, cfg)
    assert rep.skipped_days == [12]
    assert rep.select(model="baseline")[0].n_events == 120


def test_condition_selection(small_prep):
    cfg = BacktestConfig(test_days=(20, 39), model_specs=specs(), nvi=NviConfig(long_days=10))
    stats = small_prep.stats
    choice = select_condition_periods(stats, "a", cfg, range(20, 34))
    pts = nvi_series(stats, "a", replace(cfg.nvi, short_days=7), range(20, 34))
    ext = [p for p in pts if p.level is VariationLevel.EXTREME]
    if ext:
        assert choice[VariationLevel.EXTREME].start == max(ext, key=lambda p: p.extremeness).day
    mod = [p for p in pts if p.level is VariationLevel.MODERATE]
    if mod:
        assert choice[VariationLevel.MODERATE].start == min(mod, key=lambda p: p.extremeness).day


def test_condition_study_layout(small_prep, scorer):
    cfg = BacktestConfig(test_days=(20, 39), model_specs=specs(), nvi=NviConfig(long_days=10),
                         min_test_events_per_cell=10)
    rep = condition_study(small_prep, cfg, scorer=scorer)
    table = condition_table(rep)
    assert set(table) <= {"extreme", "average", "moderate"}
    for level, models in table.items():
        assert set(models) == {k.value for k in ModelKind}
    for r in rep.rows:
        if r.status == "unavailable":
            assert r.period_start == -1
        else:
            assert r.period_days == 7 and r.level == classify(r.nvi)
    assert extremeness_uplift_table(rep)


def classify(v):
    from crshift.variation import classify_variation
    return classify_variation(v).value


def test_sweep_periods(small_log):
    assert sweep_periods(small_log) == [(5, 11), (12, 18), (19, 25), (26, 32), (33, 39)]


def test_alpha_sweep_trains_once(small_log):
    log = log_from_records(list(small_log)[:0]) if False else small_log
    from crshift.synthgen import generate_log
    from tests.conftest import small_sim
    longer = generate_log(small_sim(n_days=50))
    cfg = BacktestConfig(test_days=(0, 0), model_specs=specs(), min_test_events_per_cell=10)
    sc = Scorer(longer)
    pts = sweep_alpha(longer, cfg, [0.0, 0.5, 1.0], scorer=sc)
    assert [p.param for p in pts] == [0.0, 0.5, 1.0]
    assert len(sc.trainings) == 2 * 35
    # alpha = 0 keeps only the long-window component, which is the baseline fit
    assert pts[0].mean_uplift == pytest.approx(0.0, abs=1e-12)
    hl = sweep_half_life(longer, cfg, [2.0, 1e9], scorer=sc)
    # equal up to the optimizer stopping early at the default iteration cap
    assert hl[1].mean_uplift == pytest.approx(0.0, abs=1e-3)
    assert len(hl[0].period_uplifts) == 5
    buf = io.StringIO()
    write_sweep_csv(pts, buf, "alpha")
    assert buf.getvalue().startswith("alpha,mean_uplift,period_1_uplift")


def test_sweep_argument_checks(small_log):
    cfg = BacktestConfig(test_days=(0, 0), model_specs=specs())
    with pytest.raises(ValueError):
        sweep_alpha(small_log, cfg, [0.0, 0.5])
    with pytest.raises(ValueError):
        sweep_alpha(small_log, cfg, [0.0, 1.0, 1.2])
    with pytest.raises(ValueError):
        sweep_half_life(small_log, cfg, [0.0, 1.0])
    with pytest.raises(ConfigError):
        sweep_alpha(small_log, cfg, [0.0, 1.0])
