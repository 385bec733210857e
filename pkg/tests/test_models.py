import numpy as np
import pytest

from crshift.errors import LeakageError, TrainingError
from crshift.events import slice_window
from crshift.features import append_cr_feature, encode_event, historic_cr_feature
from crshift.models import (
    ModelKind,
    ModelSpec,
    _training_rows,
    load_model,
    save_model,
    score_event,
    score_log,
    score_rows,
    train_model,
)
from crshift.optim import ModelWeights, WeightedDataset, decay_weight, weighted_nll
from tests.conftest import SMALL_ENCODER


def spec(kind, **kw):
    return ModelSpec(kind=kind, encoder=SMALL_ENCODER, **kw)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_compressed_rows_give_exact_objective(small_prep, small_log, kind):
    """Row compression must reproduce the per-event weighted objective."""
    s = spec(kind, long_window_days=5, short_window_days=3, half_life_days=2.0)
    target = 25
    data, lam = _training_rows(small_prep, s, (20, 24), target, kind)
    events = list(slice_window(small_log, 20, 24))
    stats = small_prep.stats.truncated(target)
    rows = []
    for e in events:
        x = encode_event(e, s.encoder)
        if kind is ModelKind.HCRFM:
            x = append_cr_feature(x, historic_cr_feature(stats, e.advertiser_id, e.day, s.cr_config))
        d = decay_weight(e.day, target - 1, 2.0) if kind is ModelKind.TDWM else 1.0
        rows.append((x, e.label, d))
    ref = WeightedDataset.from_rows(rows, s.encoder.dimension_bits)
    if kind is ModelKind.TDWM:
        assert lam == pytest.approx(s.lam * np.mean(ref.weights), rel=1e-12)
    else:
        assert lam == s.lam
    assert len(data) < len(ref)
    w = ModelWeights(np.random.default_rng(0).normal(0, 0.1, 1 << 16), 16, lam)
    assert weighted_nll(w, data) == pytest.approx(weighted_nll(w, ref), rel=1e-10)


def test_leakage_and_empty_window(small_prep):
    with pytest.raises(LeakageError):
        train_model(small_prep, spec(ModelKind.BASELINE), 30, window=(20, 30))
    with pytest.raises(TrainingError):
        train_model(small_prep, spec(ModelKind.BASELINE), 3, window=(-10, -5))


def test_mltstm_endpoints(small_prep):
    s = spec(ModelKind.MLTSTM, long_window_days=14, short_window_days=5)
    m = train_model(small_prep, s, 30)
    assert m.windows == ((25, 29), (16, 29))
    short = train_model(small_prep, spec(ModelKind.BASELINE), 30, window=(25, 29))
    long = train_model(small_prep, spec(ModelKind.BASELINE), 30, window=(16, 29))
    np.testing.assert_array_equal(m.weights[0].w, short.weights[0].w)
    np.testing.assert_array_equal(m.weights[1].w, long.weights[0].w)
    day = slice_window(small_prep.log, 30, 30)
    p_short, p_long = score_log(short, day), score_log(long, day)
    from dataclasses import replace
    for alpha in (0.0, 0.6, 1.0):
        mix = replace(m, spec=replace(s, alpha=alpha))
        np.testing.assert_allclose(score_log(mix, day), alpha * p_short + (1 - alpha) * p_long, atol=1e-15)


def test_training_key_ignores_alpha():
    a = spec(ModelKind.MLTSTM, alpha=0.2)
    assert a.training_key == spec(ModelKind.MLTSTM, alpha=0.9).training_key
    assert spec(ModelKind.TDWM, half_life_days=3).training_key != spec(ModelKind.TDWM).training_key
    assert spec(ModelKind.BASELINE, half_life_days=3).training_key == spec(ModelKind.BASELINE).training_key


@pytest.mark.parametrize("kind", list(ModelKind))
def test_event_and_vector_scores_agree(small_prep, kind):
    m = train_model(small_prep, spec(kind, long_window_days=10), 31)
    s, e = small_prep.bounds(31, 31)
    fast = score_rows(m, small_prep, s, s + 50)
    stats = small_prep.stats.truncated(31)
    slow = [score_event(m, small_prep.log[i], stats) for i in range(s, s + 50)]
    np.testing.assert_allclose(fast, slow, rtol=1e-10)
    assert np.all((fast > 0) & (fast < 1))


def test_scoring_guards(small_prep):
    m = train_model(small_prep, spec(ModelKind.HCRFM, long_window_days=10), 31)
    s, _ = small_prep.bounds(31, 31)
    with pytest.raises(LeakageError):
        score_event(m, small_prep.log[s], small_prep.stats)
    s2, _ = small_prep.bounds(32, 32)
    with pytest.raises(ValueError):
        score_event(m, small_prep.log[s2])


def test_hcrfm_uses_cr_feature(small_prep):
    m = train_model(small_prep, spec(ModelKind.HCRFM, long_window_days=10), 31)
    assert m.weights[0].w[SMALL_ENCODER.cr_index] != 0
    assert m.stats_snapshot.last_day == 30


@pytest.mark.parametrize("kind", list(ModelKind))
def test_artifact_roundtrip(tmp_path, small_prep, kind):
    m = train_model(small_prep, spec(kind, long_window_days=10), 31)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m", m.stats_snapshot)
    assert back.spec == m.spec
    s, _ = small_prep.bounds(31, 31)
    np.testing.assert_array_equal(score_rows(back, small_prep, s, s + 20), score_rows(m, small_prep, s, s + 20))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(alpha=1.5)
    with pytest.raises(ValueError):
        ModelSpec(short_window_days=30, long_window_days=21)
    s = spec(ModelKind.TDWM, half_life_days=3.0)
    assert ModelSpec.from_dict(s.to_dict()) == s
