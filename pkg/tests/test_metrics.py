import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crshift.errors import DegenerateMetricError
from crshift.metrics import (
    format_percent,
    llhn,
    llhn_uplift,
    model_nll,
    naive_constant,
    naive_nll,
    naive_nll_from_counts,
    scored_llhn,
)


def test_model_nll_examples():
    assert model_nll([0.5, 0.5], [1, -1]) == pytest.approx(2 * math.log(2))
    assert model_nll([0.9, 0.1], [1, -1]) == pytest.approx(-2 * math.log(0.9))


def test_model_nll_clamps():
    assert math.isfinite(model_nll([0.0, 1.0], [1, -1]))
    assert model_nll([0.0], [1]) == pytest.approx(-math.log(1e-12))


def test_naive_constant_examples():
    assert naive_constant([-1, -1]) == 0
    assert naive_constant([1, -1, -1, -1]) == 0.25
    assert naive_constant([1, 1]) == 1


def test_naive_nll_examples():
    assert naive_nll([1, -1]) == pytest.approx(2 * math.log(2))
    assert naive_nll([1] * 10) == pytest.approx(10e-12, rel=1e-3)
    assert naive_nll([1, -1, -1, -1]) == pytest.approx(naive_nll_from_counts(4, 1))


def test_llhn_examples():
    assert llhn(3.0, 3.0) == 0
    assert llhn(6.0, 3.0) == -1
    assert scored_llhn([0.9, 0.1], [1, -1]) == pytest.approx((2 * math.log(2) + 2 * math.log(0.9)) / (2 * math.log(2)))
    with pytest.raises(DegenerateMetricError):
        scored_llhn([0.5, 0.5], [1, 1])


def test_uplift_examples():
    assert llhn_uplift(0.1, 0.1) == 0
    assert llhn_uplift(0.15, 0.10) == pytest.approx(0.5)
    assert format_percent(0.5) == "50.0"
    with pytest.raises(DegenerateMetricError):
        llhn_uplift(0.1, 0.0)


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        model_nll([], [])
    with pytest.raises(ValueError):
        naive_nll([])


@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.sampled_from([-1, 1])), min_size=1, max_size=30),
       st.integers(0, 29), st.floats(0.01, 0.5))
def test_moving_toward_label_improves(pairs, k, step):
    probs = np.array([p for p, _ in pairs])
    labels = np.array([y for _, y in pairs])
    k %= len(pairs)
    better = probs.copy()
    better[k] = min(probs[k] + step, 0.995) if labels[k] == 1 else max(probs[k] - step, 0.005)
    if better[k] == probs[k]:
        return
    assert model_nll(better, labels) < model_nll(probs, labels)
    if 0 < naive_constant(labels) < 1:
        assert scored_llhn(better, labels) > scored_llhn(probs, labels)
