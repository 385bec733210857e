"""Log-likelihood metrics: model NLL, the naive constant-rate predictor, LLHN and LLHN-Uplift.

Both likelihoods are kept as nonnegative negative log-likelihoods, so a
positive LLHN means the model beats the naive predictor and a positive
uplift means it beats the baseline.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateMetricError

PROB_CLAMP = 1e-12
NAIVE_EPS = 1e-9
UPLIFT_EPS = 1e-9


def _as_arrays(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise ValueError("metrics need a nonempty scored set")
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    return p, y


def model_nll(probs, labels) -> float:
    """``sum -log P(y_i | x_i)`` with probabilities clamped to ``[1e-12, 1 - 1e-12]``."""
    p, y = _as_arrays(probs, labels)
    return float(np.sum(nll_terms(p, y)))


def naive_constant(labels) -> float:
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise ValueError("metrics need a nonempty scored set")
    return float(np.count_nonzero(y == 1)) / y.size


def naive_nll(labels) -> float:
    """NLL of predicting the set's own positive rate for every row (``n * H(c)``)."""
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise ValueError("metrics need a nonempty scored set")
    return naive_nll_from_counts(y.size, int(np.count_nonzero(y == 1)))


def naive_nll_from_counts(n_events: int, n_positive: int) -> float:
    if n_events <= 0:
        raise ValueError("metrics need a nonempty scored set")
    c = min(max(n_positive / n_events, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return float(-(n_positive * np.log(c) + (n_events - n_positive) * np.log1p(-c)))


def nll_terms(probs, labels) -> np.ndarray:
    """Per-row ``-log P(y_i | x_i)`` under the same clamp as :func:`model_nll`."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -np.log(np.where(np.asarray(labels) == 1, p, 1.0 - p))


def llhn(model_nll_value: float, naive_nll_value: float) -> float:
    """Relative NLL improvement over the naive predictor."""
    if naive_nll_value <= NAIVE_EPS:
        raise DegenerateMetricError("naive NLL is ~0 (one-class test set); LLHN undefined")
    return (naive_nll_value - model_nll_value) / naive_nll_value


def llhn_uplift(model_llhn: float, baseline_llhn: float) -> float:
    """Relative LLHN improvement of a model over the baseline, as a ratio."""
    if abs(baseline_llhn) < UPLIFT_EPS:
        raise DegenerateMetricError("baseline LLHN is ~0; uplift undefined")
    return (model_llhn - baseline_llhn) / baseline_llhn


def scored_llhn(probs, labels) -> float:
    return llhn(model_nll(probs, labels), naive_nll(labels))


def format_percent(ratio: float, digits: int = 1) -> str:
    return f"{100.0 * ratio:.{digits}f}"
