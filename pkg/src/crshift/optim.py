"""Weighted L2-regularized logistic loss and its SGD -> L-BFGS minimizer."""

from __future__ import annotations

import logging
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numba
import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import NumericError
from .features import SparseFeatureVector

logger = logging.getLogger(__name__)

ARTIFACT_MAGIC = b"CRSW"
ARTIFACT_VERSION = 1
_HEADER = struct.Struct("<4sHHIdd")


@dataclass
class ModelWeights:
    w: np.ndarray
    dimension_bits: int
    lam: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (1 << self.dimension_bits,):
            raise ValueError(f"weight vector must have length 2**{self.dimension_bits}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not np.all(np.isfinite(self.w)):
            raise NumericError("non-finite weight")

    @classmethod
    def zeros(cls, dimension_bits: int, lam: float) -> "ModelWeights":
        return cls(np.zeros(1 << dimension_bits), dimension_bits, lam)

    def with_lambda(self, lam: float) -> "ModelWeights":
        return ModelWeights(self.w.copy(), self.dimension_bits, lam)


class WeightedDataset:
    """Rows ``(x_i, y_i, d_i)`` stored as a CSR matrix with label and weight arrays."""

    __slots__ = ("X", "y", "weights", "dimension_bits")

    def __init__(self, X, y, weights=None, dimension_bits: int | None = None):
        X = sp.csr_matrix(X, dtype=np.float64)
        if dimension_bits is None:
            dimension_bits = int(X.shape[1]).bit_length() - 1
        if X.shape[1] != 1 << dimension_bits:
            raise ValueError(f"matrix has {X.shape[1]} columns, expected 2**{dimension_bits}")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        weights = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(y) != X.shape[0] or len(weights) != X.shape[0]:
            raise ValueError("row count mismatch")
        if not np.isin(y, (-1.0, 1.0)).all():
            raise ValueError("labels must be -1 or +1")
        if (weights <= 0).any() or not np.isfinite(weights).all():
            raise ValueError("sample weights must be positive and finite")
        X.sort_indices()
        self.X, self.y, self.weights, self.dimension_bits = X, y, weights, dimension_bits

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[SparseFeatureVector, int, float]], dimension_bits: int):
        for x, _, _ in rows:
            if x.dimension_bits != dimension_bits:
                raise ValueError("all vectors must share dimension_bits")
        indptr = np.cumsum([0] + [x.nnz for x, _, _ in rows])
        indices = np.array([i for x, _, _ in rows for i in x.indices], dtype=np.int64)
        data = np.array([v for x, _, _ in rows for v in x.values], dtype=np.float64)
        X = sp.csr_matrix((data, indices, indptr), shape=(len(rows), 1 << dimension_bits))
        return cls(X, [r[1] for r in rows], [r[2] for r in rows], dimension_bits)

    def __len__(self) -> int:
        return self.X.shape[0]

    def with_weights(self, weights) -> "WeightedDataset":
        return WeightedDataset(self.X, self.y, weights, self.dimension_bits)


@dataclass(frozen=True)
class OptimConfig:
    sgd_epochs: int = 1
    sgd_learning_rate: float = 0.1
    lbfgs_memory: int = 10
    gradient_tolerance: float = 1e-6
    max_lbfgs_iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.sgd_epochs < 0 or self.sgd_learning_rate < 0:
            raise ValueError("SGD epochs and learning rate must be nonnegative")
        if self.lbfgs_memory < 3:
            raise ValueError("lbfgs_memory must be >= 3")
        if self.gradient_tolerance <= 0 or self.max_lbfgs_iterations < 0:
            raise ValueError("invalid L-BFGS stopping rule")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


def _check_dims(weights: ModelWeights, bits: int) -> None:
    if weights.dimension_bits != bits:
        raise ValueError(f"dimension mismatch: weights 2**{weights.dimension_bits}, data 2**{bits}")


def softplus(t):
    """``log(1 + exp(t))`` without overflow."""
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def predict_probability(weights: ModelWeights, x: SparseFeatureVector) -> float:
    _check_dims(weights, x.dimension_bits)
    return float(expit(x.dot(weights.w)))


def _loss_terms(X, y, d, w):
    margins = y * (X @ w)
    return d * softplus(-margins), margins


def weighted_nll(weights: ModelWeights, data: WeightedDataset) -> float:
    """``sum_i d_i log(1 + exp(-y_i w.x_i)) + lam/2 ||w||^2``."""
    _check_dims(weights, data.dimension_bits)
    terms, _ = _loss_terms(data.X, data.y, data.weights, weights.w)
    value = float(np.sum(terms)) + 0.5 * weights.lam * float(weights.w @ weights.w)
    if not math.isfinite(value):
        raise NumericError("non-finite objective")
    return value


def nll(weights: ModelWeights, data: WeightedDataset) -> float:
    """Unweighted regularized log loss (every sample weight taken as 1)."""
    return weighted_nll(weights, data.with_weights(np.ones(len(data))))


def weighted_nll_gradient(weights: ModelWeights, data: WeightedDataset) -> np.ndarray:
    _check_dims(weights, data.dimension_bits)
    margins = data.y * (data.X @ weights.w)
    coef = -data.y * data.weights * expit(-margins)
    grad = data.X.T @ coef + weights.lam * weights.w
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return grad


class _Problem:
    """The objective restricted to columns that appear in the data.

    Coordinates absent from every row only see the ridge term, so their
    minimizer is 0; optimizing the active block is exact and keeps memory
    proportional to the number of distinct features instead of ``2**b``.
    """

    def __init__(self, data: WeightedDataset, lam: float):
        X = data.X
        self.cols = np.unique(X.indices)
        remapped = np.searchsorted(self.cols, X.indices)
        self.X = sp.csr_matrix((X.data, remapped, X.indptr), shape=(X.shape[0], len(self.cols)))
        self.Xt = self.X.T.tocsr()
        self.y, self.d, self.lam = data.y, data.weights, lam

    def value(self, v: np.ndarray) -> float:
        terms, _ = _loss_terms(self.X, self.y, self.d, v)
        return float(np.sum(terms)) + 0.5 * self.lam * float(v @ v)

    def value_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        terms, margins = _loss_terms(self.X, self.y, self.d, v)
        f = float(np.sum(terms)) + 0.5 * self.lam * float(v @ v)
        return f, self.gradient(v, margins)

    def margins(self, v: np.ndarray) -> np.ndarray:
        return self.y * (self.X @ v)

    def gradient(self, v: np.ndarray, margins: np.ndarray) -> np.ndarray:
        g = self.Xt @ (-self.y * self.d * expit(-margins)) + self.lam * v
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        return g

    def decrease(self, v: np.ndarray, margins: np.ndarray, s: np.ndarray, dm: np.ndarray) -> float:
        """``f(v + s) - f(v)`` computed from per-row differences.

        ``softplus(a) - softplus(b) = log1p(expm1(a - b) * sigmoid(b))`` keeps
        full relative accuracy when the change is tiny, where subtracting two
        rounded objective values would not.
        """
        rows = np.log1p(np.expm1(-dm) * expit(-margins))
        delta = float(np.sum(self.d * rows)) + 0.5 * self.lam * float(s @ (2.0 * v + s))
        if not math.isfinite(delta):
            raise NumericError("non-finite objective change")
        return delta


@numba.njit(cache=True)
def _adagrad_pass(indptr, indices, data, y, d, order, w, accum, lr, reg_scale):
    for r in order:
        lo, hi = indptr[r], indptr[r + 1]
        z = 0.0
        for k in range(lo, hi):
            z += w[indices[k]] * data[k]
        m = y[r] * z
        if m >= 0:
            e = math.exp(-m)
            s = e / (1.0 + e)
        else:
            s = 1.0 / (1.0 + math.exp(m))
        coef = -y[r] * d[r] * s
        reg = reg_scale * d[r]
        for k in range(lo, hi):
            j = indices[k]
            g = coef * data[k] + reg * w[j]
            accum[j] += g * g
            if accum[j] > 0.0:
                w[j] -= lr * g / math.sqrt(accum[j])


def sgd_warmstart(data: WeightedDataset, w0: ModelWeights, config: OptimConfig) -> ModelWeights:
    """Seeded shuffled AdaGrad passes of per-example weighted gradient steps.

    Each example's loss gradient is scaled by its sample weight; the ridge
    term is applied lazily to the touched coordinates in proportion to the
    example's share of the total weight.
    """
    _check_dims(w0, data.dimension_bits)
    w = w0.w.copy()
    if config.sgd_learning_rate == 0 or config.sgd_epochs == 0 or len(data) == 0:
        return ModelWeights(w, w0.dimension_bits, w0.lam)
    X = data.X
    rng = np.random.default_rng(config.seed)
    accum = np.zeros_like(w)
    reg_scale = w0.lam / float(np.sum(data.weights))
    for _ in range(config.sgd_epochs):
        order = rng.permutation(len(data)).astype(np.int64)
        _adagrad_pass(
            X.indptr.astype(np.int64), X.indices.astype(np.int64), X.data, data.y, data.weights,
            order, w, accum, float(config.sgd_learning_rate), reg_scale,
        )
    return ModelWeights(w, w0.dimension_bits, w0.lam)


class LbfgsResult(NamedTuple):
    weights: ModelWeights
    iterations: int
    final_grad_norm: float
    converged: bool
    objective: float


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(data: WeightedDataset, w0: ModelWeights, config: OptimConfig,
                   max_halvings: int = 50, armijo_c: float = 1e-4) -> LbfgsResult:
    """L-BFGS (two-loop recursion) with backtracking Armijo line search.

    Stops when the sup-norm of the gradient reaches ``gradient_tolerance``
    or after ``max_lbfgs_iterations`` accepted steps.  A line search that
    fails after ``max_halvings`` halvings ends the run with
    ``converged=False`` and the best point found so far.
    """
    _check_dims(w0, data.dimension_bits)
    problem = _Problem(data, w0.lam)
    v = w0.w[problem.cols].copy()
    m = problem.margins(v)
    f, g = problem.value_grad(v)
    S: deque = deque(maxlen=config.lbfgs_memory)
    Y: deque = deque(maxlen=config.lbfgs_memory)
    rho: deque = deque(maxlen=config.lbfgs_memory)
    gnorm = float(np.max(np.abs(g), initial=0.0))
    it = 0
    converged = gnorm <= config.gradient_tolerance
    while not converged and it < config.max_lbfgs_iterations:
        direction = -_two_loop(g, S, Y, rho)
        slope = float(g @ direction)
        if slope >= 0:
            S.clear(), Y.clear(), rho.clear()
            direction, slope = -g, -float(g @ g)
        step = 1.0 if S else min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-12))
        dm_unit = problem.margins(direction)
        for _ in range(max_halvings + 1):
            s = step * direction
            dm = step * dm_unit
            delta = problem.decrease(v, m, s, dm)
            if delta <= armijo_c * step * slope and delta < 0:
                break
            step *= 0.5
        else:
            logger.debug("line search failed after %d halvings at iteration %d", max_halvings, it)
            break
        v_new, m_new = v + s, m + dm
        g_new = problem.gradient(v_new, m_new)
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10:
            S.append(s), Y.append(yv), rho.append(1.0 / sy)
        v, m, g = v_new, m_new, g_new
        f += delta
        it += 1
        gnorm = float(np.max(np.abs(g), initial=0.0))
        converged = gnorm <= config.gradient_tolerance
    if it:
        # margins were updated incrementally; recompute once from scratch
        f, g = problem.value_grad(v)
        gnorm = float(np.max(np.abs(g), initial=0.0))
        converged = gnorm <= config.gradient_tolerance
    w = np.zeros_like(w0.w)
    w[problem.cols] = v
    return LbfgsResult(ModelWeights(w, w0.dimension_bits, w0.lam), it, gnorm, converged, f)


def fit(data: WeightedDataset, lam: float, config: OptimConfig, w0: ModelWeights | None = None) -> LbfgsResult:
    """SGD warm start followed by L-BFGS, from zeros unless ``w0`` is given."""
    w0 = w0 if w0 is not None else ModelWeights.zeros(data.dimension_bits, lam)
    warm = sgd_warmstart(data, w0, config)
    result = lbfgs_minimize(data, warm, config)
    if not result.converged:
        logger.info("L-BFGS stopped after %d iterations with |grad|_inf=%.3g",
                    result.iterations, result.final_grad_norm)
    return result


def decay_weight(event_day: int, reference_day: int, half_life_days: float) -> float:
    """``2 ** (-(reference_day - event_day) / half_life_days)``."""
    if event_day > reference_day:
        raise ValueError(f"event day {event_day} is after the reference day {reference_day}")
    if half_life_days <= 0:
        raise ValueError("half_life_days must be positive")
    return 2.0 ** (-(reference_day - event_day) / half_life_days)


def decay_weights(event_days: np.ndarray, reference_day: int, half_life_days: float) -> np.ndarray:
    event_days = np.asarray(event_days)
    if event_days.size and event_days.max() > reference_day:
        raise ValueError("event days after the reference day")
    if half_life_days <= 0:
        raise ValueError("half_life_days must be positive")
    return np.exp2(-(reference_day - event_days) / half_life_days)


def adapt_lambda(lambda_nll: float, weights) -> float:
    """Scale a log-loss ridge constant by the mean importance weight."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ValueError("weight sequence is empty")
    return lambda_nll * math.fsum(weights) / weights.size


def write_weights(path, blocks: Sequence[ModelWeights], alpha: float | None = None) -> None:
    """Binary artifact: header (magic, version, n_blocks, b, lambda, alpha) + LE float64 blocks."""
    b, lam = blocks[0].dimension_bits, blocks[0].lam
    if any(m.dimension_bits != b for m in blocks):
        raise ValueError("weight blocks must share dimension_bits")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARTIFACT_MAGIC, ARTIFACT_VERSION, len(blocks), b, lam,
                              float("nan") if alpha is None else alpha))
        for m in blocks:
            fh.write(m.w.astype("<f8").tobytes())


def read_weights(path) -> tuple[list[ModelWeights], float | None]:
    raw = Path(path).read_bytes()
    magic, version, n_blocks, b, lam, alpha = _HEADER.unpack_from(raw)
    if magic != ARTIFACT_MAGIC or version != ARTIFACT_VERSION:
        raise ValueError(f"{path}: not a weight artifact (magic {magic!r}, version {version})")
    size = 1 << b
    expected = _HEADER.size + n_blocks * size * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated artifact ({len(raw)} of {expected} bytes)")
    blocks = []
    for k in range(n_blocks):
        off = _HEADER.size + k * size * 8
        blocks.append(ModelWeights(np.frombuffer(raw, "<f8", size, off).astype(np.float64), b, lam))
    return blocks, (None if math.isnan(alpha) else alpha)
