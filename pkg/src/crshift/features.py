"""Hashed sparse encoding of click events and the historic conversion-rate feature.

Hashing uses 64-bit FNV-1a over UTF-8 ``"namespace=value"`` strings (crosses
as ``"a=x^b=y"``), seeded by prefixing ``HASH_SEED``.  Index 0 is the bias,
index ``2**b - 1`` is reserved for the log-CR feature, and hashed features
land in ``[1, 2**b - 2]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .events import MISSING, DailyAdvertiserStats, EventLog, EventRecord

HASH_SEED = "crshift-v1|"
PRICE_NAMESPACE = "product_price"
BIAS_INDEX = 0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=1 << 16)
def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in (HASH_SEED + text).encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def feature_index(token: str, dimension_bits: int) -> int:
    """Hashed column of a feature token, avoiding the bias and CR slots."""
    return 1 + fnv1a_64(token) % ((1 << dimension_bits) - 2)


DEFAULT_NAMESPACES = (
    "advertiser_id",
    "device_type",
    "user_segment",
    PRICE_NAMESPACE,
    "product_id",
    "category",
    "brand",
    "gender",
    "age_group",
)


@dataclass(frozen=True)
class EncoderConfig:
    dimension_bits: int = 22
    namespaces: tuple[str, ...] = DEFAULT_NAMESPACES
    include_bias: bool = True
    cross_features: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "namespaces", tuple(self.namespaces))
        object.__setattr__(self, "cross_features", tuple(tuple(p) for p in self.cross_features))
        if not 8 <= self.dimension_bits <= 30:
            raise ValueError(f"dimension_bits must lie in [8, 30], got {self.dimension_bits}")
        if len(set(self.namespaces)) != len(self.namespaces):
            raise ValueError("duplicate namespace")
        for pair in self.cross_features:
            if len(pair) != 2 or any(ns not in self.namespaces for ns in pair):
                raise ValueError(f"cross pair {pair} must reference declared namespaces")

    @property
    def dimension(self) -> int:
        return 1 << self.dimension_bits

    @property
    def cr_index(self) -> int:
        return (1 << self.dimension_bits) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["namespaces"] = list(self.namespaces)
        d["cross_features"] = [list(p) for p in self.cross_features]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps({"hash_seed": HASH_SEED, **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class CrFeatureConfig:
    smoothing_alpha: float = 1.0
    smoothing_beta: float = 2.0
    fallback_window_days: int = 30

    def __post_init__(self):
        if self.smoothing_alpha <= 0 or self.smoothing_beta <= 0:
            raise ValueError("smoothing constants must be positive")
        # strict: alpha == beta would give cr == 1 for an all-converting day
        if self.smoothing_alpha >= self.smoothing_beta:
            raise ValueError("smoothing_alpha must be < smoothing_beta")
        if self.fallback_window_days < 1:
            raise ValueError("fallback_window_days must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrFeatureConfig":
        return cls(**d)


@dataclass(frozen=True)
class SparseFeatureVector:
    indices: tuple[int, ...]
    values: tuple[float, ...]
    dimension_bits: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= 1 << self.dimension_bits):
            raise ValueError("indices must be strictly increasing and inside [0, 2**b)")
        if any(v == 0 for v in self.values):
            raise ValueError("zero-valued entries must be elided")

    @classmethod
    def from_pairs(cls, pairs, dimension_bits: int) -> "SparseFeatureVector":
        acc: dict[int, float] = {}
        for i, v in pairs:
            acc[i] = acc.get(i, 0.0) + v
        items = sorted((i, v) for i, v in acc.items() if v != 0)
        return cls(tuple(i for i, _ in items), tuple(v for _, v in items), dimension_bits)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices, self.values))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def dot(self, w: np.ndarray) -> float:
        return float(np.dot(w[list(self.indices)], self.values)) if self.indices else 0.0


def _tokens(event: EventRecord, config: EncoderConfig):
    values = {}
    for ns in config.namespaces:
        if ns == PRICE_NAMESPACE:
            values[ns] = None
            yield PRICE_NAMESPACE, float(np.log1p(event.product_price))
        else:
            values[ns] = event.attribute(ns)
            yield f"{ns}={values[ns]}", 1.0
    for a, b in config.cross_features:
        va = f"{event.product_price!r}" if a == PRICE_NAMESPACE else values[a]
        vb = f"{event.product_price!r}" if b == PRICE_NAMESPACE else values[b]
        yield f"{a}={va}^{b}={vb}", 1.0


def encode_event(event: EventRecord, config: EncoderConfig) -> SparseFeatureVector:
    """Hashed sparse vector: one-hot categoricals, ``log(1+price)``, optional bias."""
    b = config.dimension_bits
    pairs = [(feature_index(tok, b), v) for tok, v in _tokens(event, config)]
    if config.include_bias:
        pairs.append((BIAS_INDEX, 1.0))
    return SparseFeatureVector.from_pairs(pairs, b)


def vectors_to_csr(vectors: Sequence[SparseFeatureVector], dimension_bits: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.nnz for v in vectors])
    indices = np.fromiter((i for v in vectors for i in v.indices), dtype=np.int64, count=indptr[-1])
    data = np.fromiter((x for v in vectors for x in v.values), dtype=np.float64, count=indptr[-1])
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), 1 << dimension_bits))


@dataclass(frozen=True)
class EncodedLog:
    """Feature matrix of a log, stored as distinct rows plus a per-event pattern id.

    Events sharing every encoded attribute share one row of ``patterns``, so
    ``patterns[pattern_ids]`` reproduces the per-event design matrix.
    """

    config: EncoderConfig
    pattern_ids: np.ndarray
    patterns: sp.csr_matrix

    @property
    def n_patterns(self) -> int:
        return self.patterns.shape[0]

    def design_matrix(self, start: int = 0, stop: int | None = None) -> sp.csr_matrix:
        return self.patterns[self.pattern_ids[start:stop]]


def _column_codes(frame: pd.DataFrame, ns: str) -> np.ndarray:
    if ns == PRICE_NAMESPACE:
        return pd.factorize(frame[PRICE_NAMESPACE].to_numpy())[0]
    if ns not in frame.columns:
        return np.zeros(len(frame), dtype=np.int64)
    col = frame[ns]
    if isinstance(col.dtype, pd.CategoricalDtype):
        return col.cat.codes.to_numpy().astype(np.int64)
    return pd.factorize(col.to_numpy())[0]


def encode_log(log: EventLog, config: EncoderConfig) -> EncodedLog:
    """Encode every event of ``log``; equivalent to :func:`encode_event` per row."""
    frame = log.frame
    n = len(frame)
    key = np.zeros(n, dtype=np.int64)
    for ns in config.namespaces:
        codes = _column_codes(frame, ns)
        key = key * (int(codes.max(initial=0)) + 1) + codes
        key = np.unique(key, return_inverse=True)[1].astype(np.int64).reshape(-1)
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    vectors = [encode_event(log[int(i)], config) for i in first]
    patterns = vectors_to_csr(vectors, config.dimension_bits)
    return EncodedLog(config, inverse.astype(np.int64).reshape(-1), patterns)


def historic_cr_feature(stats: DailyAdvertiserStats, advertiser, day: int, config: CrFeatureConfig) -> float:
    """Smoothed conversion rate of ``advertiser`` on ``day - 1``.

    Falls back to the trailing ``fallback_window_days`` ending at ``day - 1``
    when that day is empty, then to the prior ``alpha / beta``.
    """
    a, b = config.smoothing_alpha, config.smoothing_beta
    events, convs = stats.get(advertiser, day - 1)
    if events == 0:
        events, convs = stats.window_totals(advertiser, day - config.fallback_window_days, day - 1)
    return (convs + a) / (events + b)


def historic_cr_array(stats: DailyAdvertiserStats, advertisers: np.ndarray, days: np.ndarray,
                      config: CrFeatureConfig) -> np.ndarray:
    """Vectorized :func:`historic_cr_feature` over parallel arrays."""
    advertisers = np.asarray(advertisers).astype(str)
    days = np.asarray(days, dtype=np.int64)
    out = np.empty(len(days), dtype=np.float64)
    a, b = config.smoothing_alpha, config.smoothing_beta
    for adv in np.unique(advertisers):
        mask = advertisers == adv
        d = days[mask]
        e1, c1 = stats.window_totals_array(adv, d - 1, d - 1)
        ef, cf = stats.window_totals_array(adv, d - config.fallback_window_days, d - 1)
        empty = e1 == 0
        e = np.where(empty, ef, e1)
        c = np.where(empty, cf, c1)
        out[mask] = (c + a) / (e + b)
    return out


def append_cr_feature(x: SparseFeatureVector, cr: float) -> SparseFeatureVector:
    """Add ``log(cr)`` at the reserved last index of the hash space."""
    if not 0.0 < cr < 1.0:
        raise ValueError(f"cr must lie strictly inside (0, 1), got {cr}")
    reserved = (1 << x.dimension_bits) - 1
    if reserved in x.indices:
        raise ValueError("vector already carries the CR feature")
    return SparseFeatureVector(x.indices + (reserved,), x.values + (float(np.log(cr)),), x.dimension_bits)
