"""Training and scoring for the baseline, HCRFM, TDWM and MLTSTM model kinds."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import LeakageError, TrainingError
from .events import DailyAdvertiserStats, EventLog, EventRecord, daily_advertiser_stats
from .features import (
    CrFeatureConfig,
    EncodedLog,
    EncoderConfig,
    append_cr_feature,
    encode_event,
    encode_log,
    historic_cr_array,
    historic_cr_feature,
)
from .optim import (
    ModelWeights,
    OptimConfig,
    WeightedDataset,
    adapt_lambda,
    decay_weights,
    fit,
    read_weights,
    write_weights,
)

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    BASELINE = "baseline"
    HCRFM = "hcrfm"
    TDWM = "tdwm"
    MLTSTM = "mltstm"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.BASELINE
    long_window_days: int = 21
    short_window_days: int = 7
    half_life_days: float = 5.0
    alpha: float = 0.6
    lam: float = 1.0
    optim: OptimConfig = field(default_factory=OptimConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cr_config: CrFeatureConfig = field(default_factory=CrFeatureConfig)

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.long_window_days < 1 or self.short_window_days < 1:
            raise ValueError("window lengths must be positive")
        if self.short_window_days > self.long_window_days:
            raise ValueError("short_window_days must not exceed long_window_days")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.half_life_days <= 0 or self.lam <= 0:
            raise ValueError("half_life_days and lam must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "long_window_days": self.long_window_days,
            "short_window_days": self.short_window_days,
            "half_life_days": self.half_life_days,
            "alpha": self.alpha,
            "lam": self.lam,
            "optim": self.optim.to_dict(),
            "encoder": self.encoder.to_dict(),
            "cr_config": self.cr_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key, sub in (("optim", OptimConfig), ("encoder", EncoderConfig), ("cr_config", CrFeatureConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = sub.from_dict(d[key])
        return cls(**d)

    @property
    def training_key(self) -> str:
        """Identity of the trained weights (alpha only affects mixing, not training)."""
        d = self.to_dict()
        d.pop("alpha")
        if self.kind is not ModelKind.TDWM:
            d.pop("half_life_days")
        if self.kind is not ModelKind.MLTSTM:
            d.pop("short_window_days")
        if self.kind is not ModelKind.HCRFM:
            d.pop("cr_config")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class TrainedModel:
    spec: ModelSpec
    weights: tuple[ModelWeights, ...]
    trained_for_day: int
    windows: tuple[tuple[int, int], ...]
    stats_snapshot: DailyAdvertiserStats | None = None
    diagnostics: tuple[dict, ...] = ()

    def __post_init__(self):
        expected = 2 if self.spec.kind is ModelKind.MLTSTM else 1
        if len(self.weights) != expected:
            raise ValueError(f"{self.spec.kind.value} model needs {expected} weight vector(s)")
        if self.spec.kind is ModelKind.HCRFM and self.weights[0].dimension_bits != self.spec.encoder.dimension_bits:
            raise ValueError("CR index does not match the encoder layout")


class PreparedLog:
    """A log plus cached derived data shared by many trainings and scorings."""

    def __init__(self, log: EventLog):
        self.log = log
        self.days = log.days
        self.labels = log.labels
        self._encoded: dict[str, EncodedLog] = {}
        self._stats: DailyAdvertiserStats | None = None
        adv = log.frame["advertiser_id"]
        self.adv_names = np.array([str(c) for c in adv.cat.categories], dtype=object)
        self.adv_codes = adv.cat.codes.to_numpy().astype(np.int64)

    def encoded(self, config: EncoderConfig) -> EncodedLog:
        key = config.fingerprint()
        if key not in self._encoded:
            self._encoded[key] = encode_log(self.log, config)
        return self._encoded[key]

    @property
    def stats(self) -> DailyAdvertiserStats:
        if self._stats is None:
            self._stats = daily_advertiser_stats(self.log)
        return self._stats

    def bounds(self, from_day: int, to_day: int) -> tuple[int, int]:
        return self.log.day_bounds(from_day, to_day)

    def cr_values(self, start: int, stop: int, stats: DailyAdvertiserStats, config: CrFeatureConfig,
                  horizon: int | None = None) -> np.ndarray:
        """Historic CR feature for rows ``[start, stop)``, from ``stats`` only.

        ``stats`` may not reach ``horizon`` (default: the earliest row's day).
        Each row reads only days before its own day regardless.
        """
        days = self.days[start:stop]
        codes = self.adv_codes[start:stop]
        if len(days) == 0:
            return np.empty(0)
        horizon = int(days.min()) if horizon is None else horizon
        if stats.last_day >= horizon:
            raise LeakageError(f"CR statistics reach day {stats.last_day}, horizon is day {horizon}")
        lo = int(days.min())
        width = int(days.max()) - lo + 1
        grid = np.empty((len(self.adv_names), width))
        grid_days = np.arange(lo, lo + width)
        for k, name in enumerate(self.adv_names):
            grid[k] = historic_cr_array(stats, np.full(width, name), grid_days, config)
        return grid[codes, days - lo]


def _training_rows(prep: PreparedLog, spec: ModelSpec, window: tuple[int, int], target_day: int,
                   kind: ModelKind) -> tuple[WeightedDataset, float]:
    lo, hi = window
    start, stop = prep.bounds(lo, hi)
    if stop <= start:
        raise TrainingError(f"training window [{lo}, {hi}] holds no events")
    days = prep.days[start:stop]
    if int(days.max()) >= target_day:
        raise LeakageError(f"training rows from day {int(days.max())} for target day {target_day}")
    enc = prep.encoded(spec.encoder)
    pids = enc.pattern_ids[start:stop]
    pos = (prep.labels[start:stop] == 1).astype(np.int64)
    lam = spec.lam

    if kind is ModelKind.HCRFM:
        key = (pids * (hi - lo + 1) + (days - lo)) * 2 + pos
    else:
        key = pids * 2 + pos
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    if kind is ModelKind.TDWM:
        per_event = decay_weights(days, target_day - 1, spec.half_life_days)
        lam = adapt_lambda(spec.lam, per_event)
        weights = np.bincount(inverse, weights=per_event, minlength=len(uniq))
    else:
        weights = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    X = enc.patterns[pids[first]]
    if kind is ModelKind.HCRFM:
        stats = prep.stats.truncated(target_day)
        cr = prep.cr_values(start, stop, stats, spec.cr_config, horizon=target_day)[first]
        if np.any((cr <= 0) | (cr >= 1)):
            raise TrainingError("historic CR outside (0, 1)")
        col = sp.csr_matrix(
            (np.log(cr), (np.arange(len(cr)), np.full(len(cr), spec.encoder.cr_index))), shape=X.shape
        )
        X = (X + col).tocsr()
    y = np.where(uniq % 2 == 1, 1.0, -1.0)
    return WeightedDataset(X, y, weights, spec.encoder.dimension_bits), lam


def _fit_window(prep: PreparedLog, spec: ModelSpec, window, target_day, kind) -> tuple[ModelWeights, dict]:
    data, lam = _training_rows(prep, spec, window, target_day, kind)
    result = fit(data, lam, spec.optim)
    diag = {
        "window": list(window),
        "rows": len(data),
        "lambda": lam,
        "iterations": result.iterations,
        "final_grad_norm": result.final_grad_norm,
        "converged": result.converged,
    }
    return result.weights, diag


def train_model(log: EventLog | PreparedLog, spec: ModelSpec, target_day: int,
                window: tuple[int, int] | None = None) -> TrainedModel:
    """Train one model for scoring ``target_day`` from strictly earlier days.

    The training window defaults to ``[target_day - long_window_days,
    target_day - 1]``; an explicit ``window`` reaching ``target_day`` raises
    :class:`LeakageError`.
    """
    prep = log if isinstance(log, PreparedLog) else PreparedLog(log)
    if window is None:
        window = (target_day - spec.long_window_days, target_day - 1)
    lo, hi = window
    if hi >= target_day:
        raise LeakageError(f"training window [{lo}, {hi}] touches target day {target_day}")
    if lo > hi:
        raise TrainingError(f"empty training window [{lo}, {hi}]")

    if spec.kind is ModelKind.MLTSTM:
        short = (max(lo, hi - spec.short_window_days + 1), hi)
        w_short, d_short = _fit_window(prep, spec, short, target_day, ModelKind.BASELINE)
        if short == (lo, hi):
            w_long, d_long = w_short, d_short
        else:
            w_long, d_long = _fit_window(prep, spec, (lo, hi), target_day, ModelKind.BASELINE)
        return TrainedModel(spec, (w_short, w_long), target_day, (short, (lo, hi)), None, (d_short, d_long))

    weights, diag = _fit_window(prep, spec, (lo, hi), target_day, spec.kind)
    snapshot = prep.stats.truncated(target_day) if spec.kind is ModelKind.HCRFM else None
    return TrainedModel(spec, (weights,), target_day, ((lo, hi),), snapshot, (diag,))


def _check_scoring_day(model: TrainedModel, day: int) -> None:
    if day > model.trained_for_day:
        raise ValueError(f"model trained for day {model.trained_for_day} cannot score day {day}")


def score_event(model: TrainedModel, event: EventRecord, stats: DailyAdvertiserStats | None = None) -> float:
    """Predicted conversion probability of one event."""
    _check_scoring_day(model, event.day)
    x = encode_event(event, model.spec.encoder)
    if model.spec.kind is ModelKind.HCRFM:
        if stats is None:
            stats = model.stats_snapshot
        if stats.last_day >= event.day:
            raise LeakageError(f"statistics reach day {stats.last_day}, event is on day {event.day}")
        cr = historic_cr_feature(stats, event.advertiser_id, event.day, model.spec.cr_config)
        x = append_cr_feature(x, cr)
    probs = [float(expit(x.dot(w.w))) for w in model.weights]
    if model.spec.kind is ModelKind.MLTSTM:
        a = model.spec.alpha
        return a * probs[0] + (1 - a) * probs[1]
    return probs[0]


def component_probabilities(model: TrainedModel, prep: PreparedLog, start: int, stop: int,
                            stats: DailyAdvertiserStats | None = None) -> list[np.ndarray]:
    """Per-weight-vector probabilities for rows ``[start, stop)`` of a prepared log."""
    if stop > start:
        _check_scoring_day(model, int(prep.days[stop - 1]))
    enc = prep.encoded(model.spec.encoder)
    pids = enc.pattern_ids[start:stop]
    extra = 0.0
    out = []
    for w in model.weights:
        z = (enc.patterns @ w.w)[pids]
        if model.spec.kind is ModelKind.HCRFM:
            if stats is None:
                stats = model.stats_snapshot
            if isinstance(extra, float):
                extra = np.log(prep.cr_values(start, stop, stats, model.spec.cr_config))
            z = z + w.w[model.spec.encoder.cr_index] * extra
        out.append(expit(z))
    return out


def mix(components: list[np.ndarray], alpha: float) -> np.ndarray:
    if len(components) == 1:
        return components[0]
    return alpha * components[0] + (1 - alpha) * components[1]


def score_rows(model: TrainedModel, prep: PreparedLog, start: int, stop: int,
               stats: DailyAdvertiserStats | None = None) -> np.ndarray:
    return mix(component_probabilities(model, prep, start, stop, stats), model.spec.alpha)


def score_log(model: TrainedModel, log: EventLog, stats: DailyAdvertiserStats | None = None) -> np.ndarray:
    """Vectorized :func:`score_event` over every event of ``log``."""
    prep = PreparedLog(log)
    return score_rows(model, prep, 0, len(log), stats)


def model_descriptor(model: TrainedModel) -> dict:
    return {
        "model_kind": model.spec.kind.value,
        "spec": model.spec.to_dict(),
        "encoder_fingerprint": model.spec.encoder.fingerprint(),
        "cr_feature_index": model.spec.encoder.cr_index,
        "trained_for_day": model.trained_for_day,
        "training_windows": [list(w) for w in model.windows],
        "lambda": [w.lam for w in model.weights],
        "lambda_note": "both mixture components use the configured lambda" if model.spec.kind is ModelKind.MLTSTM else None,
        "diagnostics": list(model.diagnostics),
    }


def save_model(model: TrainedModel, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` (weights) and ``<prefix>.json`` (descriptor)."""
    prefix = Path(prefix)
    bin_path, json_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    alpha = model.spec.alpha if model.spec.kind is ModelKind.MLTSTM else None
    write_weights(bin_path, model.weights, alpha)
    json_path.write_text(json.dumps(model_descriptor(model), indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load_model(prefix, stats: DailyAdvertiserStats | None = None) -> TrainedModel:
    prefix = Path(prefix)
    desc = json.loads(prefix.with_suffix(".json").read_text())
    blocks, alpha = read_weights(prefix.with_suffix(".bin"))
    spec = ModelSpec.from_dict(desc["spec"])
    if alpha is not None:
        spec = replace(spec, alpha=alpha)
    if spec.encoder.fingerprint() != desc["encoder_fingerprint"]:
        raise ValueError("encoder fingerprint mismatch between artifact and descriptor")
    weights = tuple(ModelWeights(b.w, b.dimension_bits, lam) for b, lam in zip(blocks, desc["lambda"]))
    return TrainedModel(spec, weights, desc["trained_for_day"],
                        tuple(tuple(w) for w in desc["training_windows"]), stats)
