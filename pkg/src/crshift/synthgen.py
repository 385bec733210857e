"""Synthetic multi-advertiser click logs with scheduled conversion-rate shifts.

Each advertiser draws from its own random substream (seeded from the global
seed and a stable hash of its id), so editing one profile never changes
another advertiser's events.  Events sample device, user segment and product
uniformly; the remaining product attributes and the price come from a
per-advertiser catalog drawn once per product.  A shift multiplies the advertiser's base CR
before the logit; static per-category log-odds effects are added on top.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .events import EventLog
from .features import fnv1a_64

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-6
CLAMP_WARN_FRACTION = 0.01
PRODUCT_NAMESPACE = "product_id"
# attributes of the advertised product: fixed per product id by the advertiser's catalog
CATALOG_NAMESPACES = ("category", "brand", "gender", "age_group")
DEFAULT_VOCAB = {
    "device_type": 3,
    "user_segment": 2,
    "product_id": 40,
    "category": 8,
    "brand": 12,
    "gender": 3,
    "age_group": 4,
}


class GeneratorWarning(UserWarning):
    pass


def category_value(advertiser_id: str, namespace: str, k: int) -> str:
    """Name of the k-th category of a namespace; product ids are advertiser-scoped."""
    if namespace == PRODUCT_NAMESPACE:
        return f"{advertiser_id}:product_{k}"
    return f"{namespace}_{k}"


@dataclass(frozen=True)
class AdvertiserProfile:
    advertiser_id: str
    daily_events: int
    base_cr: float
    feature_vocab: dict = field(default_factory=lambda: dict(DEFAULT_VOCAB))
    feature_effects: dict = field(default_factory=dict)
    shift_schedule: tuple = ()
    price_range: tuple = (5.0, 200.0)

    def __post_init__(self):
        object.__setattr__(self, "shift_schedule", tuple(tuple(s) for s in self.shift_schedule))
        if self.daily_events <= 0:
            raise ValueError("daily_events must be positive")
        if not 0 < self.base_cr < 1:
            raise ValueError("base_cr must lie in (0, 1)")
        for start, end, mult in self.shift_schedule:
            if start > end or mult <= 0:
                raise ValueError(f"invalid shift {(start, end, mult)}")
        top = max([m for _, _, m in self.shift_schedule] + [1.0])
        if self.base_cr * top >= 1:
            raise ValueError("base_cr times the largest multiplier must stay below 1")
        if any(n < 1 for n in self.feature_vocab.values()):
            raise ValueError("every namespace needs at least one category")

    def multipliers(self, days: np.ndarray) -> np.ndarray:
        """CR multiplier per day; overlapping shifts compound."""
        out = np.ones(len(days))
        for start, end, mult in self.shift_schedule:
            out[(days >= start) & (days <= end)] *= mult
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shift_schedule"] = [list(s) for s in self.shift_schedule]
        d["price_range"] = list(self.price_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdvertiserProfile":
        d = dict(d)
        d["shift_schedule"] = tuple(tuple(s) for s in d.get("shift_schedule", ()))
        d["price_range"] = tuple(d.get("price_range", (5.0, 200.0)))
        return cls(**d)


@dataclass(frozen=True)
class SimConfig:
    day_range: tuple[int, int]
    profiles: tuple[AdvertiserProfile, ...]
    seed: int = 0
    epoch_date: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "day_range", tuple(self.day_range))
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if not self.profiles:
            raise ValueError("at least one advertiser profile is required")
        first, last = self.day_range
        if first > last:
            raise ValueError("empty day range")
        ids = [p.advertiser_id for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate advertiser ids")
        for p in self.profiles:
            for start, end, _ in p.shift_schedule:
                if start < first or end > last:
                    raise ValueError(f"shift {(start, end)} of {p.advertiser_id} leaves the log range")

    def to_dict(self) -> dict:
        return {
            "day_range": list(self.day_range),
            "seed": self.seed,
            "epoch_date": self.epoch_date,
            "profiles": [p.to_dict() for p in self.profiles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(
            day_range=tuple(d["day_range"]),
            profiles=tuple(AdvertiserProfile.from_dict(p) for p in d["profiles"]),
            seed=int(d.get("seed", 0)),
            epoch_date=d.get("epoch_date"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def advertiser_rng(seed: int, advertiser_id: str) -> np.random.Generator:
    h = fnv1a_64(f"advertiser:{advertiser_id}")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, h & 0xFFFFFFFF, h >> 32]))


def product_catalog(advertiser_id: str, vocab: dict, seed: int, price_range=(5.0, 200.0)):
    """Per-product price and catalog attribute codes, from a dedicated substream."""
    rng = advertiser_rng(seed, f"catalog:{advertiser_id}")
    n_products = vocab.get(PRODUCT_NAMESPACE, 1)
    lo, hi = price_range
    prices = np.round(np.exp(rng.uniform(np.log(lo), np.log(hi), n_products)), 2)
    catalog = {ns: rng.integers(0, vocab[ns], size=n_products) for ns in vocab if ns in CATALOG_NAMESPACES}
    return prices, catalog


def _simulate_advertiser(profile: AdvertiserProfile, first: int, last: int, seed: int):
    rng = advertiser_rng(seed, profile.advertiser_id)
    namespaces = list(profile.feature_vocab)
    prices, catalog = product_catalog(profile.advertiser_id, profile.feature_vocab, seed, profile.price_range)

    day_list = np.arange(first, last + 1)
    counts = rng.poisson(profile.daily_events, size=len(day_list))
    days = np.repeat(day_list, counts)
    n = len(days)
    tod = rng.integers(0, 86400, size=n).astype(np.float64)
    codes = {}
    for ns in namespaces:
        if ns in CATALOG_NAMESPACES and PRODUCT_NAMESPACE in profile.feature_vocab:
            continue
        codes[ns] = rng.integers(0, profile.feature_vocab[ns], size=n)
    for ns in namespaces:
        if ns not in codes:
            codes[ns] = catalog[ns][codes[PRODUCT_NAMESPACE]]

    base = profile.base_cr * profile.multipliers(day_list)
    z = np.repeat(logit(np.clip(base, PROB_FLOOR, 1 - PROB_FLOOR)), counts)
    for ns in namespaces:
        table = np.array([
            profile.feature_effects.get(f"{ns}={category_value(profile.advertiser_id, ns, k)}", 0.0)
            for k in range(profile.feature_vocab[ns])
        ])
        if np.any(table):
            z = z + table[codes[ns]]
    p = expit(z)
    clamped = (p < PROB_FLOOR) | (p > 1 - PROB_FLOOR)
    p = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    label = np.where(rng.random(n) < p, 1, -1).astype(np.int8)
    price = prices[codes[PRODUCT_NAMESPACE]] if PRODUCT_NAMESPACE in codes else np.full(n, prices[0])
    revenue = np.where(label == 1, price, 0.0)
    return days, tod, codes, price, label, revenue, int(clamped.sum())


def generate_log(config: SimConfig) -> EventLog:
    """Draw a complete event log; identical configs give identical logs."""
    first, last = config.day_range
    parts = []
    n_clamped = 0
    for prof in config.profiles:
        days, tod, codes, price, label, revenue, clamped = _simulate_advertiser(prof, first, last, config.seed)
        n_clamped += clamped
        parts.append((prof, days, tod, codes, price, label, revenue))

    total = sum(len(p[1]) for p in parts)
    if total and n_clamped / total > CLAMP_WARN_FRACTION:
        warnings.warn(f"probability clamping engaged on {n_clamped}/{total} events; profile mis-specified",
                      GeneratorWarning, stacklevel=2)

    adv_ids = sorted(p.advertiser_id for p in config.profiles)
    adv_code = {a: i for i, a in enumerate(adv_ids)}
    namespaces = []
    for prof in config.profiles:
        namespaces += [ns for ns in prof.feature_vocab if ns not in namespaces]

    cat_values: dict[str, list[str]] = {}
    for ns in namespaces:
        values = set()
        for prof in config.profiles:
            values.update(category_value(prof.advertiser_id, ns, k) for k in range(prof.feature_vocab.get(ns, 0)))
        cat_values[ns] = sorted(values) + (["__missing__"] if any(ns not in p.feature_vocab for p in config.profiles) else [])

    def cat_codes(prof, codes, ns):
        lookup = {v: i for i, v in enumerate(cat_values[ns])}
        if ns not in prof.feature_vocab:
            return np.full(len(next(iter(codes.values()), [])), lookup["__missing__"])
        table = np.array([lookup[category_value(prof.advertiser_id, ns, k)] for k in range(prof.feature_vocab[ns])])
        return table[codes[ns]]

    cols = {k: [] for k in ("day", "time_of_day", "adv", "product_price", "label", "revenue")}
    ns_cols = {ns: [] for ns in namespaces}
    for prof, days, tod, codes, price, label, revenue in parts:
        cols["day"].append(days)
        cols["time_of_day"].append(tod)
        cols["adv"].append(np.full(len(days), adv_code[prof.advertiser_id]))
        cols["product_price"].append(price)
        cols["label"].append(label)
        cols["revenue"].append(revenue)
        for ns in namespaces:
            ns_cols[ns].append(cat_codes(prof, codes, ns))
    arr = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.lexsort((arr["adv"], arr["time_of_day"], arr["day"]))

    data = {
        "day": arr["day"][order].astype(np.int64),
        "time_of_day": arr["time_of_day"][order],
        "advertiser_id": pd.Categorical.from_codes(arr["adv"][order], adv_ids),
    }
    for ns in ("device_type", "user_segment"):
        if ns in ns_cols:
            data[ns] = pd.Categorical.from_codes(np.concatenate(ns_cols[ns])[order], cat_values[ns])
        else:
            data[ns] = pd.Categorical.from_codes(np.zeros(total, dtype=np.int64), ["__missing__"])
    data["product_price"] = arr["product_price"][order]
    data["label"] = arr["label"][order]
    data["revenue"] = arr["revenue"][order]
    for ns in namespaces:
        if ns not in ("device_type", "user_segment"):
            data[ns] = pd.Categorical.from_codes(np.concatenate(ns_cols[ns])[order], cat_values[ns])
    meta = {"generator": "crshift.synthgen", "seed": config.seed}
    if config.epoch_date:
        meta["epoch_date"] = config.epoch_date
    return EventLog(pd.DataFrame(data), meta)


def random_effects(advertiser_id: str, vocab: dict, scale: dict, seed: int) -> dict:
    """Normal log-odds effects per category, reproducible from ``seed``.

    Advertiser-scoped namespaces (product ids) get per-advertiser draws; all
    other namespaces share one draw so equal category names mean equal
    effects.  Effects are shifted so the mean odds multiplier is 1 under the
    generator's sampling (catalog attributes folded into the product effect),
    which keeps the pooled CR close to ``base_cr`` for small rates.
    """
    effects = {}
    draws = {}
    for ns, count in vocab.items():
        sd = scale.get(ns, 0.0)
        owner = advertiser_id if ns == PRODUCT_NAMESPACE else "shared"
        rng = advertiser_rng(seed, f"effects:{owner}:{ns}")
        draws[ns] = rng.normal(0.0, sd, size=count) if sd > 0 else np.zeros(count)
    _, catalog = product_catalog(advertiser_id, vocab, seed)
    for ns, d in draws.items():
        if ns in CATALOG_NAMESPACES and PRODUCT_NAMESPACE in vocab:
            continue
        if ns == PRODUCT_NAMESPACE:
            per_product = d + sum(draws[c][catalog[c]] for c in catalog)
            d = d - np.log(np.mean(np.exp(per_product)))
        else:
            d = d - np.log(np.mean(np.exp(d)))
        draws[ns] = d
    for ns, d in draws.items():
        if scale.get(ns, 0.0) == 0 and not (ns == PRODUCT_NAMESPACE and catalog):
            continue
        for k, v in enumerate(d):
            effects[f"{ns}={category_value(advertiser_id, ns, k)}"] = round(float(v), 6)
    return effects


EFFECT_SCALES = {
    "device_type": 0.3,
    "user_segment": 0.5,
    "product_id": 0.9,
    "category": 0.4,
    "brand": 0.3,
    "gender": 0.1,
    "age_group": 0.2,
}

# (id, daily events, CR) per advertiser, daily averages of the comparison study
TABLE1_TRAFFIC = (
    ("adv1", 21500, 0.012),
    ("adv2", 5500, 0.018),
    ("adv3", 850, 0.024),
    ("adv4", 14550, 0.079),
    ("adv5", 5500, 0.018),
)

# one extreme and one average shift each; stationary stretches supply the moderate periods
TABLE1_SHIFTS = {
    "adv1": ((40, 48, 1.15), (62, 75, 0.6)),
    "adv2": ((36, 44, 0.85), (55, 66, 1.8)),
    "adv3": ((40, 47, 1.2), (70, 82, 2.5)),
    "adv4": ((48, 58, 0.55), (70, 78, 1.12)),
    "adv5": ((38, 45, 0.8), (66, 76, 2.0)),
}


def table1_preset(seed: int = 2019, n_days: int = 90) -> SimConfig:
    """Five advertisers with the traffic volumes of the comparison study, 90 days."""
    profiles = []
    for adv, events, cr in TABLE1_TRAFFIC:
        profiles.append(AdvertiserProfile(
            advertiser_id=adv,
            daily_events=events,
            base_cr=cr,
            feature_vocab=dict(DEFAULT_VOCAB),
            feature_effects=random_effects(adv, DEFAULT_VOCAB, EFFECT_SCALES, seed),
            shift_schedule=TABLE1_SHIFTS[adv],
        ))
    return SimConfig(day_range=(0, n_days - 1), profiles=tuple(profiles), seed=seed, epoch_date="2018-10-01")


def regime_schedule(rng: np.random.Generator, first: int, last: int, min_len: int, max_len: int,
                    log_sd: float) -> tuple:
    """Back-to-back regimes of random length with lognormal CR multipliers."""
    out = []
    start = first
    while start <= last:
        end = min(start + int(rng.integers(min_len, max_len + 1)) - 1, last)
        out.append((start, end, round(float(np.exp(rng.normal(0.0, log_sd))), 4)))
        start = end + 1
    return tuple(out)


SHIFT_HEAVY_TRAFFIC = (
    ("sh1", 8000, 0.02),
    ("sh2", 5000, 0.03),
    ("sh3", 3000, 0.04),
)


def shift_heavy_preset(seed: int = 7, n_days: int = 70, min_regime: int = 5, max_regime: int = 10,
                       log_sd: float = 0.4, volume: float = 1.0) -> SimConfig:
    """Moderate-volume advertisers whose CR jumps to a new level every 5 to 10 days."""
    profiles = []
    for adv, events, cr in SHIFT_HEAVY_TRAFFIC:
        rng = advertiser_rng(seed, f"regimes:{adv}")
        schedule = regime_schedule(rng, 0, n_days - 1, min_regime, max_regime, log_sd)
        top = max(m for _, _, m in schedule)
        if cr * top >= 0.5:
            schedule = tuple((s, e, min(m, 0.5 / cr)) for s, e, m in schedule)
        profiles.append(AdvertiserProfile(
            advertiser_id=adv,
            daily_events=max(1, round(events * volume)),
            base_cr=cr,
            feature_vocab=dict(DEFAULT_VOCAB),
            feature_effects=random_effects(adv, DEFAULT_VOCAB, EFFECT_SCALES, seed),
            shift_schedule=schedule,
        ))
    return SimConfig(day_range=(0, n_days - 1), profiles=tuple(profiles), seed=seed, epoch_date="2019-01-01")
