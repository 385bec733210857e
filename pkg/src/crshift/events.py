"""Click-event log model: records, columnar logs, TSV I/O and daily advertiser tallies."""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from .errors import ParseError

MISSING = "__missing__"

NUMERIC_COLUMNS = ("day", "time_of_day", "product_price", "label", "revenue")
CATEGORICAL_COLUMNS = ("advertiser_id", "device_type", "user_segment")
REQUIRED_COLUMNS = (
    "day",
    "time_of_day",
    "advertiser_id",
    "device_type",
    "user_segment",
    "product_price",
    "label",
    "revenue",
)
SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class EventRecord:
    day: int
    time_of_day: float
    advertiser_id: str
    device_type: str
    user_segment: str
    product_price: float
    label: int
    revenue: float = 0.0
    product_attrs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label!r}")
        if self.label == -1 and self.revenue != 0:
            raise ValueError("non-converting event must carry zero revenue")
        if self.product_price < 0 or self.revenue < 0:
            raise ValueError("price and revenue must be nonnegative")
        if not 0 <= self.time_of_day < SECONDS_PER_DAY:
            raise ValueError(f"time_of_day out of range: {self.time_of_day}")

    def attribute(self, name: str) -> str:
        """Categorical value of a named feature family, MISSING when absent."""
        if name in CATEGORICAL_COLUMNS:
            value = getattr(self, name)
        else:
            value = self.product_attrs.get(name, MISSING)
        return MISSING if value in ("", None) else str(value)


def _check_frame(frame: pd.DataFrame) -> None:
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"event frame lacks required columns {missing}")
    if len(frame) == 0:
        return
    labels = frame["label"].to_numpy()
    if not np.isin(labels, (-1, 1)).all():
        raise ValueError("labels must lie in {-1, +1}")
    revenue = frame["revenue"].to_numpy()
    if (revenue[labels == -1] != 0).any():
        raise ValueError("non-converting events must carry zero revenue")
    if (frame["product_price"].to_numpy() < 0).any() or (revenue < 0).any():
        raise ValueError("price and revenue must be nonnegative")
    tod = frame["time_of_day"].to_numpy()
    if ((tod < 0) | (tod >= SECONDS_PER_DAY)).any():
        raise ValueError("time_of_day must lie in [0, 86400)")
    day = frame["day"].to_numpy()
    order_ok = (np.diff(day) > 0) | ((np.diff(day) == 0) & (np.diff(tod) >= 0))
    if not order_ok.all():
        raise ValueError("events must be sorted by (day, time_of_day)")


class EventLog:
    """Immutable, columnar, time-sorted sequence of click events.

    The underlying frame holds one row per event with categorical columns
    stored as pandas categoricals so multi-million event logs stay compact.
    Iterating yields :class:`EventRecord` objects.
    """

    __slots__ = ("_frame", "metadata")

    def __init__(self, frame: pd.DataFrame, metadata: Mapping | None = None):
        _check_frame(frame)
        frame = frame.reset_index(drop=True)
        for col in frame.columns:
            if col not in NUMERIC_COLUMNS and not isinstance(frame[col].dtype, pd.CategoricalDtype):
                frame[col] = frame[col].astype("category")
        frame["day"] = frame["day"].astype(np.int64)
        frame["label"] = frame["label"].astype(np.int8)
        for col in ("time_of_day", "product_price", "revenue"):
            frame[col] = frame[col].astype(np.float64)
        self._frame = frame
        self.metadata = dict(metadata or {})

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame

    @property
    def attr_columns(self) -> list[str]:
        return [c for c in self._frame.columns if c not in REQUIRED_COLUMNS]

    @property
    def day_range(self) -> tuple[int, int] | None:
        """Inclusive (first_day, last_day); None marks an empty log."""
        if len(self._frame) == 0:
            return None
        days = self._frame["day"].to_numpy()
        return int(days[0]), int(days[-1])

    @property
    def days(self) -> np.ndarray:
        return self._frame["day"].to_numpy()

    @property
    def labels(self) -> np.ndarray:
        return self._frame["label"].to_numpy()

    def __len__(self) -> int:
        return len(self._frame)

    def __iter__(self) -> Iterator[EventRecord]:
        attrs = self.attr_columns
        for row in self._frame.itertuples(index=False):
            yield _record_from_row(row._asdict(), attrs)

    def __getitem__(self, i: int) -> EventRecord:
        return _record_from_row(self._frame.iloc[i].to_dict(), self.attr_columns)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        a, b = self._frame, other._frame
        if list(a.columns) != list(b.columns) or len(a) != len(b):
            return False
        for col in a.columns:
            if not np.array_equal(a[col].astype(object).to_numpy(), b[col].astype(object).to_numpy()):
                return False
        return True

    def day_bounds(self, from_day: int, to_day: int) -> tuple[int, int]:
        """Row-index half-open interval covering days in [from_day, to_day]."""
        days = self.days
        return (
            int(np.searchsorted(days, from_day, side="left")),
            int(np.searchsorted(days, to_day, side="right")),
        )

    def take_rows(self, start: int, stop: int) -> "EventLog":
        return EventLog(self._frame.iloc[start:stop], self.metadata)


def _record_from_row(row: dict, attrs: list[str]) -> EventRecord:
    return EventRecord(
        day=int(row["day"]),
        time_of_day=float(row["time_of_day"]),
        advertiser_id=str(row["advertiser_id"]),
        device_type=str(row["device_type"]),
        user_segment=str(row["user_segment"]),
        product_price=float(row["product_price"]),
        label=int(row["label"]),
        revenue=float(row["revenue"]),
        product_attrs={a: str(row[a]) for a in attrs},
    )


def log_from_records(records, metadata: Mapping | None = None) -> EventLog:
    """Build a sorted EventLog from EventRecord objects."""
    records = list(records)
    attrs = sorted({k for r in records for k in r.product_attrs})
    data = {c: [getattr(r, c) for r in records] for c in REQUIRED_COLUMNS}
    for a in attrs:
        data[a] = [r.attribute(a) for r in records]
    frame = pd.DataFrame(data, columns=list(REQUIRED_COLUMNS) + attrs)
    if len(frame):
        frame = frame.sort_values(["day", "time_of_day"], kind="stable")
    else:
        frame = frame.astype({"day": np.int64, "label": np.int8})
    return EventLog(frame, metadata)


def _to_number(values: pd.Series, column: str, integer: bool) -> np.ndarray:
    try:
        # numpy's conversion is correctly rounded, so repr() output round-trips exactly
        parsed = pd.Series(values.to_numpy().astype(np.float64))
        bad = ~np.isfinite(parsed.to_numpy())
    except ValueError:
        parsed = pd.to_numeric(values, errors="coerce")
        bad = parsed.isna().to_numpy()
    if integer and not bad.all():
        frac = parsed.to_numpy(dtype=np.float64) % 1
        bad |= ~np.isnan(frac) & (frac != 0)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"unparsable {column} value {values.iloc[row]!r}", line=row + 2)
    return parsed.to_numpy(dtype=np.int64 if integer else np.float64)


def parse_event_log(stream) -> EventLog:
    """Parse a tab-separated event log with a header row.

    ``stream`` is a text stream, a path, or a string holding the TSV
    content.  Labels coded {0, 1} are mapped to {-1, +1}; empty attribute
    cells become the :data:`MISSING` category.
    """
    if isinstance(stream, (str, os.PathLike)) and Path(stream).exists():
        text = Path(stream).read_text(encoding="utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        text = stream.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header row", line=1)
    header = lines[0].split("\t")
    absent = [c for c in REQUIRED_COLUMNS if c not in header]
    if absent:
        raise ParseError(f"header lacks required columns {absent}", line=1)
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names in header", line=1)
    n_tabs = len(header) - 1
    for i, line in enumerate(lines[1:], start=2):
        if line.count("\t") != n_tabs:
            raise ParseError(
                f"expected {len(header)} columns, found {line.count(chr(9)) + 1}", line=i
            )

    raw = pd.read_csv(
        io.StringIO("\n".join(lines) + "\n"),
        sep="\t",
        dtype=str,
        keep_default_na=False,
        na_filter=False,
        quoting=3,
    )
    data = {}
    data["day"] = _to_number(raw["day"], "day", integer=True)
    for col in ("time_of_day", "product_price", "revenue"):
        data[col] = _to_number(raw[col], col, integer=False)
    label = _to_number(raw["label"], "label", integer=True)
    bad = ~np.isin(label, (-1, 0, 1))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"label {label[row]} outside {{-1, 0, 1}}", line=row + 2)
    data["label"] = np.where(label == 1, 1, -1).astype(np.int8)
    for col in header:
        if col in NUMERIC_COLUMNS:
            continue
        values = raw[col].where(raw[col] != "", MISSING)
        data[col] = values.astype("category")
    frame = pd.DataFrame(data)[list(REQUIRED_COLUMNS) + [c for c in header if c not in REQUIRED_COLUMNS]]

    bad_rev = (frame["label"].to_numpy() == -1) & (frame["revenue"].to_numpy() != 0)
    if bad_rev.any():
        raise ParseError("non-converting event with nonzero revenue", line=int(np.flatnonzero(bad_rev)[0]) + 2)
    tod = frame["time_of_day"].to_numpy()
    bad_tod = (tod < 0) | (tod >= SECONDS_PER_DAY)
    if bad_tod.any():
        raise ParseError("time_of_day outside [0, 86400)", line=int(np.flatnonzero(bad_tod)[0]) + 2)
    neg = (frame["product_price"].to_numpy() < 0) | (frame["revenue"].to_numpy() < 0)
    if neg.any():
        raise ParseError("negative price or revenue", line=int(np.flatnonzero(neg)[0]) + 2)

    frame = frame.sort_values(["day", "time_of_day"], kind="stable")
    return EventLog(frame)


def _format_float(x: float) -> str:
    return repr(float(x))


def serialize_event_log(log: EventLog) -> str:
    """Render the log as TSV text (header row, ``\\n`` line endings)."""
    frame = log.frame
    cols = list(frame.columns)
    out = [frame[c].astype(str).to_numpy() if c not in NUMERIC_COLUMNS else None for c in cols]
    for j, c in enumerate(cols):
        if c in ("day", "label"):
            out[j] = frame[c].to_numpy().astype(str)
        elif c in NUMERIC_COLUMNS:
            out[j] = np.array([_format_float(v) for v in frame[c].to_numpy()], dtype=object)
    buf = io.StringIO()
    buf.write("\t".join(cols) + "\n")
    if len(frame):
        rows = np.stack([np.asarray(o, dtype=object) for o in out], axis=1)
        buf.write("\n".join("\t".join(r) for r in rows))
        buf.write("\n")
    return buf.getvalue()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def log_metadata(log: EventLog) -> dict:
    meta = dict(log.metadata)
    meta["schema"] = {
        "required": list(REQUIRED_COLUMNS),
        "product_attrs": log.attr_columns,
        "missing_token": MISSING,
        "label_coding": "{-1,+1}",
    }
    meta["day_range"] = list(log.day_range) if log.day_range else None
    meta["n_events"] = len(log)
    return meta


def read_event_log(path) -> EventLog:
    """Read a TSV log plus its JSON sidecar when present."""
    log = parse_event_log(Path(path))
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        log = EventLog(log.frame, {k: v for k, v in meta.items() if k not in ("schema", "day_range", "n_events")})
    return log


def slice_window(log: EventLog, from_day: int, to_day: int) -> EventLog:
    """Events with ``from_day <= day <= to_day``, order preserved."""
    if from_day > to_day:
        raise ValueError(f"from_day {from_day} > to_day {to_day}")
    lo, hi = log.day_bounds(from_day, to_day)
    return log.take_rows(lo, hi)


class DailyAdvertiserStats:
    """Per-(advertiser, day) event and conversion tallies.

    Backed by a dense per-advertiser table over the source log's day range
    with cumulative sums, so window totals are O(1).  Immutable.
    """

    __slots__ = ("_first", "_last", "_index", "_events", "_convs", "_cum_e", "_cum_c")

    def __init__(self, table: Mapping[tuple[str, int], tuple[int, int]], day_range=None):
        table = {k: v for k, v in table.items() if v[0] > 0}
        for (adv, day), (e, c) in table.items():
            if c > e or c < 0:
                raise ValueError(f"conversions exceed events for {(adv, day)}")
        if day_range is None and table:
            days = [d for _, d in table]
            day_range = (min(days), max(days))
        if day_range is None:
            day_range = (0, -1)
        self._first, self._last = int(day_range[0]), int(day_range[1])
        advs = sorted({a for a, _ in table})
        self._index = {a: i for i, a in enumerate(advs)}
        width = max(self._last - self._first + 1, 0)
        self._events = np.zeros((len(advs), width), dtype=np.int64)
        self._convs = np.zeros((len(advs), width), dtype=np.int64)
        for (adv, day), (e, c) in table.items():
            if not self._first <= day <= self._last:
                raise ValueError(f"day {day} outside stats range {day_range}")
            self._events[self._index[adv], day - self._first] = e
            self._convs[self._index[adv], day - self._first] = c
        self._build_cumulative()

    def _build_cumulative(self):
        pad = np.zeros((self._events.shape[0], 1), dtype=np.int64)
        self._cum_e = np.hstack([pad, np.cumsum(self._events, axis=1)])
        self._cum_c = np.hstack([pad, np.cumsum(self._convs, axis=1)])

    @classmethod
    def _from_arrays(cls, advs, first, last, events, convs):
        obj = cls.__new__(cls)
        obj._first, obj._last = first, last
        obj._index = {a: i for i, a in enumerate(advs)}
        obj._events, obj._convs = events, convs
        obj._build_cumulative()
        return obj

    @property
    def advertisers(self) -> list[str]:
        return list(self._index)

    @property
    def first_day(self) -> int:
        return self._first

    @property
    def last_day(self) -> int:
        """Last day covered by the source log (``first_day - 1`` when empty)."""
        return self._last

    @property
    def max_event_day(self) -> int | None:
        """Latest day holding at least one event."""
        if self._events.size == 0:
            return None
        cols = np.flatnonzero(self._events.sum(axis=0))
        return int(cols[-1]) + self._first if cols.size else None

    def __getitem__(self, key: tuple[str, int]) -> tuple[int, int]:
        e, c = self.get(*key)
        if e == 0:
            raise KeyError(key)
        return e, c

    def __contains__(self, key) -> bool:
        return self.get(*key)[0] > 0

    def get(self, advertiser, day: int) -> tuple[int, int]:
        i = self._index.get(advertiser)
        if i is None or not self._first <= day <= self._last:
            return 0, 0
        return int(self._events[i, day - self._first]), int(self._convs[i, day - self._first])

    def items(self):
        for adv, i in self._index.items():
            for j in np.flatnonzero(self._events[i]):
                yield (adv, int(j) + self._first), (int(self._events[i, j]), int(self._convs[i, j]))

    def __len__(self) -> int:
        return int(np.count_nonzero(self._events))

    def window_totals(self, advertiser, from_day: int, to_day: int) -> tuple[int, int]:
        """(events, conversions) summed over days in [from_day, to_day]."""
        i = self._index.get(advertiser)
        lo = max(from_day, self._first) - self._first
        hi = min(to_day, self._last) - self._first + 1
        if i is None or hi <= lo:
            return 0, 0
        return (
            int(self._cum_e[i, hi] - self._cum_e[i, lo]),
            int(self._cum_c[i, hi] - self._cum_c[i, lo]),
        )

    def window_totals_array(self, advertiser, from_days: np.ndarray, to_days: np.ndarray):
        """Vectorized :meth:`window_totals` over arrays of window bounds."""
        from_days = np.asarray(from_days)
        to_days = np.asarray(to_days)
        i = self._index.get(advertiser)
        if i is None:
            z = np.zeros(from_days.shape, dtype=np.int64)
            return z, z.copy()
        lo = np.clip(from_days - self._first, 0, self._events.shape[1])
        hi = np.clip(to_days - self._first + 1, 0, self._events.shape[1])
        hi = np.maximum(hi, lo)
        return self._cum_e[i, hi] - self._cum_e[i, lo], self._cum_c[i, hi] - self._cum_c[i, lo]

    def truncated(self, before_day: int) -> "DailyAdvertiserStats":
        """Stats restricted to days strictly before ``before_day``."""
        last = min(self._last, before_day - 1)
        width = max(last - self._first + 1, 0)
        return DailyAdvertiserStats._from_arrays(
            list(self._index), self._first, last, self._events[:, :width].copy(), self._convs[:, :width].copy()
        )

    def as_frame(self) -> pd.DataFrame:
        rows = [(a, d, e, c) for (a, d), (e, c) in self.items()]
        return pd.DataFrame(rows, columns=["advertiser_id", "day", "event_count", "conversion_count"])


def daily_advertiser_stats(log: EventLog) -> DailyAdvertiserStats:
    """Exact per-(advertiser, day) event and conversion counts."""
    if len(log) == 0:
        return DailyAdvertiserStats({})
    first, last = log.day_range
    frame = log.frame
    adv = frame["advertiser_id"]
    codes = adv.cat.codes.to_numpy()
    cats = [str(c) for c in adv.cat.categories]
    present = np.unique(codes)
    order = sorted(present, key=lambda k: cats[k])
    remap = np.full(len(cats), -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    rows = remap[codes]
    cols = frame["day"].to_numpy() - first
    width = last - first + 1
    flat = rows * width + cols
    size = len(order) * width
    events = np.bincount(flat, minlength=size).reshape(len(order), width)
    convs = np.bincount(flat, weights=(frame["label"].to_numpy() == 1), minlength=size)
    convs = convs.astype(np.int64).reshape(len(order), width)
    return DailyAdvertiserStats._from_arrays([cats[k] for k in order], first, last, events, convs)
