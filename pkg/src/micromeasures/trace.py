"""Call-detail-record traces: parsing, filtering, splitting and synthetic generation.

Antennas are 1-based in files and 0-based everywhere in memory.  Timestamps are
integer seconds, interpreted as local wall-clock time (1970-01-01 is a Thursday).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400
TRACE_HEADER = ("user_id", "antenna_id", "timestamp")
SUBPREF_HEADER = ("antenna_id", "subpref_id")
TRACE_FORMATS = ("csv",)

# Monday 1970-01-05 00:00, a convenient origin for synthetic traces.
MONDAY_EPOCH = 4 * SECONDS_PER_DAY


class Period(IntEnum):
    MORNING = 0
    AFTERNOON = 1
    NIGHT = 2


class DayType(IntEnum):
    WEEKDAY = 0
    WEEKEND = 1


N_PERIODS = len(Period)
N_DAYTYPES = len(DayType)

# (morning start, afternoon start, night start), hours of the local day
DEFAULT_BOUNDARIES = (6, 13, 20)


class TimeBucket(NamedTuple):
    period: Period
    daytype: DayType


class CallRecord(NamedTuple):
    user: str
    antenna: int
    timestamp: int


class TraceError(ValueError):
    pass


def weekday_of(timestamps) -> np.ndarray:
    """Day of week, Monday = 0."""
    days = np.floor_divide(np.asarray(timestamps, dtype=np.int64), SECONDS_PER_DAY)
    return (days + 3) % 7


def bucket_of(timestamps, boundaries=DEFAULT_BOUNDARIES) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised (period, daytype) for an array of timestamps.

    Night wraps midnight; the early-morning hours belong to the calendar day
    they fall on, so their day type is that day's.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    seconds = np.mod(ts, SECONDS_PER_DAY)
    morning, afternoon, night = (h * 3600 for h in boundaries)
    period = np.full(ts.shape, Period.NIGHT, dtype=np.int64)
    period[(seconds >= morning) & (seconds < afternoon)] = Period.MORNING
    period[(seconds >= afternoon) & (seconds < night)] = Period.AFTERNOON
    daytype = (weekday_of(ts) >= 5).astype(np.int64)
    return period, daytype


def bucket(timestamp: int, boundaries=DEFAULT_BOUNDARIES) -> TimeBucket:
    period, daytype = bucket_of(np.array([timestamp]), boundaries)
    return TimeBucket(Period(int(period[0])), DayType(int(daytype[0])))


@dataclass
class Trace:
    """Column-oriented call records, sorted by (user, timestamp).

    ``user`` holds integer codes into ``users``; ``antenna`` is 0-based.
    ``sp_map`` maps antenna index to a contiguous sub-prefecture index.
    """

    users: np.ndarray
    user: np.ndarray
    antenna: np.ndarray
    timestamp: np.ndarray
    antenna_count: int
    sp_map: np.ndarray | None = None
    malformed: int = field(default=0, compare=False)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=object)
        self.user = np.asarray(self.user, dtype=np.int64)
        self.antenna = np.asarray(self.antenna, dtype=np.int64)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        if not (len(self.user) == len(self.antenna) == len(self.timestamp)):
            raise TraceError("record columns have different lengths")
        if len(self.antenna) and (self.antenna.min() < 0 or self.antenna.max() >= self.antenna_count):
            raise TraceError("antenna id out of range")
        if self.sp_map is not None:
            self.sp_map = np.asarray(self.sp_map, dtype=np.int64)
            if len(self.sp_map) != self.antenna_count:
                raise TraceError("sub-prefecture map does not cover every antenna")

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[CallRecord]:
        for u, a, t in zip(self.user, self.antenna, self.timestamp):
            yield CallRecord(str(self.users[u]), int(a), int(t))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        same_sp = (self.sp_map is None and other.sp_map is None) or (
            self.sp_map is not None and other.sp_map is not None and np.array_equal(self.sp_map, other.sp_map)
        )
        return (
            self.antenna_count == other.antenna_count
            and same_sp
            and np.array_equal(self.users[self.user], other.users[other.user])
            and np.array_equal(self.antenna, other.antenna)
            and np.array_equal(self.timestamp, other.timestamp)
        )

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_subprefs(self) -> int:
        return 0 if self.sp_map is None else int(self.sp_map.max()) + 1

    def record_counts(self) -> np.ndarray:
        return np.bincount(self.user, minlength=self.n_users)

    def buckets(self, boundaries=DEFAULT_BOUNDARIES) -> tuple[np.ndarray, np.ndarray]:
        return bucket_of(self.timestamp, boundaries)

    def subset(self, mask: np.ndarray) -> Trace:
        return Trace(self.users, self.user[mask], self.antenna[mask], self.timestamp[mask],
                     self.antenna_count, self.sp_map)

    def with_sp_map(self, sp_map) -> Trace:
        return Trace(self.users, self.user, self.antenna, self.timestamp, self.antenna_count, sp_map)

    def sorted(self) -> Trace:
        order = np.lexsort((self.timestamp, self.user))
        return Trace(self.users, self.user[order], self.antenna[order], self.timestamp[order],
                     self.antenna_count, self.sp_map, self.malformed)

    def compacted(self) -> Trace:
        """Drop users without records and renumber the rest in order of code."""
        present = np.unique(self.user)
        recode = np.full(self.n_users, -1, dtype=np.int64)
        recode[present] = np.arange(len(present))
        return Trace(self.users[present], recode[self.user], self.antenna, self.timestamp,
                     self.antenna_count, self.sp_map)


def _coerce_int(column: pd.Series) -> pd.Series:
    return pd.to_numeric(column.str.strip(), errors="coerce")


def parse_trace(path, antenna_count: int, format: str = "csv", sp_map=None) -> Trace:
    """Read a trace CSV (``user_id,antenna_id,timestamp``; the header is optional).

    Lines that do not parse as three integer-valued fields are skipped and
    counted in ``Trace.malformed``.  Out-of-range antenna ids raise.
    """
    if format not in TRACE_FORMATS:
        raise TraceError(f"unknown trace format {format!r}")
    path = Path(path)
    try:
        first = _first_line(path)
        has_header = first.replace(" ", "") == ",".join(TRACE_HEADER)
        with open(path, "rb") as fh:
            n_lines = sum(1 for line in fh if line.strip())
        raw = pd.read_csv(path, header=None, names=list(TRACE_HEADER), dtype=str,
                          skiprows=int(has_header), keep_default_na=False,
                          on_bad_lines="skip", skip_blank_lines=True)
    except (OSError, UnicodeDecodeError) as exc:
        raise TraceError(f"cannot read trace {path}: {exc}") from exc
    except pd.errors.EmptyDataError:
        raw = pd.DataFrame({k: pd.Series(dtype=str) for k in TRACE_HEADER})

    users = raw["user_id"].str.strip()
    antenna = _coerce_int(raw["antenna_id"])
    ts = _coerce_int(raw["timestamp"])
    ok = (users != "") & antenna.notna() & ts.notna()
    ok &= (antenna == antenna.round()) & (ts == ts.round())
    malformed = (n_lines - int(has_header)) - int(ok.sum())
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", path, malformed)

    antenna = antenna[ok].to_numpy(dtype=np.int64)
    if len(antenna) and (antenna.min() < 1 or antenna.max() > antenna_count):
        bad = antenna[(antenna < 1) | (antenna > antenna_count)][0]
        raise TraceError(f"antenna id out of range: {bad} not in 1..{antenna_count}")

    codes, labels = pd.factorize(users[ok], sort=False)
    trace = Trace(np.asarray(labels, dtype=object), codes, antenna - 1,
                  ts[ok].to_numpy(dtype=np.int64), antenna_count, sp_map, malformed)
    return trace.sorted()


def _first_line(path: Path) -> str:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return line.strip()
    return ""


def write_trace(trace: Trace, path) -> None:
    frame = pd.DataFrame({
        "user_id": trace.users[trace.user],
        "antenna_id": trace.antenna + 1,
        "timestamp": trace.timestamp,
    })
    frame.to_csv(path, index=False, lineterminator="\n")


def read_subpref_map(path, antenna_count: int) -> np.ndarray:
    """Antenna index -> contiguous sub-prefecture index (ordered by subpref id)."""
    frame = pd.read_csv(path)
    if tuple(frame.columns) != SUBPREF_HEADER:
        raise TraceError(f"{path}: expected header {','.join(SUBPREF_HEADER)}")
    antenna = frame["antenna_id"].to_numpy(dtype=np.int64)
    if antenna.min() < 1 or antenna.max() > antenna_count:
        raise TraceError("antenna id out of range in sub-prefecture map")
    _, sp = np.unique(frame["subpref_id"].to_numpy(), return_inverse=True)
    out = np.full(antenna_count, -1, dtype=np.int64)
    out[antenna - 1] = sp
    if (out < 0).any():
        missing = int(np.flatnonzero(out < 0)[0]) + 1
        raise TraceError(f"sub-prefecture map misses antenna {missing}")
    return out


def write_subpref_map(sp_map: np.ndarray, path) -> None:
    pd.DataFrame({"antenna_id": np.arange(1, len(sp_map) + 1), "subpref_id": sp_map}).to_csv(
        path, index=False, lineterminator="\n")


def filter_users(trace: Trace, observation_days: float) -> Trace:
    """Keep users seen at two or more antennas who average more than one call a day."""
    if observation_days <= 0:
        raise ValueError("observation_days must be positive")
    counts = trace.record_counts()
    pairs = np.unique(np.stack([trace.user, trace.antenna]), axis=1)
    distinct = np.bincount(pairs[0], minlength=trace.n_users)
    keep = (distinct >= 2) & (counts > observation_days)
    return trace.subset(keep[trace.user]).compacted()


def split_train_test(trace: Trace, test_fraction: float, rng_seed: int) -> tuple[Trace, Trace]:
    """Per-user uniform random split.

    Each user contributes ``floor(test_fraction * n + 1/2)`` test records,
    capped so at least one record stays in training.  Both halves share the
    input's user table.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    counts = trace.record_counts()
    n_test = np.minimum(np.floor(test_fraction * counts + 0.5), np.maximum(counts - 1, 0)).astype(np.int64)

    keys = rng.random(len(trace))
    order = np.lexsort((keys, trace.user))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty(len(trace), dtype=np.int64)
    rank[order] = np.arange(len(trace)) - starts[trace.user[order]]
    is_test = rank < n_test[trace.user]
    return trace.subset(~is_test), trace.subset(is_test)


def generate_trace(planted, users: int, days: int, calls_per_day: float, rng_seed: int,
                   home_weights=None, start: int = MONDAY_EPOCH,
                   boundaries=DEFAULT_BOUNDARIES):
    """Sample a synthetic trace from a planted home-and-time model.

    ``planted.probs`` has shape (homes, periods, daytypes, antennas).  Homes
    are drawn from ``home_weights`` (uniform by default); call counts are
    Poisson(calls_per_day * days) with uniform call times, i.e. a homogeneous
    point process.  Returns the trace and the planted home of every user.
    """
    if calls_per_day <= 0:
        raise ValueError("calls_per_day must be positive")
    probs = np.asarray(planted.probs)
    rng = np.random.default_rng(rng_seed)
    weights = np.full(probs.shape[0], 1.0 / probs.shape[0]) if home_weights is None else np.asarray(home_weights, float)
    homes = rng.choice(probs.shape[0], size=users, p=weights / weights.sum())
    n_calls = rng.poisson(calls_per_day * days, size=users)
    user = np.repeat(np.arange(users), n_calls)
    ts = start + rng.integers(0, days * SECONDS_PER_DAY, size=len(user))
    order = np.lexsort((ts, user))
    user, ts = user[order], ts[order]

    period, daytype = bucket_of(ts, boundaries)
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(len(user))
    antenna = _draw_rows(cdf, homes[user], period, daytype, u)

    labels = np.array([str(k) for k in range(users)], dtype=object)
    trace = Trace(labels, user, antenna, ts, probs.shape[-1])
    return trace, homes


def _draw_rows(cdf, home, period, daytype, u) -> np.ndarray:
    # inverse-cdf draw, chunked to bound the (records x antennas) temporary
    out = np.empty(len(u), dtype=np.int64)
    chunk = 100_000
    for lo in range(0, len(u), chunk):
        sl = slice(lo, lo + chunk)
        rows = cdf[home[sl], period[sl], daytype[sl]]
        out[sl] = np.minimum((rows <= u[sl, None]).sum(axis=1), cdf.shape[-1] - 1)
    return out
