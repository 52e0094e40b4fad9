"""Home-and-time conditioned mobility model and its three baselines.

Every model is a table of smoothed categorical distributions over antennas,
one per context.  Smoothing is the posterior predictive of a symmetric
Dirichlet prior: ``(count + alpha) / (total + alpha * A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from .trace import DEFAULT_BOUNDARIES, N_DAYTYPES, N_PERIODS, Period, TimeBucket, Trace

MODEL_FORMAT_VERSION = 1
DEFAULT_ALPHA = 0.5


class ModelKind(str, Enum):
    HOME_ANTENNA_TIME = "home_antenna_time"
    SUBPREF_TIME = "subpref_time"
    TIME_ONLY = "time_only"
    MARKOV = "markov"


@dataclass
class HomeAssignment:
    users: np.ndarray
    antenna: np.ndarray
    sp_map: np.ndarray | None = None

    def __getitem__(self, user) -> int:
        hit = np.flatnonzero(self.users == user)
        if not len(hit):
            raise KeyError(user)
        return int(self.antenna[hit[0]])

    def __len__(self) -> int:
        return len(self.users)

    @property
    def subpref(self) -> np.ndarray:
        if self.sp_map is None:
            raise ValueError("home assignment has no sub-prefecture map")
        return self.sp_map[self.antenna]

    def for_trace(self, trace: Trace) -> np.ndarray:
        """Home antenna per user code of ``trace``; raises on users without a home."""
        pos = pd.Index(self.users).get_indexer(trace.users)
        seen = np.zeros(trace.n_users, dtype=bool)
        seen[trace.user] = True
        missing = seen & (pos < 0)
        if missing.any():
            raise KeyError(f"unknown user in homes: {trace.users[np.flatnonzero(missing)[0]]!r}")
        out = np.full(trace.n_users, -1, dtype=np.int64)
        out[pos >= 0] = self.antenna[pos[pos >= 0]]
        return out


@dataclass
class EvalReport:
    kind: ModelKind
    avg_loglik: float
    n_test: int


class _GuideSampler:
    """Inverse-cdf sampler over the rows of a (rows, k) probability table.

    A guide table maps each of k equal slices of [0, 1) to the first category
    whose cdf exceeds the slice start, so a draw costs O(1) expected steps.
    Draws equal ``searchsorted(cdf_row, u, side='right')`` exactly.
    """

    def __init__(self, probs: np.ndarray):
        rows, k = probs.shape
        cdf = np.cumsum(probs, axis=1)
        cdf[:, -1] = 1.0
        self.k = k
        self.cdf = cdf.ravel()
        offset = np.arange(rows)[:, None]
        flat = (cdf + offset).ravel()
        # the margin keeps each guide entry a lower bound despite offset rounding
        starts = (offset + np.arange(k)[None, :] / k - 1e-9).ravel()
        guide = np.searchsorted(flat, starts, side="right").reshape(rows, k) - offset * k
        self.guide = np.clip(guide, 0, k - 1)

    def draw(self, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
        slot = np.minimum((u * self.k).astype(np.int64), self.k - 1)
        pos = rows * self.k + self.guide[rows, slot]
        active = np.flatnonzero(self.cdf[pos] <= u)
        while active.size:
            pos[active] += 1
            active = active[self.cdf[pos[active]] <= u[active]]
        return pos - rows * self.k


@dataclass
class MobilityModel:
    """Conditional categorical distributions over antennas.

    ``probs`` axes by kind: home-antenna-time (home, period, daytype, dest);
    sub-prefecture-time (subpref, period, daytype, dest); time-only
    (period, daytype, dest); Markov (previous antenna, dest).  ``counts`` and
    ``alpha`` are None for planted models given directly as probabilities.
    """

    kind: ModelKind
    probs: np.ndarray
    alpha: float | None = None
    counts: np.ndarray | None = None
    sp_map: np.ndarray | None = None
    boundaries: tuple = DEFAULT_BOUNDARIES
    _samplers: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        self.boundaries = tuple(int(b) for b in self.boundaries)
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @classmethod
    def planted(cls, probs, kind=ModelKind.HOME_ANTENNA_TIME, **kw) -> MobilityModel:
        probs = np.asarray(probs, dtype=float)
        if (probs < 0).any() or not np.allclose(probs.sum(-1), 1.0, atol=1e-9):
            raise ValueError("planted rows must be probability vectors")
        return cls(kind, probs, **kw)

    @property
    def n_antennas(self) -> int:
        return self.probs.shape[-1]

    def sampler(self, bucket: TimeBucket) -> _GuideSampler:
        if self.kind is not ModelKind.HOME_ANTENNA_TIME:
            raise ValueError("destination sampling needs a home-antenna-time model")
        key = (int(bucket[0]), int(bucket[1]))
        if key not in self._samplers:
            self._samplers[key] = _GuideSampler(self.probs[:, key[0], key[1], :])
        return self._samplers[key]


def infer_homes(train: Trace, sp_map=None) -> HomeAssignment:
    """Most visited night antenna per user; lowest antenna id wins ties.

    Users without night records fall back to their most visited antenna.
    """
    if len(train) == 0:
        raise ValueError("cannot infer homes from an empty trace")
    period, _ = train.buckets()
    a = train.antenna_count

    def argmax_per_user(mask):
        keys, counts = np.unique(train.user[mask] * a + train.antenna[mask], return_counts=True)
        user, antenna = np.divmod(keys, a)
        order = np.lexsort((antenna, -counts, user))
        first = np.ones(len(order), dtype=bool)
        first[1:] = user[order][1:] != user[order][:-1]
        best = np.full(train.n_users, -1, dtype=np.int64)
        best[user[order][first]] = antenna[order][first]
        return best

    home = argmax_per_user(period == Period.NIGHT)
    fallback = argmax_per_user(np.ones(len(train), dtype=bool))
    home = np.where(home >= 0, home, fallback)
    present = home >= 0
    sp = train.sp_map if sp_map is None else np.asarray(sp_map)
    return HomeAssignment(train.users[present], home[present], sp)


def _context_index(kind: ModelKind, trace: Trace, home_of_user, sp_map, boundaries):
    """Flat context index for each record (MC handled separately)."""
    period, daytype = trace.buckets(boundaries)
    time = period * N_DAYTYPES + daytype
    if kind is ModelKind.TIME_ONLY:
        return time, N_PERIODS * N_DAYTYPES
    home = home_of_user[trace.user]
    if kind is ModelKind.HOME_ANTENNA_TIME:
        return home * (N_PERIODS * N_DAYTYPES) + time, trace.antenna_count * N_PERIODS * N_DAYTYPES
    n_sp = int(sp_map.max()) + 1
    return sp_map[home] * (N_PERIODS * N_DAYTYPES) + time, n_sp * N_PERIODS * N_DAYTYPES


def _context_shape(kind: ModelKind, n_antennas: int, n_sp: int) -> tuple:
    return {
        ModelKind.HOME_ANTENNA_TIME: (n_antennas, N_PERIODS, N_DAYTYPES),
        ModelKind.SUBPREF_TIME: (n_sp, N_PERIODS, N_DAYTYPES),
        ModelKind.TIME_ONLY: (N_PERIODS, N_DAYTYPES),
        ModelKind.MARKOV: (n_antennas,),
    }[kind]


def _previous_antenna(trace: Trace) -> np.ndarray:
    """Antenna of each record's predecessor for the same user, -1 for the first."""
    prev = np.full(len(trace), -1, dtype=np.int64)
    same = trace.user[1:] == trace.user[:-1]
    prev[1:][same] = trace.antenna[:-1][same]
    return prev


def smooth(counts: np.ndarray, alpha: float) -> np.ndarray:
    total = counts.sum(axis=-1, keepdims=True)
    return (counts + alpha) / (total + alpha * counts.shape[-1])


def fit(train: Trace, homes: HomeAssignment | None, kind, alpha: float = DEFAULT_ALPHA,
        sp_map=None, boundaries=DEFAULT_BOUNDARIES) -> MobilityModel:
    kind = ModelKind(kind)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a = train.antenna_count
    sp = None
    if kind is ModelKind.SUBPREF_TIME:
        sp = train.sp_map if sp_map is None else np.asarray(sp_map, dtype=np.int64)
        if sp is None:
            raise ValueError("the sub-prefecture model needs a sub-prefecture map")
    n_sp = 0 if sp is None else int(sp.max()) + 1

    if kind is ModelKind.MARKOV:
        prev = _previous_antenna(train)
        has_prev = prev >= 0
        flat = prev[has_prev] * a + train.antenna[has_prev]
        n_ctx = a
    else:
        if kind is ModelKind.TIME_ONLY:
            home_of_user = None
        else:
            if homes is None:
                raise ValueError(f"{kind.value} needs a home assignment")
            home_of_user = homes.for_trace(train)
        ctx, n_ctx = _context_index(kind, train, home_of_user, sp, boundaries)
        flat = ctx * a + train.antenna
    counts = np.bincount(flat, minlength=n_ctx * a).reshape(_context_shape(kind, a, n_sp) + (a,))
    return MobilityModel(kind, smooth(counts, alpha), alpha, counts, sp, boundaries)


def predict(model: MobilityModel, home: int | None = None, bucket: TimeBucket | None = None,
            prev: int | None = None) -> np.ndarray:
    kind = model.kind
    if kind is ModelKind.MARKOV:
        if prev is None:
            raise ValueError("Markov prediction needs the previous antenna")
        return model.probs[_check_index(prev, model.n_antennas, "previous antenna")]
    if bucket is None:
        raise ValueError(f"{kind.value} prediction needs a time bucket")
    period = _check_index(bucket[0], N_PERIODS, "period")
    daytype = _check_index(bucket[1], N_DAYTYPES, "daytype")
    if kind is ModelKind.TIME_ONLY:
        return model.probs[period, daytype]
    if home is None:
        raise ValueError(f"{kind.value} prediction needs a home antenna")
    home = _check_index(home, model.n_antennas, "home antenna")
    if kind is ModelKind.SUBPREF_TIME:
        return model.probs[model.sp_map[home], period, daytype]
    return model.probs[home, period, daytype]


def _check_index(value, size: int, what: str) -> int:
    value = int(value)
    if not 0 <= value < size:
        raise IndexError(f"{what} {value} outside 0..{size - 1}")
    return value


def evaluate(model: MobilityModel, test: Trace, homes: HomeAssignment | None,
             history: Trace | None = None) -> EvalReport:
    """Average natural-log likelihood of the test records.

    For the Markov model each test record is conditioned on the user's
    previous record in the merged ``history`` + ``test`` timeline; a user's
    first-ever record is skipped.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    kind = model.kind
    if kind is ModelKind.MARKOV:
        logp = _markov_logp(model, test, history)
    else:
        home_of_user = None if kind is ModelKind.TIME_ONLY else homes.for_trace(test)
        ctx, _ = _context_index(kind, test, home_of_user, model.sp_map, model.boundaries)
        table = model.probs.reshape(-1, model.n_antennas)
        logp = np.log(table[ctx, test.antenna])
    if len(logp) == 0:
        raise ValueError("no test record has a usable context")
    return EvalReport(kind, float(logp.mean()), int(len(logp)))


def _markov_logp(model: MobilityModel, test: Trace, history: Trace | None) -> np.ndarray:
    if history is None:
        merged_users = test.users[test.user]
        antenna, ts = test.antenna, test.timestamp
        is_test = np.ones(len(test), dtype=bool)
    else:
        merged_users = np.concatenate([history.users[history.user], test.users[test.user]])
        antenna = np.concatenate([history.antenna, test.antenna])
        ts = np.concatenate([history.timestamp, test.timestamp])
        is_test = np.concatenate([np.zeros(len(history), bool), np.ones(len(test), bool)])
    codes, _ = pd.factorize(merged_users)
    order = np.lexsort((ts, codes))
    codes, antenna, is_test = codes[order], antenna[order], is_test[order]
    prev = np.full(len(codes), -1, dtype=np.int64)
    same = codes[1:] == codes[:-1]
    prev[1:][same] = antenna[:-1][same]
    use = is_test & (prev >= 0)
    return np.log(model.probs[prev[use], antenna[use]])


def compare_models(train: Trace, test: Trace, alpha: float = DEFAULT_ALPHA, kinds=tuple(ModelKind)):
    """Fit every kind on ``train`` (homes from ``train`` only) and score on ``test``."""
    homes = infer_homes(train)
    reports = {}
    for kind in kinds:
        model = fit(train, homes, kind, alpha)
        reports[ModelKind(kind)] = evaluate(model, test, homes, history=train)
    return reports


def sample_destination(model: MobilityModel, home: int, bucket: TimeBucket, rng: np.random.Generator) -> int:
    return int(sample_destinations(model, np.array([home]), bucket, rng)[0])


def sample_destinations(model: MobilityModel, homes: np.ndarray, bucket: TimeBucket,
                        rng: np.random.Generator) -> np.ndarray:
    homes = np.asarray(homes, dtype=np.int64)
    return model.sampler(bucket).draw(homes, rng.random(len(homes)))


def save_model(model: MobilityModel, path) -> None:
    """Lossless ``.npz`` dump; see ``load_model``."""
    payload = {
        "format_version": np.array(MODEL_FORMAT_VERSION),
        "kind": np.array(model.kind.value),
        "probs": model.probs,
        "boundaries": np.array(model.boundaries),
        "alpha": np.array(np.nan if model.alpha is None else model.alpha),
    }
    if model.counts is not None:
        payload["counts"] = model.counts
    if model.sp_map is not None:
        payload["sp_map"] = model.sp_map
    with open(Path(path), "wb") as fh:
        np.savez_compressed(fh, **payload)


def load_model(path) -> MobilityModel:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        alpha = float(data["alpha"])
        return MobilityModel(
            ModelKind(str(data["kind"])),
            data["probs"],
            None if np.isnan(alpha) else alpha,
            data["counts"] if "counts" in data else None,
            data["sp_map"] if "sp_map" in data else None,
            tuple(int(b) for b in data["boundaries"]),
        )
