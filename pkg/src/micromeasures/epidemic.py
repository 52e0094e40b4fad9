"""Discrete-time stochastic SIR over a metapopulation, one region per antenna.

Individuals of a (region, class, compartment, mobility flag) group are
exchangeable, so the engine works on group counts: binomial draws for the
epidemic phase and per-group multinomial allocation for the mobility phase.
Classes are keyed by home antenna, so class c lives at region c when at home.

State layout: ``mobile[x, c, i]`` counts mobile individuals of compartment x
(S, I, R) and class c currently in region i; ``immobile[x, c]`` counts
immobile ones, who never leave region c.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .mobility import MobilityModel
from .strategies import RegionView, StrategyConfig, TripDecision, rules_for
from .trace import N_PERIODS, DayType, Period, TimeBucket

log = logging.getLogger(__name__)

S, I, R = 0, 1, 2
COMPARTMENTS = ("S", "I", "R")
POPULATION_HEADER = ("antenna_id", "population")


@dataclass
class PopulationSetup:
    populations: np.ndarray
    mobile_fraction: float = 0.55
    seed_infectives: list = field(default_factory=list)

    def __post_init__(self):
        self.populations = np.asarray(self.populations, dtype=np.int64)
        if (self.populations < 0).any():
            raise ValueError("populations must be non-negative")
        if not 0 <= self.mobile_fraction <= 1:
            raise ValueError("mobile_fraction must lie in [0, 1]")
        self.seed_infectives = [(int(r), int(c)) for r, c in self.seed_infectives]
        for region, count in self.seed_infectives:
            if not 0 <= region < self.n_regions:
                raise ValueError(f"seed region {region} out of range")
            if self.populations[region] == 0:
                raise ValueError(f"seed region {region} has zero population")
            if count > self.populations[region]:
                raise ValueError(f"seed count {count} exceeds population of region {region}")

    @property
    def n_regions(self) -> int:
        return len(self.populations)

    @property
    def total(self) -> int:
        return int(self.populations.sum())


@dataclass
class EpidemicParams:
    beta: float = 1.0
    g: float = 0.5
    steps: int = 400
    steps_per_day: int = 3
    start_weekday: int = 0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if not 0 < self.g <= 1:
            raise ValueError("g must lie in (0, 1]")
        if self.steps < 0 or self.steps_per_day < 1:
            raise ValueError("steps must be >= 0 and steps_per_day >= 1")
        if not 0 <= self.start_weekday < 7:
            raise ValueError("start_weekday must be 0 (Monday) .. 6 (Sunday)")

    def bucket_at(self, step: int) -> TimeBucket:
        """Time bucket of a step; step 0 is the first period of the start day."""
        day, slot = divmod(step, self.steps_per_day)
        period = Period(slot * N_PERIODS // self.steps_per_day)
        weekday = (self.start_weekday + day) % 7
        return TimeBucket(period, DayType.WEEKEND if weekday >= 5 else DayType.WEEKDAY)


@dataclass
class EpidemicState:
    mobile: np.ndarray
    immobile: np.ndarray
    step: int = 0
    # new infections per region during the last epidemic phase
    incidence: np.ndarray | None = None
    # cached (compartment, region) totals, kept current by the phase functions
    regions: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_regions(self) -> int:
        return self.mobile.shape[2]

    def copy(self) -> EpidemicState:
        return EpidemicState(self.mobile.copy(), self.immobile.copy(), self.step,
                             None if self.incidence is None else self.incidence.copy(),
                             None if self.regions is None else self.regions.copy())

    def region_counts(self) -> np.ndarray:
        """(compartment, region) totals."""
        if self.regions is not None:
            return self.regions.copy()
        out = self.mobile.sum(axis=1)
        out[:, : self.immobile.shape[1]] += self.immobile
        return out

    def class_region_counts(self) -> np.ndarray:
        """(compartment, class, region) counts, immobile individuals included."""
        out = self.mobile.copy()
        n = self.immobile.shape[1]
        out[:, np.arange(n), np.arange(n)] += self.immobile
        return out

    def region_view(self) -> RegionView:
        counts = self.region_counts()
        return RegionView(counts[I], counts.sum(axis=0))

    def totals(self) -> np.ndarray:
        if self.regions is not None:
            return self.regions.sum(axis=1)
        return self.mobile.sum(axis=(1, 2)) + self.immobile.sum(axis=1)

    def class_totals(self) -> np.ndarray:
        return self.mobile.sum(axis=(0, 2)) + self.immobile.sum(axis=0)


@dataclass
class TripLog:
    proposed: int = 0
    canceled: int = 0
    redirected: int = 0

    @property
    def affected(self) -> int:
        return self.canceled + self.redirected


def init_state(setup: PopulationSetup) -> EpidemicState:
    """Everyone susceptible and at home, except the seed infectives.

    Each region's class gets ``floor(mobile_fraction * N_i)`` mobile members.
    Seeds come from the mobile members first, then from the immobile ones.
    """
    n = setup.n_regions
    mobile_n = np.floor(setup.mobile_fraction * setup.populations).astype(np.int64)
    mobile = np.zeros((3, n, n), dtype=np.int64)
    immobile = np.zeros((3, n), dtype=np.int64)
    diag = np.arange(n)
    mobile[S, diag, diag] = mobile_n
    immobile[S] = setup.populations - mobile_n
    for region, count in setup.seed_infectives:
        from_mobile = min(count, mobile[S, region, region])
        mobile[S, region, region] -= from_mobile
        mobile[I, region, region] += from_mobile
        rest = count - from_mobile
        if rest > immobile[S, region]:
            raise ValueError(f"not enough susceptibles in region {region} for {count} seeds")
        immobile[S, region] -= rest
        immobile[I, region] += rest
    return EpidemicState(mobile, immobile, 0, np.zeros(n, dtype=np.int64))


def mobility_phase(state: EpidemicState, model: MobilityModel, bucket: TimeBucket,
                   rng: np.random.Generator, hook=None) -> tuple[EpidemicState, TripLog]:
    """Move every mobile individual to a destination drawn from its class distribution.

    Each group's destinations are drawn individually, which is the group's
    multinomial allocation.  Trips to another region go through ``hook``,
    which sees the pre-move regional counts and may cancel or redirect home.
    """
    mob = state.mobile
    _, n_classes, n_regions = mob.shape
    groups = np.flatnonzero(mob != 0)
    sizes = mob.ravel()[groups]
    comp_class, src = np.divmod(groups, n_regions)
    src = np.repeat(src, sizes)
    comp_class = np.repeat(comp_class, sizes)
    home = comp_class % n_classes
    dst = model.sampler(bucket).draw(home, rng.random(len(src)))

    moving = np.flatnonzero(dst != src)
    log_ = TripLog(proposed=len(moving))
    if hook is not None and len(moving):
        decision = hook(src[moving], dst[moving], home[moving], state.region_view(), rng)
        cancel = moving[decision == TripDecision.CANCEL]
        redirect = moving[decision == TripDecision.REDIRECT]
        dst[cancel] = src[cancel]
        dst[redirect] = home[redirect]
        log_.canceled, log_.redirected = len(cancel), len(redirect)

    moved = np.bincount(comp_class * n_regions + dst, minlength=mob.size).reshape(mob.shape)
    regions = np.bincount(comp_class // n_classes * n_regions + dst, minlength=3 * n_regions)
    regions = regions.reshape(3, n_regions)
    regions[:, :n_classes] += state.immobile
    return EpidemicState(moved, state.immobile.copy(), state.step, state.incidence, regions), log_


def random_mixing_lambda(state: EpidemicState, params: EpidemicParams) -> np.ndarray:
    counts = state.region_counts()
    n = counts.sum(axis=0)
    return params.beta * np.divide(counts[I], n, out=np.zeros(len(n)), where=n > 0)


def epidemic_phase(state: EpidemicState, params: EpidemicParams, rng: np.random.Generator,
                   lambda_fn=None) -> EpidemicState:
    """Binomial infections and recoveries, from the state at phase start.

    ``lambda_fn(state, params)`` gives a per-region vector or a (class, region)
    table; the default is random mixing.  Updates ``state`` in place.
    """
    lam = (lambda_fn or random_mixing_lambda)(state, params)
    lam = np.clip(lam, 0.0, 1.0)
    mob, imm = state.mobile, state.immobile
    n_regions = mob.shape[2]
    diag = np.arange(imm.shape[1])

    s_idx = np.flatnonzero(mob[S] != 0)
    s_region = s_idx % n_regions
    p_mob = lam[s_region] if lam.ndim == 1 else lam.ravel()[s_idx]
    new_inf = rng.binomial(mob[S].ravel()[s_idx], p_mob)
    p_imm = lam[diag] if lam.ndim == 1 else lam[diag, diag]
    new_inf_imm = rng.binomial(imm[S], p_imm)

    i_idx = np.flatnonzero(mob[I] != 0)
    new_rec = rng.binomial(mob[I].ravel()[i_idx], params.g)
    new_rec_imm = rng.binomial(imm[I], params.g)

    s_flat, i_flat, r_flat = mob[S].reshape(-1), mob[I].reshape(-1), mob[R].reshape(-1)
    s_flat[s_idx] -= new_inf
    i_flat[s_idx] += new_inf
    i_flat[i_idx] -= new_rec
    r_flat[i_idx] += new_rec
    imm[S] -= new_inf_imm
    imm[I] += new_inf_imm - new_rec_imm
    imm[R] += new_rec_imm

    incidence = np.bincount(s_region, weights=new_inf, minlength=n_regions).astype(np.int64)
    incidence[diag] += new_inf_imm
    recovered = np.bincount(i_idx % n_regions, weights=new_rec, minlength=n_regions).astype(np.int64)
    recovered[diag] += new_rec_imm
    if state.regions is not None:
        state.regions[S] -= incidence
        state.regions[I] += incidence - recovered
        state.regions[R] += recovered
    state.incidence = incidence
    state.step += 1
    return state


@dataclass
class RunRecord:
    """Time series of one run; row n is the state after n steps."""

    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    proposed: np.ndarray
    canceled: np.ndarray
    redirected: np.ndarray
    region_I: np.ndarray | None = None
    region_R: np.ndarray | None = None
    incidence: np.ndarray | None = None
    population: int = 0
    label: str = "baseline"

    @property
    def steps(self) -> int:
        return len(self.S) - 1

    @property
    def affected(self) -> np.ndarray:
        return self.canceled + self.redirected

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "step": np.arange(len(self.S)), "S": self.S, "I": self.I, "R": self.R,
            "proposed_trips": self.proposed, "affected_trips": self.affected,
        })

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    def write_region_csv(self, path, which: str = "I") -> None:
        table = {"I": self.region_I, "R": self.region_R, "incidence": self.incidence}[which]
        if table is None:
            raise ValueError("run was recorded without per-region series")
        frame = pd.DataFrame(table, columns=[str(a) for a in range(1, table.shape[1] + 1)])
        frame.insert(0, "step", np.arange(len(frame)))
        frame.to_csv(path, index=False, lineterminator="\n")


def run(setup: PopulationSetup, model: MobilityModel, params: EpidemicParams,
        strategy: StrategyConfig | None = None, rng_seed=0, per_region: bool = True) -> RunRecord:
    """Alternate mobility and epidemic phases for ``params.steps`` steps.

    ``rng_seed`` is anything ``numpy.random.default_rng`` accepts; equal seeds
    give bit-identical records.
    """
    if model.probs.shape[0] != setup.n_regions or model.n_antennas != setup.n_regions:
        raise ValueError("model and population disagree on the number of regions")
    rng = np.random.default_rng(rng_seed)
    hook, lambda_fn = rules_for(strategy)
    state = init_state(setup)
    n_steps, n = params.steps, setup.n_regions

    series = np.zeros((n_steps + 1, 3), dtype=np.int64)
    trips = np.zeros((n_steps + 1, 3), dtype=np.int64)
    region_I = np.zeros((n_steps + 1, n), dtype=np.int64) if per_region else None
    region_R = np.zeros((n_steps + 1, n), dtype=np.int64) if per_region else None
    incidence = np.zeros((n_steps + 1, n), dtype=np.int64) if per_region else None

    def record(k):
        series[k] = state.totals()
        if per_region:
            counts = state.region_counts()
            region_I[k], region_R[k] = counts[I], counts[R]
            incidence[k] = state.incidence

    record(0)
    for step in range(n_steps):
        state, trip_log = mobility_phase(state, model, params.bucket_at(step), rng, hook)
        state = epidemic_phase(state, params, rng, lambda_fn)
        trips[step + 1] = trip_log.proposed, trip_log.canceled, trip_log.redirected
        record(step + 1)

    label = strategy.label if strategy is not None else "baseline"
    return RunRecord(series[:, S], series[:, I], series[:, R], trips[:, 0], trips[:, 1], trips[:, 2],
                     region_I, region_R, incidence, setup.total, label)


def read_populations(path, n_regions: int | None = None) -> np.ndarray:
    frame = pd.read_csv(path)
    if tuple(frame.columns) != POPULATION_HEADER:
        raise ValueError(f"{path}: expected header {','.join(POPULATION_HEADER)}")
    ids = frame["antenna_id"].to_numpy(dtype=np.int64)
    n = int(ids.max()) if n_regions is None else n_regions
    if ids.min() < 1 or ids.max() > n:
        raise ValueError("antenna id out of range in population file")
    out = np.zeros(n, dtype=np.int64)
    np.add.at(out, ids - 1, frame["population"].to_numpy(dtype=np.int64))
    return out


def write_populations(populations, path) -> None:
    pd.DataFrame({"antenna_id": np.arange(1, len(populations) + 1), "population": populations}).to_csv(
        Path(path), index=False, lineterminator="\n")
