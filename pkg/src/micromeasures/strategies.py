"""Micro-measure strategies: trip hooks for the mobility phase and
force-of-infection rules for the epidemic phase.

Hooks see every proposed trip (source != destination) as parallel arrays and
return one ``TripDecision`` code per trip.  Lambda rules return either a
per-region vector or a (class, region) table.  Configurations that cannot
change anything (``p = 0``, ``q = 1``) resolve to the baseline rules and draw
no random numbers, so matched-seed runs stay bit-identical to the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum, IntEnum

import numpy as np


class StrategyKind(str, Enum):
    BASELINE = "baseline"
    CUT_COMMUNITIES = "cut_communities"
    DECREASE_MIX = "decrease_mix"
    GO_HOME = "go_home"


class TripDecision(IntEnum):
    PROCEED = 0
    CANCEL = 1
    REDIRECT = 2


MIX_GROUPS = ("home", "community")
GOHOME_RULES = ("safer", "riskier")


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.BASELINE
    p: float = 0.0
    q: float = 1.0
    communities: np.ndarray | None = None
    beta_home: float | None = None
    # DecreaseMix: group individuals by home antenna or by its community
    mix_groups: str = "home"
    # GoHome trigger: "safer" fires when the destination has the lower infective share
    gohome_rule: str = "safer"

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if not 0 <= self.q <= 1:
            raise ValueError(f"q must lie in [0, 1], got {self.q}")
        if self.mix_groups not in MIX_GROUPS:
            raise ValueError(f"mix_groups must be one of {MIX_GROUPS}")
        if self.gohome_rule not in GOHOME_RULES:
            raise ValueError(f"gohome_rule must be one of {GOHOME_RULES}")
        if self.beta_home is not None and not 0 < self.beta_home <= 1:
            raise ValueError("beta_home must lie in (0, 1]")
        needs_communities = self.kind is StrategyKind.CUT_COMMUNITIES or (
            self.kind is StrategyKind.DECREASE_MIX and self.mix_groups == "community")
        if needs_communities and self.communities is None:
            raise ValueError(f"{self.kind.value} needs a community assignment")
        if self.communities is not None:
            object.__setattr__(self, "communities", np.asarray(self.communities, dtype=np.int64))

    @property
    def label(self) -> str:
        if self.kind is StrategyKind.BASELINE:
            return "baseline"
        value = self.q if self.kind is StrategyKind.DECREASE_MIX else self.p
        return f"{self.kind.value}({value:g})"

    @property
    def parameter(self) -> float | None:
        return {StrategyKind.BASELINE: None, StrategyKind.DECREASE_MIX: self.q}.get(self.kind, self.p)

    @property
    def is_noop(self) -> bool:
        return (self.kind is StrategyKind.BASELINE
                or (self.kind in (StrategyKind.CUT_COMMUNITIES, StrategyKind.GO_HOME) and self.p == 0)
                or (self.kind is StrategyKind.DECREASE_MIX and self.q == 1))

    def with_communities(self, communities) -> StrategyConfig:
        return replace(self, communities=communities)


@dataclass(frozen=True)
class RegionView:
    """What the service operator sees before a mobility phase."""

    infected: np.ndarray
    population: np.ndarray

    @property
    def infected_share(self) -> np.ndarray:
        return np.divide(self.infected, self.population, out=np.zeros(len(self.infected)),
                         where=self.population > 0)


def _comply(flagged: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p >= 1:
        return flagged
    return flagged[rng.random(len(flagged)) < p]


def cut_communities_decisions(src, dst, view: RegionView, communities, p: float,
                              rng: np.random.Generator) -> np.ndarray:
    """Cancel cross-community trips touching an infected region, with probability p."""
    out = np.zeros(len(src), dtype=np.int8)
    if p <= 0 or len(src) == 0:
        return out
    crosses = communities[src] != communities[dst]
    affected = (view.infected[src] >= 1) | (view.infected[dst] >= 1)
    out[_comply(np.flatnonzero(crosses & affected), p, rng)] = TripDecision.CANCEL
    return out


def gohome_decisions(src, dst, home, view: RegionView, p: float, rng: np.random.Generator,
                     rule: str = "safer") -> np.ndarray:
    """Redirect trips home when the destination's infective share is below the source's.

    Trips already heading home are left alone.
    """
    out = np.zeros(len(src), dtype=np.int8)
    if p <= 0 or len(src) == 0:
        return out
    share = view.infected_share
    fires = share[dst] < share[src] if rule == "safer" else share[dst] > share[src]
    out[_comply(np.flatnonzero(fires & (dst != home)), p, rng)] = TripDecision.REDIRECT
    return out


def cut_communities_hook(trip, state, cfg: StrategyConfig, rng) -> TripDecision:
    src, dst = trip
    out = cut_communities_decisions(np.array([src]), np.array([dst]), state.region_view(),
                                    cfg.communities, cfg.p, rng)
    return TripDecision(int(out[0]))


def gohome_hook(trip, state, cfg: StrategyConfig, rng) -> TripDecision:
    src, dst, home = trip
    out = gohome_decisions(np.array([src]), np.array([dst]), np.array([home]), state.region_view(),
                           cfg.p, rng, cfg.gohome_rule)
    return TripDecision(int(out[0]))


def random_mixing_lambda(state, params) -> np.ndarray:
    view = state.region_view()
    return params.beta * view.infected_share


def split_beta(beta: float, q: float, n_group, n_region):
    """Intra- and inter-group contact probabilities for DecreaseMix."""
    n_group = np.asarray(n_group, dtype=float)
    frac = np.divide(n_group, n_region, out=np.zeros(np.shape(n_group)), where=np.asarray(n_region) > 0)
    beta_out = beta - (1 - q + q * frac) * beta
    # one of the two subtractions is exact (Sterbenz), so the parts add back to beta exactly
    return beta - beta_out, beta_out


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    return np.divide(num, den, out=np.zeros(np.shape(num)), where=np.asarray(den) > 0)


def mix_lambda(beta: float, q: float, i_group, n_group, i_region, n_region):
    """Force of infection on one group inside a region (any zero-denominator term is 0)."""
    beta_in, beta_out = split_beta(beta, q, n_group, n_region)
    i_other = np.asarray(i_region) - np.asarray(i_group)
    n_other = np.asarray(n_region) - np.asarray(n_group)
    return beta_in * _safe_ratio(i_group, n_group) + beta_out * _safe_ratio(i_other, n_other)


def _group_tables(state, cfg: StrategyConfig):
    """(group, region) infective and population counts for DecreaseMix."""
    per_class = state.class_region_counts()
    infected, population = per_class[1], per_class.sum(axis=0)
    if cfg.mix_groups == "home":
        return infected, population, None
    groups = cfg.communities
    k = int(groups.max()) + 1
    g_inf = np.zeros((k, infected.shape[1]), dtype=np.int64)
    g_pop = np.zeros_like(g_inf)
    np.add.at(g_inf, groups, infected)
    np.add.at(g_pop, groups, population)
    return g_inf, g_pop, groups


def decreasemix_lambda_table(state, params, cfg: StrategyConfig) -> np.ndarray:
    """(class, region) force of infection under DecreaseMix."""
    if cfg.q == 1:
        return random_mixing_lambda(state, params)
    g_inf, g_pop, groups = _group_tables(state, cfg)
    view = state.region_view()
    lam = mix_lambda(params.beta, cfg.q, g_inf, g_pop, view.infected[None, :], view.population[None, :])
    return lam if groups is None else lam[groups]


def decreasemix_lambda(region: int, group: int, state, params, cfg: StrategyConfig) -> float:
    """lambda_{i,C} for one region and one group (a class, or a community when grouped so)."""
    g_inf, g_pop, _ = _group_tables(state, cfg)
    view = state.region_view()
    if g_pop[group, region] < 1:
        raise ValueError(f"group {group} is absent from region {region}")
    return float(mix_lambda(params.beta, cfg.q, g_inf[group, region], g_pop[group, region],
                            view.infected[region], view.population[region]))


def gohome_lambda_parts(state, params, cfg: StrategyConfig):
    """Per-region (lambda_loc, lambda_vis) under GoHome."""
    beta_home = params.g if cfg.beta_home is None else cfg.beta_home
    view = state.region_view()
    n_regions = len(view.population)
    per_class = state.class_region_counts()
    infected_local = per_class[1][np.arange(n_regions), np.arange(n_regions)]
    infected_visit = view.infected - infected_local
    lam_loc = beta_home * view.infected_share
    lam_vis = params.beta * _safe_ratio(infected_visit, view.population) \
        + beta_home * _safe_ratio(infected_local, view.population)
    return lam_loc, lam_vis


def gohome_lambda(region: int, state, params, cfg: StrategyConfig) -> tuple[float, float]:
    lam_loc, lam_vis = gohome_lambda_parts(state, params, cfg)
    return float(lam_loc[region]), float(lam_vis[region])


def gohome_lambda_table(state, params, cfg: StrategyConfig) -> np.ndarray:
    lam_loc, lam_vis = gohome_lambda_parts(state, params, cfg)
    n = len(lam_loc)
    table = np.broadcast_to(lam_vis, (n, n)).copy()
    table[np.arange(n), np.arange(n)] = lam_loc
    return table


def rules_for(cfg: StrategyConfig | None):
    """(trip hook or None, lambda rule or None) implementing ``cfg``.

    None means the engine's own random-mixing behaviour.
    """
    if cfg is None or cfg.is_noop:
        return None, None
    if cfg.kind is StrategyKind.CUT_COMMUNITIES:
        def hook(src, dst, home, view, rng):
            return cut_communities_decisions(src, dst, view, cfg.communities, cfg.p, rng)
        return hook, None
    if cfg.kind is StrategyKind.DECREASE_MIX:
        return None, lambda state, params: decreasemix_lambda_table(state, params, cfg)

    def hook(src, dst, home, view, rng):
        return gohome_decisions(src, dst, home, view, cfg.p, rng, cfg.gohome_rule)
    return hook, lambda state, params: gohome_lambda_table(state, params, cfg)


@dataclass
class AffectedMovements:
    per_step: np.ndarray
    mean: float
    max: float
    argmax: int


def affected_movements(proposed, canceled, redirected) -> AffectedMovements:
    """Share of proposed trips canceled or redirected, per step and summarised.

    Steps with no proposed trip count as 0.
    """
    proposed = np.asarray(proposed, dtype=float)
    affected = np.asarray(canceled, dtype=float) + np.asarray(redirected, dtype=float)
    share = np.divide(affected, proposed, out=np.zeros(len(proposed)), where=proposed > 0)
    if len(share) == 0:
        return AffectedMovements(share, 0.0, 0.0, 0)
    k = int(np.argmax(share))
    return AffectedMovements(share, float(share.mean()), float(share[k]), k)
