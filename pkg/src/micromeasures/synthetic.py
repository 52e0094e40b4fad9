"""Planted mobility models and synthetic countries with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mobility import MobilityModel
from .trace import N_DAYTYPES, DayType, Period


def planted_commuter_model(n_antennas: int = 50, n_subprefs: int = 5, seed: int = 0,
                           night_home: float = 0.7, hub_mass: float = 0.9,
                           background: float = 0.05, hubs_per_bucket: int = 3):
    """Home-concentrated, strongly time-varying planted model.

    Nights keep ``night_home`` of the mass on the home antenna and spread the
    rest over the home sub-prefecture.  Daytime buckets send ``hub_mass`` to a
    few bucket-specific hubs shared by everyone (home-specific weights), the
    remainder to the home sub-prefecture.  ``background`` is spread uniformly
    in every bucket.

    Returns the model and the antenna -> sub-prefecture map.
    """
    if n_antennas % n_subprefs:
        raise ValueError("antennas must divide evenly into sub-prefectures")
    rng = np.random.default_rng(seed)
    sp_map = np.repeat(np.arange(n_subprefs), n_antennas // n_subprefs)
    probs = np.zeros((n_antennas, len(Period), N_DAYTYPES, n_antennas))
    hubs = {(p, d): rng.choice(n_antennas, hubs_per_bucket, replace=False)
            for p in (Period.MORNING, Period.AFTERNOON) for d in DayType}
    for home in range(n_antennas):
        local = np.flatnonzero(sp_map == sp_map[home])
        for d in DayType:
            row = np.full(n_antennas, background / n_antennas)
            row[local] += (1 - night_home - background) / len(local)
            row[home] += night_home
            probs[home, Period.NIGHT, d] = row
            for p in (Period.MORNING, Period.AFTERNOON):
                row = np.full(n_antennas, background / n_antennas)
                row[hubs[p, d]] += hub_mass * rng.dirichlet(np.ones(hubs_per_bucket))
                row[local] += (1 - hub_mass - background) / len(local)
                probs[home, p, d] = row / row.sum()
    return MobilityModel.planted(probs), sp_map


@dataclass
class SyntheticCountry:
    model: MobilityModel
    populations: np.ndarray
    clusters: np.ndarray
    seed_infectives: list


def clustered_mobility(clusters: np.ndarray, stay_home: float = 0.6, stay_cluster: float = 0.35,
                       night_home: float = 0.9, weekend_home: float = 0.75) -> MobilityModel:
    """Planted model with mobility concentrated inside geographic clusters.

    Each row keeps ``stay_home`` on the home antenna, ``stay_cluster`` spread
    over the other antennas of the home cluster and the rest over the other
    clusters.  Nights and weekends use the larger home masses.
    """
    clusters = np.asarray(clusters)
    n = len(clusters)
    same = clusters[:, None] == clusters[None, :]
    eye = np.eye(n, dtype=bool)
    probs = np.empty((n, len(Period), N_DAYTYPES, n))

    def rows(home_mass):
        in_cluster = same & ~eye
        away = (1 - home_mass) * stay_cluster / (1 - stay_home)
        out = np.zeros((n, n))
        out[eye] = home_mass
        out += np.where(in_cluster, away / np.maximum(in_cluster.sum(1, keepdims=True), 1), 0.0)
        far = ~same
        rest = 1 - out.sum(1, keepdims=True)
        out += np.where(far, rest / np.maximum(far.sum(1, keepdims=True), 1), 0.0)
        return out / out.sum(1, keepdims=True)

    for d, day_home in ((DayType.WEEKDAY, stay_home), (DayType.WEEKEND, weekend_home)):
        probs[:, Period.MORNING, d] = rows(day_home)
        probs[:, Period.AFTERNOON, d] = rows(day_home)
        probs[:, Period.NIGHT, d] = rows(night_home)
    return MobilityModel.planted(probs)


def synthetic_country(n_antennas: int = 100, n_clusters: int = 5, population: int = 100_000,
                      seed: int = 0, seed_total: int = 23, seed_regions: int = 5,
                      **mobility) -> SyntheticCountry:
    """A clustered country whose seed infectives all sit in cluster 0."""
    rng = np.random.default_rng(seed)
    clusters = np.repeat(np.arange(n_clusters), -(-n_antennas // n_clusters))[:n_antennas]
    weights = rng.lognormal(0.0, 0.5, n_antennas)
    populations = rng.multinomial(population - n_antennas, weights / weights.sum()) + 1
    first = np.flatnonzero(clusters == 0)[:seed_regions]
    share = np.full(len(first), seed_total // len(first))
    share[: seed_total % len(first)] += 1
    seeds = [(int(r), int(c)) for r, c in zip(first, share)]
    return SyntheticCountry(clustered_mobility(clusters, **mobility), populations, clusters, seeds)
