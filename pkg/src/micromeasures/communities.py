"""Antenna mobility graph and Louvain community detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .mobility import MobilityModel, ModelKind
from .trace import N_DAYTYPES, N_PERIODS


@dataclass
class MobilityGraph:
    """Undirected weighted graph; edge k joins ``a[k] < b[k]`` (0-based antennas)."""

    n_nodes: int
    a: np.ndarray
    b: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=float)
        if (self.a == self.b).any():
            raise ValueError("self-loops are not stored")
        if (self.weight <= 0).any():
            raise ValueError("edge weights must be positive")
        swap = self.a > self.b
        self.a[swap], self.b[swap] = self.b[swap], self.a[swap]

    @classmethod
    def from_dense(cls, weights: np.ndarray, threshold: float = 0.0) -> MobilityGraph:
        w = np.triu(np.asarray(weights, dtype=float), k=1)
        a, b = np.nonzero(w > threshold)
        return cls(len(w), a, b, w[a, b])

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def adjacency(self) -> sp.csr_matrix:
        upper = sp.coo_matrix((self.weight, (self.a, self.b)), shape=(self.n_nodes, self.n_nodes))
        return (upper + upper.T).tocsr()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"antenna_a": self.a + 1, "antenna_b": self.b + 1, "weight": self.weight})

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


@dataclass
class CommunityAssignment:
    labels: np.ndarray
    modularity: float = float("nan")
    # modularity after each accepted Louvain level, starting from singletons
    history: list = field(default_factory=list)

    @property
    def n_communities(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"antenna_id": np.arange(1, len(self.labels) + 1), "community_id": self.labels})

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def read_csv(cls, path) -> CommunityAssignment:
        frame = pd.read_csv(path).sort_values("antenna_id")
        return cls(relabel(frame["community_id"].to_numpy()))


def bucket_frequencies(steps_per_day: int = 3) -> np.ndarray:
    """Share of simulation steps falling in each (period, daytype) bucket."""
    freq = np.zeros((N_PERIODS, N_DAYTYPES))
    for day in range(7):
        daytype = int(day >= 5)
        for slot in range(steps_per_day):
            freq[slot * N_PERIODS // steps_per_day, daytype] += 1
    return freq / freq.sum()


def build_graph(model: MobilityModel, populations, steps_per_day: int = 3,
                threshold: float = 1e-6) -> MobilityGraph:
    """Expected trips per step between antennas, summed over both directions.

    Class c contributes ``pop_c * freq(bucket) * P_c(j | bucket)`` trips from
    its home to every other antenna j.
    """
    if model.kind is not ModelKind.HOME_ANTENNA_TIME:
        raise ValueError("the mobility graph needs a home-antenna-time model")
    populations = np.asarray(populations, dtype=float)
    freq = bucket_frequencies(steps_per_day)
    flow = np.einsum("pd,hpdj->hj", freq, model.probs) * populations[:, None]
    np.fill_diagonal(flow, 0.0)
    return MobilityGraph.from_dense(flow + flow.T, threshold=threshold * (1 - 1e-12))


def relabel(labels) -> np.ndarray:
    """Contiguous community ids from 0, in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse]


def _modularity_csr(adj: sp.csr_matrix, labels: np.ndarray, resolution: float) -> float:
    two_m = adj.sum()
    if two_m <= 0:
        raise ValueError("modularity is undefined on a graph without edges")
    k = np.asarray(adj.sum(axis=1)).ravel()
    coo = adj.tocoo()
    inside = np.bincount(labels[coo.row], weights=coo.data * (labels[coo.row] == labels[coo.col]),
                         minlength=labels.max() + 1)
    tot = np.bincount(labels, weights=k, minlength=labels.max() + 1)
    return float((inside / two_m - resolution * (tot / two_m) ** 2).sum())


def modularity(graph: MobilityGraph, assignment, resolution: float = 1.0) -> float:
    """Weighted Newman modularity of a partition."""
    labels = assignment.labels if isinstance(assignment, CommunityAssignment) else np.asarray(assignment)
    return _modularity_csr(graph.adjacency(), relabel(labels), resolution)


def _local_moves(adj: sp.csr_matrix, resolution: float, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One Louvain level: greedy single-node moves until a full pass changes nothing."""
    n = adj.shape[0]
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    k = np.asarray(adj.sum(axis=1)).ravel()
    two_m = k.sum()
    comm = np.arange(n)
    tot = k.copy()
    moved_any = False
    while True:
        moved = False
        for i in rng.permutation(n):
            nbrs = indices[indptr[i]:indptr[i + 1]]
            w = data[indptr[i]:indptr[i + 1]]
            keep = nbrs != i
            nbrs, w = nbrs[keep], w[keep]
            own = comm[i]
            tot[own] -= k[i]
            cands, first, inv = np.unique(comm[nbrs], return_index=True, return_inverse=True)
            k_in = np.bincount(inv, weights=w, minlength=len(cands))
            order = np.argsort(first)
            cands, k_in = cands[order], k_in[order]
            gains = k_in - resolution * tot[cands] * k[i] / two_m
            own_hit = np.flatnonzero(cands == own)
            best_gain = gains[own_hit[0]] if len(own_hit) else -resolution * tot[own] * k[i] / two_m
            best = own
            if len(gains):
                j = int(np.argmax(gains))
                if gains[j] > best_gain + 1e-12 * max(1.0, abs(best_gain)):
                    best = cands[j]
            tot[best] += k[i]
            if best != own:
                comm[i] = best
                moved = moved_any = True
        if not moved:
            return relabel(comm), moved_any


def louvain(graph: MobilityGraph, rng_seed: int = 0, resolution: float = 1.0,
            max_levels: int = 64) -> CommunityAssignment:
    """Two-phase Louvain: local moves, then aggregation, while modularity rises.

    Nodes are visited in a seeded random order; among equal-gain moves the
    community met first wins.  Isolated nodes stay singletons.
    """
    if graph.n_nodes < 1:
        raise ValueError("graph has no nodes")
    rng = np.random.default_rng(rng_seed)
    adj = graph.adjacency()
    membership = np.arange(graph.n_nodes)
    if graph.total_weight <= 0:
        return CommunityAssignment(membership, float("nan"), [])
    original = adj
    history = [_modularity_csr(original, membership, resolution)]
    for _ in range(max_levels):
        comm, moved = _local_moves(adj, resolution, rng)
        if not moved:
            break
        candidate = relabel(comm[membership])
        q = _modularity_csr(original, candidate, resolution)
        if q <= history[-1]:
            break
        membership = candidate
        history.append(q)
        indicator = sp.csr_matrix((np.ones(len(comm)), (np.arange(len(comm)), comm)))
        adj = (indicator.T @ adj @ indicator).tocsr()
    return CommunityAssignment(membership, history[-1], history)
