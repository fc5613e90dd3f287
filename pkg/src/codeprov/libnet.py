"""Library co-occurrence network and community coarsening.

Libraries that co-occur in the same projects more often than chance get
connected by edges weighted with smoothed pointwise mutual information;
Louvain community detection over that graph yields fine communities, and a
second Louvain pass on the community-aggregated graph yields coarse ones.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence


@dataclass
class CooccurrenceCounts:
    project_counts: dict[str, int]
    pair_counts: dict[tuple[str, str], int]
    n_projects: int


@dataclass
class LibraryGraph:
    nodes: list[str]
    edges: dict[tuple[str, str], float]  # keys sorted pairs, weights > 0
    project_counts: dict[str, int]
    pair_counts: dict[tuple[str, str], int]
    n_projects: int
    skipped_pairs: int = 0  # undefined PMI at alpha=0

    def neighbors(self) -> dict[str, dict[str, float]]:
        adj: dict[str, dict[str, float]] = {n: {} for n in self.nodes}
        for (a, b), w in self.edges.items():
            adj[a][b] = w
            adj[b][a] = w
        return adj


@dataclass
class CommunityMap:
    assignment: dict[str, int]
    level: str  # "fine" | "coarse"
    resolution: float
    seed: int


def cooccurrence_counts(project_library_sets: Mapping[str, Iterable[str]]) -> CooccurrenceCounts:
    """Distinct-project counts per library and per unordered pair.

    A pair counts once per project regardless of import multiplicity.
    """
    project_counts: Counter[str] = Counter()
    pair_counts: Counter[tuple[str, str]] = Counter()
    n_projects = 0
    for _, libs in sorted(project_library_sets.items()):
        libset = sorted(set(libs))
        if not libset:
            continue
        n_projects += 1
        project_counts.update(libset)
        for i, a in enumerate(libset):
            for b in libset[i + 1:]:
                pair_counts[(a, b)] += 1
    return CooccurrenceCounts(dict(project_counts), dict(pair_counts), n_projects)


def pmi(c_ab: int, c_a: int, c_b: int, n: int, alpha: float,
        n_libraries: int, n_pairs: int) -> Optional[float]:
    """Additively smoothed PMI.

    Joint and marginal probabilities share the (N + alpha*K) normalizer,
    with K the number of unordered library pairs and each marginal getting
    alpha pseudo-counts per library. Returns None where alpha = 0 leaves
    the ratio undefined.
    """
    num = (c_ab + alpha) * (n + alpha * n_pairs)
    den = (c_a + alpha * n_libraries) * (c_b + alpha * n_libraries)
    if num == 0 or den == 0:
        return None
    return math.log(num / den)


def pmi_graph(counts: CooccurrenceCounts, alpha: float = 1.0,
              threshold: float = 0.0) -> LibraryGraph:
    """Graph keeping edges with PMI strictly above the threshold."""
    if counts.n_projects < 1:
        raise ValueError("need at least one project")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    libs = sorted(counts.project_counts)
    v = len(libs)
    n_pairs = v * (v - 1) // 2
    edges: dict[tuple[str, str], float] = {}
    skipped = 0
    for (a, b), c_ab in sorted(counts.pair_counts.items()):
        value = pmi(c_ab, counts.project_counts[a], counts.project_counts[b],
                    counts.n_projects, alpha, v, n_pairs)
        if value is None:
            skipped += 1
            continue
        if value > threshold:
            edges[(a, b)] = value
    return LibraryGraph(nodes=libs, edges=edges,
                        project_counts=dict(counts.project_counts),
                        pair_counts=dict(counts.pair_counts),
                        n_projects=counts.n_projects, skipped_pairs=skipped)


def top_k_filter(graph: LibraryGraph, k: int = 5000) -> LibraryGraph:
    """Restrict to the k most common libraries, then drop isolated nodes.

    Commonness is the distinct-project count; ties break lexicographically.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(graph.nodes, key=lambda lib: (-graph.project_counts.get(lib, 0), lib))
    keep = set(ranked[:k])
    edges = {(a, b): w for (a, b), w in graph.edges.items() if a in keep and b in keep}
    connected = {n for pair in edges for n in pair}
    nodes = sorted(n for n in keep if n in connected)
    return LibraryGraph(
        nodes=nodes, edges=edges,
        project_counts={n: graph.project_counts[n] for n in nodes},
        pair_counts={p: c for p, c in graph.pair_counts.items()
                     if p[0] in connected and p[1] in connected},
        n_projects=graph.n_projects, skipped_pairs=graph.skipped_pairs,
    )


# ---------------------------------------------------------------------------
# Louvain
# ---------------------------------------------------------------------------

def modularity(adj: Mapping[str, Mapping[str, float]], assignment: Mapping[str, int],
               resolution: float = 1.0) -> float:
    """Weighted modularity of a partition (self-loops allowed in adj)."""
    two_m = sum(sum(nbrs.values()) for nbrs in adj.values())
    if two_m == 0:
        return 0.0
    intra: Counter[int] = Counter()
    degree: Counter[int] = Counter()
    for node, nbrs in adj.items():
        c = assignment[node]
        degree[c] += sum(nbrs.values())
        for other, w in nbrs.items():
            if assignment[other] == c:
                intra[c] += w
    q = 0.0
    for c in degree:
        q += intra[c] / two_m - resolution * (degree[c] / two_m) ** 2
    return q


def _one_level(adj: dict[str, dict[str, float]], resolution: float,
               rng: random.Random) -> dict[str, int]:
    """Louvain local-moving phase; returns node -> community."""
    nodes = sorted(adj)
    comm = {n: i for i, n in enumerate(nodes)}
    # self-loop weight (doubled intra weight on aggregated graphs) counts
    # once toward the degree, which keeps community degrees consistent
    # across aggregation levels
    degree = {n: sum(adj[n].values()) for n in nodes}
    comm_degree = {comm[n]: degree[n] for n in nodes}
    two_m = sum(degree.values())
    if two_m == 0:
        return comm

    improved = True
    while improved:
        improved = False
        order = list(nodes)
        rng.shuffle(order)
        for node in order:
            c_old = comm[node]
            # weight from node to each neighboring community (self excluded)
            links: dict[int, float] = defaultdict(float)
            for other, w in adj[node].items():
                if other != node:
                    links[comm[other]] += w
            comm_degree[c_old] -= degree[node]
            base = links.get(c_old, 0.0) - resolution * comm_degree[c_old] * degree[node] / two_m
            best_c, best_gain = c_old, 0.0
            # sorted iteration: on equal gains the smallest community wins
            for c, w_in in sorted(links.items()):
                if c == c_old:
                    continue
                gain = (w_in - resolution * comm_degree[c] * degree[node] / two_m) - base
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            comm[node] = best_c
            comm_degree[best_c] = comm_degree.get(best_c, 0.0) + degree[node]
            if best_c != c_old:
                improved = True
    return comm


def _aggregate(adj: dict[str, dict[str, float]],
               comm: Mapping[str, int]) -> tuple[dict[str, dict[str, float]], dict[int, str]]:
    """Community-level graph; intra-community weight becomes a self-loop."""
    labels = {c: f"c{idx}" for idx, c in enumerate(sorted(set(comm.values())))}
    agg: dict[str, dict[str, float]] = {lab: defaultdict(float) for lab in labels.values()}
    for node, nbrs in adj.items():
        ca = labels[comm[node]]
        for other, w in nbrs.items():
            cb = labels[comm[other]]
            agg[ca][cb] += w  # symmetric input keeps this symmetric
    return {a: dict(b) for a, b in agg.items()}, labels


def _louvain_passes(adj: dict[str, dict[str, float]], resolution: float,
                    rng: random.Random) -> list[dict[str, int]]:
    """Run local moving + aggregation until communities stop changing."""
    partitions = []
    current = adj
    while True:
        comm = _one_level(current, resolution, rng)
        n_comms = len(set(comm.values()))
        partitions.append(comm)
        if n_comms == len(current):
            break
        current, _ = _aggregate(current, comm)
    return partitions


def _flatten(partitions: Sequence[dict[str, int]]) -> dict[str, int]:
    """Compose per-pass partitions back onto original nodes."""
    if not partitions:
        return {}
    assignment = dict(partitions[0])
    for level in partitions[1:]:
        labels = {c: f"c{idx}" for idx, c in enumerate(sorted(set(assignment.values())))}
        assignment = {node: level[labels[c]] for node, c in assignment.items()}
    # dense ids, deterministic order by smallest member name
    groups: dict[int, list[str]] = defaultdict(list)
    for node, c in assignment.items():
        groups[c].append(node)
    ordered = sorted(groups.values(), key=lambda members: min(members))
    return {node: idx for idx, members in enumerate(ordered) for node in members}


def louvain(graph: LibraryGraph, resolution: float = 1.0, seed: int = 0,
            level: str = "fine") -> CommunityMap:
    """Seeded two-phase Louvain; "coarse" reruns it on the aggregated graph."""
    adj = graph.neighbors()
    if not adj:
        return CommunityMap(assignment={}, level=level, resolution=resolution, seed=seed)
    rng = random.Random(seed)
    fine = _flatten(_louvain_passes(adj, resolution, rng))
    if level == "fine":
        return CommunityMap(assignment=fine, level="fine", resolution=resolution, seed=seed)
    if level != "coarse":
        raise ValueError(f"unknown level {level!r}")
    agg, labels = _aggregate(adj, fine)
    rng2 = random.Random(seed + 1)
    coarse_on_agg = _flatten(_louvain_passes(agg, resolution, rng2))
    back = {c: f"c{idx}" for idx, c in enumerate(sorted(set(fine.values())))}
    assignment = {node: coarse_on_agg[back[c]] for node, c in fine.items()}
    groups: dict[int, list[str]] = defaultdict(list)
    for node, c in assignment.items():
        groups[c].append(node)
    ordered = sorted(groups.values(), key=lambda members: min(members))
    dense = {node: idx for idx, members in enumerate(ordered) for node in members}
    return CommunityMap(assignment=dense, level="coarse", resolution=resolution, seed=seed)


def community_json(fine: CommunityMap, coarse: CommunityMap) -> dict:
    """library -> {"fine": id, "coarse": id} mapping for communities.json."""
    if set(fine.assignment) != set(coarse.assignment):
        raise ValueError("fine and coarse maps cover different node sets")
    return {lib: {"fine": fine.assignment[lib], "coarse": coarse.assignment[lib]}
            for lib in sorted(fine.assignment)}


def load_community_json(path) -> dict[str, dict[str, int]]:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
