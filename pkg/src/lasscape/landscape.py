"""Landscape graphs built from run logs, their metrics, layouts and trajectories."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations

import networkx as nx
import numpy as np

from .search import RunLog
from .stats import normalize_fitness


class DanglingParent(ValueError):
    pass


@dataclass
class NodeInfo:
    text: str
    fitness: float
    count: int
    feasible: bool
    first_index: int


@dataclass
class LandscapeGraph:
    nodes: dict[str, NodeInfo] = field(default_factory=dict)
    edges: dict[tuple[str, str], int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def neighbors(self) -> dict[str, set[str]]:
        adj: dict[str, set[str]] = {k: set() for k in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def filtered(self, min_weight: int) -> "LandscapeGraph":
        """Same nodes, keeping only edges with weight strictly above ``min_weight``."""
        return LandscapeGraph(dict(self.nodes), {e: w for e, w in self.edges.items() if w > min_weight})

    def normalized_fitness(self) -> dict[str, float]:
        """Feasible nodes min-max scaled to [0, 1]; infeasible nodes get 1.0 (worst)."""
        ids = sorted(k for k, v in self.nodes.items() if v.feasible)
        out = {k: 1.0 for k in self.nodes}
        if ids:
            out.update(zip(ids, normalize_fitness([self.nodes[k].fitness for k in ids])))
        return out

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        for k in sorted(self.nodes):
            info = self.nodes[k]
            g.add_node(k, fitness=info.fitness, count=info.count, feasible=info.feasible)
        for (a, b), w in sorted(self.edges.items()):
            g.add_edge(a, b, weight=w)
        return g


def _edge(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a < b else (b, a)


def build_graph(log: RunLog) -> LandscapeGraph:
    g = LandscapeGraph()
    for ev in log.events:
        cid = ev.canonical_id
        for pid in ev.parent_ids:
            if pid not in g.nodes:
                raise DanglingParent(f"event {ev.eval_index} references unknown parent {pid}")
        node = g.nodes.get(cid)
        if node is None:
            g.nodes[cid] = NodeInfo(ev.candidate.canonical_text, ev.fitness.value, 1, ev.fitness.feasible, ev.eval_index)
        else:
            node.count += 1
            node.fitness = min(node.fitness, ev.fitness.value)
            node.feasible = node.feasible or ev.fitness.feasible
        for pid in dict.fromkeys(ev.parent_ids):
            if pid == cid:
                continue
            key = _edge(pid, cid)
            g.edges[key] = g.edges.get(key, 0) + 1
    return g


@dataclass(frozen=True)
class GraphMetrics:
    density: float
    average_degree: float
    clustering: float


def metrics(g: LandscapeGraph) -> GraphMetrics:
    """Density, mean degree and mean local clustering; edge weights are ignored."""
    n, m = g.n, len(g.edges)
    density = 2.0 * m / (n * (n - 1)) if n >= 2 else 0.0
    degree = 2.0 * m / n if n >= 1 else 0.0
    adj = g.neighbors()
    total = 0.0
    for node, nbrs in adj.items():
        k = len(nbrs)
        if k < 2:
            continue
        links = sum(1 for a, b in combinations(sorted(nbrs), 2) if b in adj[a])
        total += links / (k * (k - 1) / 2.0)
    clustering = total / n if n else 0.0
    return GraphMetrics(density, degree, clustering)


def layout(
    g: LandscapeGraph,
    dims: int = 2,
    seed: int = 0,
    iterations: int = 200,
    weight_threshold: int = 0,
) -> dict[str, tuple[float, ...]]:
    """Force-directed coordinates in the unit square, scaled uniformly.

    Nodes with an edge above ``weight_threshold`` are placed by
    Fruchterman-Reingold; the rest sit on a ring around them.  With
    ``dims=3`` the third coordinate is the node's normalized fitness.
    """
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    ids = sorted(g.nodes)
    if not ids:
        return {}
    kept = g.filtered(weight_threshold)
    connected = sorted({v for e in kept.edges for v in e})
    pos: dict[str, np.ndarray] = {}
    if connected:
        sub = nx.Graph()
        sub.add_nodes_from(connected)
        for (a, b), w in sorted(kept.edges.items()):
            sub.add_edge(a, b, weight=w)
        placed = nx.spring_layout(sub, dim=2, seed=seed, iterations=iterations, weight="weight")
        pos.update({k: np.asarray(placed[k], dtype=np.float64) for k in connected})
    isolated = [k for k in ids if k not in pos]
    radius = 1.5 if pos else 1.0
    for i, k in enumerate(isolated):
        angle = 2 * math.pi * i / len(isolated)
        pos[k] = np.round(np.array([radius * math.cos(angle), radius * math.sin(angle)]), 12)
    coords = np.array([pos[k] for k in ids])
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = hi - lo
    # one scale for every axis keeps distances comparable; the short axis is centered
    extent = float(span.max())
    if extent > 0:
        scaled = (coords - lo) / extent + (1.0 - span / extent) / 2.0
    else:
        scaled = np.full_like(coords, 0.5)
    out: dict[str, tuple[float, ...]] = {k: tuple(float(c) for c in scaled[i]) for i, k in enumerate(ids)}
    if dims == 3:
        z = g.normalized_fitness()
        out = {k: v + (z[k],) for k, v in out.items()}
    return out


@dataclass
class TrajectoryGraph:
    best: str
    nodes: dict[str, NodeInfo]
    edges: list[tuple[str, str]]
    levels: dict[str, int]


def trajectory(log: RunLog) -> TrajectoryGraph:
    """Ancestry of the best candidate, leveled by directed distance to it.

    Parent links that point back to a candidate first logged before its
    parent (a re-generation) are ignored so the graph stays acyclic.
    """
    best_ev = log.best()
    g = build_graph(log)
    first = {k: v.first_index for k, v in g.nodes.items()}
    edges: set[tuple[str, str]] = set()
    for ev in log.events:
        for pid in ev.parent_ids:
            if pid != ev.canonical_id and first[pid] < first[ev.canonical_id]:
                edges.add((pid, ev.canonical_id))
    incoming: dict[str, list[str]] = {}
    for a, b in edges:
        incoming.setdefault(b, []).append(a)
    best = best_ev.canonical_id
    levels = {best: 0}
    queue = deque([best])
    while queue:
        node = queue.popleft()
        for parent in sorted(incoming.get(node, ())):
            if parent not in levels:
                levels[parent] = levels[node] + 1
                queue.append(parent)
    kept = sorted((a, b) for a, b in edges if a in levels and b in levels)
    return TrajectoryGraph(best, {k: g.nodes[k] for k in sorted(levels)}, kept, levels)

