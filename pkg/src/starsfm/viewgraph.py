"""View graph construction, star decomposition and structural statistics."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_fitted, check_unit_interval


class UnionFind:
    def __init__(self, items=()):
        self.parent = {x: x for x in items}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # smaller root id wins so component labels are reproducible
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True


def _key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass
class CandidateScores:
    """Symmetrized retrieval candidates with pairwise scores in [0, 1]."""

    images: list[int]
    scores: dict[tuple[int, int], float] = field(default_factory=dict)

    @classmethod
    def from_directed(cls, images, directed) -> CandidateScores:
        """Build from ``{i: {j: alpha_ij}}`` or an iterable of ``(i, j, alpha)``.

        Directed scores are merged by taking the larger of the two.
        """
        images = sorted(int(i) for i in images)
        known = set(images)
        if isinstance(directed, dict):
            triples = [(i, j, a) for i, row in directed.items() for j, a in row.items()]
        else:
            triples = list(directed)
        scores: dict[tuple[int, int], float] = {}
        for i, j, a in triples:
            i, j, a = int(i), int(j), float(a)
            if i == j:
                continue
            if i not in known or j not in known:
                raise ValueError(f"candidate pair ({i}, {j}) references an unknown image")
            check_unit_interval(a, "score")
            k = _key(i, j)
            scores[k] = max(scores.get(k, 0.0), a)
        return cls(images, scores)

    def to_json(self) -> dict:
        return {
            "images": self.images,
            "pairs": [{"i": i, "j": j, "alpha": a} for (i, j), a in sorted(self.scores.items())],
        }

    @classmethod
    def from_json(cls, data: dict) -> CandidateScores:
        return cls.from_directed(data["images"], [(p["i"], p["j"], p["alpha"]) for p in data["pairs"]])


@dataclass
class ViewGraph:
    """Undirected graph over image ids with per-edge score and overlap."""

    vertices: list[int]
    alpha: dict[tuple[int, int], float] = field(default_factory=dict)
    overlap: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = sorted(set(int(v) for v in self.vertices))
        vs = set(self.vertices)
        for (i, j) in list(self.alpha) + list(self.overlap):
            if i == j:
                raise ValueError("self-loops are not allowed")
            if i > j or i not in vs or j not in vs:
                raise ValueError(f"malformed edge ({i}, {j})")
        for (i, j) in self.alpha:
            self.overlap.setdefault((i, j), 1.0)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.alpha)

    def has_edge(self, i, j) -> bool:
        return _key(i, j) in self.alpha

    def add_edge(self, i, j, alpha=1.0, overlap=1.0):
        if i == j:
            raise ValueError("self-loops are not allowed")
        k = _key(i, j)
        self.alpha[k] = float(alpha)
        self.overlap[k] = float(overlap)

    def remove_edge(self, i, j):
        k = _key(i, j)
        del self.alpha[k]
        self.overlap.pop(k, None)

    def neighbors(self, v) -> list[int]:
        return sorted(j if i == v else i for (i, j) in self.alpha if v in (i, j))

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {v: [] for v in self.vertices}
        for i, j in self.alpha:
            adj[i].append(j)
            adj[j].append(i)
        for v in adj:
            adj[v].sort()
        return adj

    def components(self) -> list[list[int]]:
        """Connected components, largest first, ties by smallest member id."""
        uf = UnionFind(self.vertices)
        for i, j in self.alpha:
            uf.union(i, j)
        groups: dict[int, list[int]] = {}
        for v in self.vertices:
            groups.setdefault(uf.find(v), []).append(v)
        return sorted(groups.values(), key=lambda g: (-len(g), g[0]))

    def is_connected(self) -> bool:
        return len(self.vertices) > 0 and len(self.components()) == 1

    def subgraph(self, vertices) -> ViewGraph:
        vs = set(vertices)
        return ViewGraph(
            sorted(vs),
            {k: a for k, a in self.alpha.items() if k[0] in vs and k[1] in vs},
            {k: o for k, o in self.overlap.items() if k[0] in vs and k[1] in vs},
        )

    def copy(self) -> ViewGraph:
        return ViewGraph(list(self.vertices), dict(self.alpha), dict(self.overlap))

    def laplacian(self) -> np.ndarray:
        index = {v: n for n, v in enumerate(self.vertices)}
        L = np.zeros((len(index), len(index)))
        for i, j in self.alpha:
            a, b = index[i], index[j]
            L[a, b] -= 1.0
            L[b, a] -= 1.0
            L[a, a] += 1.0
            L[b, b] += 1.0
        return L

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices,
            "edges": [
                {"i": i, "j": j, "alpha": self.alpha[(i, j)], "overlap": self.overlap[(i, j)]}
                for (i, j) in self.edges
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> ViewGraph:
        g = cls(data["vertices"])
        for e in data["edges"]:
            if g.has_edge(e["i"], e["j"]):
                raise ValueError(f"duplicate edge ({e['i']}, {e['j']})")
            g.add_edge(int(e["i"]), int(e["j"]), e["alpha"], e["overlap"])
        return g

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> ViewGraph:
        return cls.from_json(json.loads(Path(path).read_text()))


def threshold_schedule(delta0: float = 0.8, step: float = 0.1, floor: float = 0.2) -> list[float]:
    """Thresholds tried in order; the floor itself is attempted."""
    if not (0 < floor <= delta0 <= 1) or not step > 0:
        raise ValueError("need 0 < floor <= delta0 <= 1 and step > 0")
    out = []
    t = 0
    while True:
        # index-based to avoid drift from repeated subtraction
        delta = round(delta0 - t * step, 12)
        if delta < floor:
            return out
        out.append(delta)
        t += 1


def dynamic_threshold_connect(
    scores: CandidateScores, delta0: float = 0.8, step: float = 0.1, floor: float = 0.2
) -> ViewGraph:
    """Grow the view graph by lowering the score threshold until it connects.

    Each round admits every candidate edge whose score exceeds the current
    threshold and whose endpoints lie in different components as of the
    start of the round. If no scheduled threshold connects the graph, the
    largest connected component is returned.
    """
    return ViewGraphBuilder(delta0=delta0, step=step, floor=floor).fit(scores).graph_


class ViewGraphBuilder(BaseEstimator):
    """Estimator form of :func:`dynamic_threshold_connect`.

    Fitted attributes: ``graph_`` (largest component), ``full_graph_``,
    ``thresholds_`` (rounds actually run) and ``connected_``.
    """

    def __init__(self, delta0=0.8, step=0.1, floor=0.2):
        self.delta0 = delta0
        self.step = step
        self.floor = floor

    def fit(self, scores: CandidateScores, y=None):
        if not scores.images:
            raise ValueError("empty image set")
        schedule = threshold_schedule(self.delta0, self.step, self.floor)
        # descending score, then lexicographic pair
        ordered = sorted(scores.scores.items(), key=lambda kv: (-kv[1], kv[0]))
        g = ViewGraph(scores.images)
        uf = UnionFind(scores.images)
        n_components = len(scores.images)
        rounds = []
        for delta in schedule:
            if n_components == 1:
                break
            rounds.append(delta)
            labels = {v: uf.find(v) for v in scores.images}
            admitted = [(k, a) for k, a in ordered if a > delta and labels[k[0]] != labels[k[1]]]
            for (i, j), a in admitted:
                g.add_edge(i, j, a, 1.0)
                if uf.union(i, j):
                    n_components -= 1
        self.full_graph_ = g
        self.thresholds_ = rounds
        self.connected_ = n_components == 1
        self.graph_ = g if self.connected_ else g.subgraph(g.components()[0])
        return self

    def transform(self, scores=None):
        check_fitted(self, "graph_")
        return self.graph_


@dataclass(frozen=True)
class StarGraph:
    center: int
    members: tuple[int, ...]

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(m for m in self.members if m != self.center)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [_key(self.center, m) for m in self.neighbors]


def decompose_stars(g: ViewGraph, cap: int = 25) -> list[StarGraph]:
    """One star per vertex with at least one neighbor.

    Vertices with more than ``cap`` neighbors keep the ``cap`` highest-score
    ones (ties to the smaller id). Members are listed in ascending id.
    """
    if not g.vertices:
        raise ValueError("empty view graph")
    adj = g.adjacency()
    stars = []
    for v in g.vertices:
        nb = adj[v]
        if not nb:
            continue
        if len(nb) > cap:
            nb = sorted(nb, key=lambda m: (-g.alpha[_key(v, m)], m))[:cap]
        stars.append(StarGraph(v, tuple(sorted([v, *nb]))))
    return stars


def _bfs(adj, src) -> dict[int, int]:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def graph_radius(g: ViewGraph) -> int:
    """Minimum eccentricity over vertices."""
    if not g.is_connected():
        raise ValueError("graph radius needs a connected graph")
    adj = g.adjacency()
    return min(max(_bfs(adj, v).values()) for v in g.vertices)


def fiedler_value(g: ViewGraph) -> float:
    """Second-smallest eigenvalue of the unweighted combinatorial Laplacian."""
    if len(g.vertices) < 2:
        raise ValueError("Fiedler value needs at least two vertices")
    w = np.linalg.eigvalsh(g.laplacian())
    return float(max(w[1], 0.0))


@dataclass(frozen=True)
class GraphStats:
    radius: int
    fiedler: float
    n_components: int


def graph_stats(g: ViewGraph) -> GraphStats:
    comps = g.components()
    largest = g.subgraph(comps[0]) if comps else g
    radius = graph_radius(largest) if largest.vertices else 0
    fiedler = fiedler_value(g) if len(g.vertices) >= 2 else 0.0
    return GraphStats(radius, fiedler, len(comps))
