"""Road graph representation and the small amount of graph algebra everything else needs.

Coordinates are normalized to the unit square: x grows rightward, y grows downward,
origin at the top-left corner of the image, unit = one image side.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

# endpoint-distinctness tolerance, as a fraction of the image side
NODE_EPS = 1.0 / 64
DEFAULT_THRESHOLD = 0.5


@dataclass
class RoadGraph:
    nodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    adjacency: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 2)
        n = len(self.nodes)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64).reshape(n, n)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def validate(self, atol: float = 1e-9) -> None:
        a = self.adjacency
        if not np.allclose(a, a.T, atol=atol):
            raise ValueError("adjacency is not symmetric")
        if np.any(np.abs(np.diag(a)) > atol):
            raise ValueError("adjacency diagonal must be zero")
        if np.any((a < -atol) | (a > 1 + atol)):
            raise ValueError("adjacency scores must lie in [0, 1]")
        if np.any((self.nodes < -atol) | (self.nodes > 1 + atol)):
            raise ValueError("node coordinates must lie in [0, 1]")

    def edges(self, threshold: float = DEFAULT_THRESHOLD) -> list[tuple[int, int]]:
        """Binarized edges as ``(i, j)`` with ``i < j``, row-major order."""
        b = binary_matrix(self.adjacency, threshold)
        i, j = np.nonzero(np.triu(b, 1))
        return list(zip(i.tolist(), j.tolist()))

    def degrees(self, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
        return binary_matrix(self.adjacency, threshold).sum(axis=1)

    def subgraph(self, keep: Iterable[int]) -> "RoadGraph":
        keep = np.asarray(list(keep), dtype=int)
        return RoadGraph(self.nodes[keep], self.adjacency[np.ix_(keep, keep)])

    def drop_isolated(self, threshold: float = DEFAULT_THRESHOLD) -> "RoadGraph":
        return self.subgraph(np.nonzero(self.degrees(threshold) > 0)[0])

    @classmethod
    def from_edges(cls, nodes, edges: Iterable[tuple[int, int]]) -> "RoadGraph":
        nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 2)
        a = np.zeros((len(nodes), len(nodes)))
        for i, j in edges:
            if i == j:
                continue
            a[i, j] = a[j, i] = 1.0
        return cls(nodes, a)

    # Graph JSON: {"nodes": [[x, y], ...], "edges": [[i, j], ...], "scores": [s, ...]}
    def to_json(self, threshold: float = DEFAULT_THRESHOLD, with_scores: bool = True) -> dict:
        edges = self.edges(threshold)
        doc = {"nodes": self.nodes.tolist(), "edges": [list(e) for e in edges]}
        if with_scores:
            doc["scores"] = [float(self.adjacency[i, j]) for i, j in edges]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RoadGraph":
        nodes = np.asarray(doc.get("nodes", []), dtype=np.float64).reshape(-1, 2)
        edges = doc.get("edges", [])
        scores = doc.get("scores")
        a = np.zeros((len(nodes), len(nodes)))
        for k, (i, j) in enumerate(edges):
            if not (0 <= i < len(nodes) and 0 <= j < len(nodes)) or i == j:
                raise ValueError(f"bad edge {i, j} for {len(nodes)} nodes")
            s = 1.0 if scores is None else float(scores[k])
            a[i, j] = a[j, i] = s
        return cls(nodes, a)

    def save(self, path, **kw) -> None:
        Path(path).write_text(json.dumps(self.to_json(**kw)))

    @classmethod
    def load(cls, path) -> "RoadGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


class TopologyLabel(IntEnum):
    """Scene class from the (left, front, right) border accessibility triple.

    Values 0..7 encode ``4*left + 2*front + right``; EMPTY means no road reaches the
    bottom (ego) border.
    """

    DEAD_END = 0
    RIGHT = 1
    FRONT = 2
    FRONT_RIGHT = 3
    LEFT = 4
    LEFT_RIGHT = 5
    LEFT_FRONT = 6
    CROSSROAD = 7
    EMPTY = 8

    @classmethod
    def from_access(cls, left: bool, front: bool, right: bool) -> "TopologyLabel":
        return cls(4 * int(left) + 2 * int(front) + int(right))

    def access(self) -> tuple[bool, bool, bool] | None:
        if self is TopologyLabel.EMPTY:
            return None
        v = int(self)
        return bool(v & 4), bool(v & 2), bool(v & 1)


def binary_matrix(adjacency, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.float64)
    b = (a >= threshold).astype(np.float64)
    np.fill_diagonal(b, 0.0)
    return b


def binarize_adjacency(graph: RoadGraph, threshold: float = DEFAULT_THRESHOLD) -> RoadGraph:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return RoadGraph(graph.nodes.copy(), binary_matrix(graph.adjacency, threshold))


@dataclass(frozen=True)
class Triplet:
    """An unordered pair of connected joints; equality ignores endpoint order."""

    endpoint_a: tuple[float, float]
    endpoint_b: tuple[float, float]

    def __post_init__(self):
        a, b = tuple(map(float, self.endpoint_a)), tuple(map(float, self.endpoint_b))
        # canonical order so (a, b) and (b, a) hash the same
        if (a[1], a[0]) > (b[1], b[0]):
            a, b = b, a
        object.__setattr__(self, "endpoint_a", a)
        object.__setattr__(self, "endpoint_b", b)

    @property
    def length(self) -> float:
        return float(np.hypot(self.endpoint_a[0] - self.endpoint_b[0], self.endpoint_a[1] - self.endpoint_b[1]))

    def is_degenerate(self, eps: float = NODE_EPS) -> bool:
        return self.length <= eps


def to_triplets(graph: RoadGraph, threshold: float = DEFAULT_THRESHOLD) -> set[Triplet]:
    return {Triplet(tuple(graph.nodes[i]), tuple(graph.nodes[j])) for i, j in graph.edges(threshold)}


def from_triplets(triplets: Iterable[Triplet], eps: float = 1e-12) -> RoadGraph:
    """Rebuild a binary graph from triplets, merging endpoints closer than ``eps``."""
    nodes: list[tuple[float, float]] = []
    edges = []

    def index(p):
        for k, q in enumerate(nodes):
            if np.hypot(p[0] - q[0], p[1] - q[1]) <= eps:
                return k
        nodes.append(p)
        return len(nodes) - 1

    for t in sorted(triplets, key=lambda t: (t.endpoint_a[1], t.endpoint_a[0], t.endpoint_b[1], t.endpoint_b[0])):
        edges.append((index(t.endpoint_a), index(t.endpoint_b)))
    return RoadGraph.from_edges(np.array(nodes).reshape(-1, 2), edges)


def components(graph: RoadGraph, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Connected-component id per node over binarized edges."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import connected_components

    if graph.num_nodes == 0:
        return np.zeros(0, dtype=int)
    _, labels = connected_components(csr_matrix(binary_matrix(graph.adjacency, threshold)), directed=False)
    return labels


def reachable(graph: RoadGraph, sources: Iterable[int], targets: Iterable[int], threshold: float = DEFAULT_THRESHOLD) -> bool:
    sources, targets = set(sources), set(targets)
    n = graph.num_nodes
    for i in sources | targets:
        if not 0 <= i < n:
            raise IndexError(f"node index {i} out of range for {n} nodes")
    if not sources or not targets:
        return False
    labels = components(graph, threshold)
    return bool({labels[i] for i in sources} & {labels[j] for j in targets})


def graph_close(a: RoadGraph, b: RoadGraph, node_tol: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    """True iff some node bijection keeps every node within ``node_tol`` and maps edges onto edges."""
    n = a.num_nodes
    if n != b.num_nodes:
        return False
    if n == 0:
        return True
    ea, eb = binary_matrix(a.adjacency, threshold), binary_matrix(b.adjacency, threshold)
    if ea.sum() != eb.sum():
        return False
    dist = np.linalg.norm(a.nodes[:, None, :] - b.nodes[None, :, :], axis=-1)
    candidates = [np.nonzero(dist[i] <= node_tol + 1e-12)[0] for i in range(n)]
    if any(len(c) == 0 for c in candidates):
        return False
    # most constrained first keeps the backtracking shallow
    order = sorted(range(n), key=lambda i: len(candidates[i]))
    assign = [-1] * n
    used = np.zeros(n, dtype=bool)

    def extend(depth):
        if depth == n:
            return True
        i = order[depth]
        for j in candidates[i]:
            if used[j]:
                continue
            ok = True
            for prev in order[:depth]:
                if ea[i, prev] != eb[j, assign[prev]]:
                    ok = False
                    break
            if not ok:
                continue
            assign[i], used[j] = j, True
            if extend(depth + 1):
                return True
            assign[i], used[j] = -1, False
        return False

    return extend(0)
