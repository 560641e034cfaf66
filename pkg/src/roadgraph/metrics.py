"""Triplet matching P/R/F1, border-accessibility topology classes and node-count statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graph import DEFAULT_THRESHOLD, RoadGraph, TopologyLabel, Triplet, reachable, to_triplets

TRIPLET_TOL = 8.0 / 128
ACCESS_DELTA = 4.0 / 128
REFERENCE_NODES = 3.784


@dataclass
class TripletMatchResult:
    matched: int
    n_pred: int
    n_gt: int
    precision: float
    recall: float
    f1: float

    def as_dict(self):
        return asdict(self)


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def triplets_compatible(p: Triplet, g: Triplet, tol: float) -> bool:
    def d(u, v):
        return np.hypot(u[0] - v[0], u[1] - v[1])

    same = d(p.endpoint_a, g.endpoint_a) <= tol and d(p.endpoint_b, g.endpoint_b) <= tol
    flipped = d(p.endpoint_a, g.endpoint_b) <= tol and d(p.endpoint_b, g.endpoint_a) <= tol
    return same or flipped


def compatibility(pred: Sequence[Triplet], gt: Sequence[Triplet], tol: float) -> np.ndarray:
    return np.array([[triplets_compatible(p, g, tol) for g in gt] for p in pred], dtype=bool).reshape(len(pred), len(gt))


def max_matching(compat: np.ndarray) -> int:
    """Size of a maximum one-to-one matching in a boolean compatibility matrix."""
    if compat.size == 0:
        return 0
    rows, cols = linear_sum_assignment(-compat.astype(np.float64))
    return int(compat[rows, cols].sum())


def match_triplets(pred, gt, tol: float = TRIPLET_TOL) -> TripletMatchResult:
    """Precision/recall/F1 from an optimal one-to-one matching of triplets.

    Precision with no predictions (and recall with no ground truth) is defined as 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pred, gt = list(pred), list(gt)
    m = max_matching(compatibility(pred, gt, tol))
    p = m / len(pred) if pred else 0.0
    r = m / len(gt) if gt else 0.0
    return TripletMatchResult(m, len(pred), len(gt), p, r, f1_score(p, r))


def match_graphs(pred: RoadGraph, gt: RoadGraph, tol: float = TRIPLET_TOL, threshold: float = DEFAULT_THRESHOLD) -> TripletMatchResult:
    return match_triplets(to_triplets(pred, threshold), to_triplets(gt, threshold), tol)


def aggregate_matches(results: Sequence[TripletMatchResult]) -> TripletMatchResult:
    """Micro-averaged P/R/F1 over many samples."""
    m = sum(r.matched for r in results)
    npred = sum(r.n_pred for r in results)
    ngt = sum(r.n_gt for r in results)
    p = m / npred if npred else 0.0
    r = m / ngt if ngt else 0.0
    return TripletMatchResult(m, npred, ngt, p, r, f1_score(p, r))


# --------------------------------------------------------------------------- topology


def border_nodes(graph: RoadGraph, delta: float = ACCESS_DELTA) -> dict[str, list[int]]:
    x, y = graph.nodes[:, 0], graph.nodes[:, 1]
    return {
        "left": np.nonzero(x <= delta)[0].tolist(),
        "right": np.nonzero(x >= 1 - delta)[0].tolist(),
        "front": np.nonzero(y <= delta)[0].tolist(),
        "bottom": np.nonzero(y >= 1 - delta)[0].tolist(),
    }


def border_accessibility(graph: RoadGraph, delta: float = ACCESS_DELTA, threshold: float = DEFAULT_THRESHOLD):
    """(left, front, right) reachability from the bottom (ego) border over binarized edges."""
    near = border_nodes(graph, delta)
    if not near["bottom"]:
        return False, False, False
    return tuple(reachable(graph, near["bottom"], near[side], threshold) for side in ("left", "front", "right"))


def classify_topology(graph: RoadGraph, delta: float = ACCESS_DELTA, threshold: float = DEFAULT_THRESHOLD,
                      mapping: dict | None = None) -> TopologyLabel:
    """Rule-based topology class. ``mapping`` may remap the accessibility triple to other labels.

    EMPTY when no bottom node carries an edge: an isolated joint has no road and is not a connection.
    """
    linked = (np.asarray(graph.adjacency) >= threshold).any(axis=1) if graph.num_nodes else np.zeros(0, bool)
    if not any(linked[i] for i in border_nodes(graph, delta)["bottom"]):
        key = None
        label = TopologyLabel.EMPTY
    else:
        key = border_accessibility(graph, delta, threshold)
        label = TopologyLabel.from_access(*key)
    if mapping:
        return TopologyLabel(mapping.get(key if key is not None else "empty", label))
    return label


def topology_accuracy(preds: Sequence, gts: Sequence) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} labels")
    if not preds:
        return 0.0
    return float(np.mean([int(p) == int(g) for p, g in zip(preds, gts)]))


def confusion_matrix(preds: Sequence, gts: Sequence, n: int = 9) -> np.ndarray:
    cm = np.zeros((n, n), dtype=int)
    for p, g in zip(preds, gts):
        cm[int(g), int(p)] += 1
    return cm


# --------------------------------------------------------------------------- node statistics


@dataclass
class NodeStats:
    avg_nodes: float
    reference: float = REFERENCE_NODES

    @property
    def exceeding_ratio(self) -> float:
        return (self.avg_nodes - self.reference) / self.reference

    def as_dict(self):
        return {"avg_nodes": self.avg_nodes, "reference": self.reference, "exceeding_ratio": self.exceeding_ratio}


def node_stats(graphs_or_counts: Sequence, reference: float = REFERENCE_NODES) -> NodeStats:
    if len(graphs_or_counts) == 0:
        raise ValueError("node_stats needs at least one graph")
    counts = [g.num_nodes if isinstance(g, RoadGraph) else int(g) for g in graphs_or_counts]
    return NodeStats(float(np.mean(counts)), reference)
