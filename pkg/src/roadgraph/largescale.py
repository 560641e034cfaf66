"""Large layouts: tile, parse each tile, stitch the tile graphs back into one global graph."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import DEFAULT_METERS_PER_PIXEL, LayoutImage, SyntheticConfig, render_layout, thin
from .graph import DEFAULT_THRESHOLD, RoadGraph

DEDUP_RADIUS_PX = 6.0
COLLINEAR_DEG = 10.0
MAP_FORMAT = "roadgraph-map/1"


# --------------------------------------------------------------------------- tiling


@dataclass
class Tiling:
    tiles: np.ndarray  # R x C x T x T
    tile_size: int
    image_shape: tuple[int, int]

    @property
    def grid(self) -> tuple[int, int]:
        return self.tiles.shape[0], self.tiles.shape[1]

    def origins(self) -> list[tuple[int, int]]:
        """Pixel (row, col) of each tile's top-left corner, row-major."""
        r, c = self.grid
        return [(i * self.tile_size, j * self.tile_size) for i in range(r) for j in range(c)]

    def stitch(self) -> np.ndarray:
        """Inverse of :func:`tile` on the unpadded region."""
        r, c, t, _ = self.tiles.shape
        h, w = self.image_shape
        return self.tiles.transpose(0, 2, 1, 3).reshape(r * t, c * t)[:h, :w]


def tile(image, tile_size: int = 128) -> Tiling:
    """Split into a row-major grid of ``tile_size`` squares; the last row/column is zero-padded."""
    if isinstance(image, LayoutImage):
        image = image.pixels
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("expected a single-channel H x W image")
    h, w = image.shape
    r, c = math.ceil(h / tile_size), math.ceil(w / tile_size)
    padded = np.zeros((r * tile_size, c * tile_size), np.float32)
    padded[:h, :w] = image
    tiles = padded.reshape(r, tile_size, c, tile_size).transpose(0, 2, 1, 3).copy()
    return Tiling(tiles, tile_size, (h, w))


# --------------------------------------------------------------------------- merging


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _angle_deg(u, v) -> float:
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-12)
    return math.degrees(math.acos(np.clip(cos, -1.0, 1.0)))


def merge_pixels(subgraphs, dedup_radius: float = DEDUP_RADIUS_PX,
                 collinear_deg: float = COLLINEAR_DEG, threshold: float = DEFAULT_THRESHOLD):
    """Stitch ``(graph, (row, col) origin, tile_size)`` triples.

    Returns global pixel (x, y) coordinates ``(N, 2)`` and a binary adjacency.

    Nodes from different tiles closer than ``dedup_radius`` are fused at their centroid and
    their edges united. A fused node left with exactly two nearly collinear edges is an
    artefact of the tile cut and is elided.
    """
    pts, owner, edges = [], [], set()
    for t, (g, (oy, ox), tile_size) in enumerate(subgraphs):
        g = g.drop_isolated(threshold)
        base = len(pts)
        for x, y in g.nodes:
            pts.append((ox + x * tile_size, oy + y * tile_size))
            owner.append(t)
        edges.update((base + i, base + j) for i, j in g.edges(threshold))
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros((0, 2)), np.zeros((0, 0))

    uf = _UnionFind(n)
    owner = np.asarray(owner)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    for i, j in zip(*np.nonzero((d <= dedup_radius) & (owner[:, None] != owner[None]))):
        if i < j:
            uf.union(i, j)
    roots = sorted({uf.find(i) for i in range(n)})
    index = {r: k for k, r in enumerate(roots)}
    members = [[] for _ in roots]
    for i in range(n):
        members[index[uf.find(i)]].append(i)
    nodes = np.array([pts[m].mean(axis=0) for m in members])
    fused = np.array([len(m) > 1 for m in members])
    adj = np.zeros((len(roots), len(roots)))
    for i, j in edges:
        a, b = index[uf.find(i)], index[uf.find(j)]
        if a != b:
            adj[a, b] = adj[b, a] = 1

    alive = np.ones(len(nodes), dtype=bool)
    changed = True
    while changed:
        changed = False
        for k in np.nonzero(fused & alive)[0]:
            nb = np.nonzero(adj[k])[0]
            if len(nb) != 2:
                continue
            u, v = nodes[nb[0]] - nodes[k], nodes[nb[1]] - nodes[k]
            if 180.0 - _angle_deg(u, v) <= collinear_deg:
                adj[k, :] = adj[:, k] = 0
                adj[nb[0], nb[1]] = adj[nb[1], nb[0]] = 1
                alive[k] = False
                changed = True
    keep = np.nonzero(alive)[0]
    return nodes[keep], adj[np.ix_(keep, keep)]


def merge(subgraphs, image_shape=None, **kw) -> RoadGraph:
    """Merge ``(graph, origin, tile_size)`` triples into one graph normalized to ``image_shape``
    (default: the extent of the tiles)."""
    nodes, adj = merge_pixels(subgraphs, **kw)
    if image_shape is None:
        image_shape = (max((o[0] + t for _, o, t in subgraphs), default=1), max((o[1] + t for _, o, t in subgraphs), default=1))
    h, w = image_shape
    norm = np.clip(nodes / np.array([w, h], dtype=np.float64), 0.0, 1.0) if len(nodes) else nodes
    return RoadGraph(norm, adj)


def parse_large(image, encoder, tile_size: int = 128, mode: str = "student", batch: int = 16, jobs: int = 1, **kw) -> RoadGraph:
    """Tile, thin and encode every tile, then merge. ``encoder`` may be a checkpoint path."""
    from .encoder import encode

    if isinstance(encoder, (str, Path)):
        from .checkpoint import load

        encoder = load(encoder)[0].encoder
    if encoder.cfg.image_size != tile_size:
        raise ValueError(f"tile size {tile_size} differs from the encoder's trained size {encoder.cfg.image_size}")

    tiling = tile(image, tile_size)
    raw = [(t >= 0.5).astype(np.float32) for t in tiling.tiles.reshape(-1, tile_size, tile_size)]
    if jobs > 1 and len(raw) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            flat = list(pool.map(thin, raw))
    else:
        flat = [thin(t) for t in raw]
    graphs = []
    if mode == "student":
        encoder.eval()
        with torch.no_grad():
            for s in range(0, len(flat), batch):
                x = torch.as_tensor(np.stack(flat[s : s + batch]))[:, None]
                graphs.extend(encoder.student_graphs(x))
    else:
        graphs = [encode(t, encoder, mode) for t in flat]
    return merge(with_origins(graphs, tiling), tiling.image_shape, **kw)


def with_origins(tile_graphs, tiling: Tiling):
    """Pair row-major tile graphs with their tile origins."""
    if len(tile_graphs) != len(tiling.origins()):
        raise ValueError(f"expected {len(tiling.origins())} tile graphs, got {len(tile_graphs)}")
    return [(g, o, tiling.tile_size) for g, o in zip(tile_graphs, tiling.origins())]


# --------------------------------------------------------------------------- map export


def export_map(graph: RoadGraph, image_shape, meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL,
               threshold: float = DEFAULT_THRESHOLD) -> dict:
    """OSM-like document: nodes with integer ids and metric x/y (origin top-left, y down), ways as id pairs.

    The normalized coordinates and edge scores travel as tags so the round trip is exact.
    """
    h, w = image_shape
    nodes = [
        {"id": i + 1, "x": float(x * w * meters_per_pixel), "y": float(y * h * meters_per_pixel),
         "tags": {"u": float(x), "v": float(y)}}
        for i, (x, y) in enumerate(graph.nodes)
    ]
    ways = [
        {"id": k + 1, "nodes": [i + 1, j + 1], "tags": {"highway": "road", "score": float(graph.adjacency[i, j])}}
        for k, (i, j) in enumerate(graph.edges(threshold))
    ]
    return {"format": MAP_FORMAT, "meters_per_pixel": meters_per_pixel, "image_shape": [int(h), int(w)],
            "nodes": nodes, "ways": ways}


def import_map(doc: dict) -> RoadGraph:
    if doc.get("format") != MAP_FORMAT:
        raise ValueError(f"not a {MAP_FORMAT} document")
    h, w = doc["image_shape"]
    mpp = doc["meters_per_pixel"]
    ids = {n["id"]: k for k, n in enumerate(doc["nodes"])}
    nodes = np.array(
        [[n["tags"]["u"], n["tags"]["v"]] if "tags" in n else [n["x"] / (w * mpp), n["y"] / (h * mpp)] for n in doc["nodes"]],
        dtype=np.float64,
    ).reshape(-1, 2)
    adj = np.zeros((len(nodes), len(nodes)))
    for way in doc["ways"]:
        score = way.get("tags", {}).get("score", 1.0)
        for a, b in zip(way["nodes"][:-1], way["nodes"][1:]):
            i, j = ids[a], ids[b]
            adj[i, j] = adj[j, i] = score
    return RoadGraph(nodes, adj)


def save_map(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


# --------------------------------------------------------------------------- composites with a known global graph


@dataclass
class Composite:
    image: np.ndarray  # (2T) x (2T)
    graph: RoadGraph  # global, normalized
    tile_graphs: list  # row-major, tile-normalized
    tile_size: int


def _quadrant_plan(rng: np.random.Generator, cfg: SyntheticConfig):
    """Which arms exist: external borders per quadrant and the four internal crossings."""
    # internal boundaries: (TL,TR), (BL,BR) vertical; (TL,BL), (TR,BR) horizontal
    while True:
        ext = rng.random((4, 2)) < cfg.edge_prob
        internal = rng.random(4) < cfg.edge_prob
        arms = ext.sum(axis=1) + np.array([internal[0] + internal[2], internal[0] + internal[3],
                                           internal[1] + internal[2], internal[1] + internal[3]])
        if np.all(arms >= cfg.min_edges):
            return ext, internal


def make_composite(rng: np.random.Generator, cfg: SyntheticConfig = SyntheticConfig(), min_turn_deg: float = 25.0,
                   max_tries: int = 1000) -> Composite:
    """2 x 2 composite of star layouts whose arms may continue into the neighbouring quadrant.

    A shared arm meets the tile boundary at a crossing node placed exactly on the boundary;
    crossings that are nearly straight (turn < ``min_turn_deg``) are rejected so that the
    global graph is unambiguous after collinear elision.
    """
    t = cfg.size
    inset = cfg.inset_px + 0.5
    lo, hi = cfg.border_range
    half = cfg.center_box / 2
    for _ in range(max_tries):
        ext, internal = _quadrant_plan(rng, cfg)
        # quadrant q = 2 * row + col; centres in global pixels
        centres = [((q % 2) * t + rng.uniform(0.5 - half, 0.5 + half) * t, (q // 2) * t + rng.uniform(0.5 - half, 0.5 + half) * t)
                   for q in range(4)]
        nodes = list(centres)
        edges = []
        tile_nodes = {q: [] for q in range(4)}  # global node ids visible per quadrant
        for q in range(4):
            tile_nodes[q].append(q)
        # external borders: quadrant row 0 owns the top, row 1 the bottom; col 0 the left, col 1 the right
        for q in range(4):
            row, col = divmod(q, 2)
            ox, oy = col * t, row * t
            sides = [("top" if row == 0 else "bottom"), ("left" if col == 0 else "right")]
            for k, side in enumerate(sides):
                if not ext[q, k]:
                    continue
                s = rng.uniform(lo, hi) * t
                p = {"top": (ox + s, inset), "bottom": (ox + s, 2 * t - inset),
                     "left": (inset, oy + s), "right": (2 * t - inset, oy + s)}[side]
                nodes.append(p)
                edges.append((q, len(nodes) - 1))
                tile_nodes[q].append(len(nodes) - 1)
        ok = True
        for b, on in enumerate(internal):
            if not on:
                continue
            qa, qb = [(0, 1), (2, 3), (0, 2), (1, 3)][b]
            s = rng.uniform(lo, hi) * t
            if b < 2:  # vertical boundary x = t
                p = (float(t), (b % 2) * t + s)
            else:
                p = ((b % 2) * t + s, float(t))
            u = np.subtract(centres[qa], p)
            v = np.subtract(centres[qb], p)
            if 180.0 - _angle_deg(u, v) < min_turn_deg:
                ok = False
                break
            nodes.append(p)
            k = len(nodes) - 1
            edges += [(qa, k), (qb, k)]
            tile_nodes[qa].append(k)
            tile_nodes[qb].append(k)
        if not ok:
            continue
        size = 2 * t
        pix = np.array(nodes, dtype=np.float64)
        graph = RoadGraph.from_edges(pix / size, edges)
        image = render_layout(graph, size, cfg.line_width)
        tile_graphs = []
        for q in range(4):
            row, col = divmod(q, 2)
            ids = tile_nodes[q]
            local = (pix[ids] - [col * t, row * t]) / t
            remap = {g: i for i, g in enumerate(ids)}
            tile_graphs.append(RoadGraph.from_edges(np.clip(local, 0, 1), [(remap[a], remap[b]) for a, b in edges if a in remap and b in remap]))
        return Composite(image, graph, tile_graphs, t)
    raise RuntimeError("could not place a composite without near-straight crossings")


# --------------------------------------------------------------------------- per-window views


def _clip_segment(p, q, lo, hi):
    """Liang-Barsky clip of p->q to the box [lo, hi]; returns (t0, t1) or None."""
    t0, t1 = 0.0, 1.0
    d = q - p
    for axis in range(2):
        for num, den in ((p[axis] - lo[axis], -d[axis]), (hi[axis] - p[axis], d[axis])):
            if den == 0:
                if num < 0:
                    return None
                continue
            r = num / den
            if den < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
    return (t0, t1) if t0 <= t1 else None


def clip_to_window(graph: RoadGraph, image_shape, window, threshold: float = DEFAULT_THRESHOLD) -> RoadGraph:
    """Restrict a global graph to a pixel window ``(x0, y0, size)``; cut edges end on the window border.

    Output coordinates are normalized to the window.
    """
    h, w = image_shape
    x0, y0, size = window
    lo, hi = np.array([x0, y0], float), np.array([x0 + size, y0 + size], float)
    pix = graph.nodes * [w, h]
    inside = np.all((pix >= lo - 1e-9) & (pix <= hi + 1e-9), axis=1)
    ids = {int(i): k for k, i in enumerate(np.nonzero(inside)[0])}
    nodes = [pix[i] for i in ids]
    edges = []

    def add(p):
        nodes.append(np.asarray(p, float))
        return len(nodes) - 1

    for i, j in graph.edges(threshold):
        if i in ids and j in ids:
            edges.append((ids[i], ids[j]))
            continue
        span = _clip_segment(pix[i], pix[j], lo, hi)
        if span is None or span[1] - span[0] < 1e-9:
            continue
        d = pix[j] - pix[i]
        a = ids[i] if i in ids else add(pix[i] + span[0] * d)
        b = ids[j] if j in ids else add(pix[i] + span[1] * d)
        edges.append((a, b))
    local = (np.array(nodes, dtype=np.float64).reshape(-1, 2) - lo) / size
    return RoadGraph.from_edges(np.clip(local, 0, 1), edges)


def quadrant_topologies(graph: RoadGraph, image_shape, tile_size: int, **kw) -> list:
    """Topology class of each tile window (row-major) of a global graph."""
    from .metrics import classify_topology

    h, w = image_shape
    out = []
    for y0 in range(0, h, tile_size):
        for x0 in range(0, w, tile_size):
            out.append(classify_topology(clip_to_window(graph, image_shape, (x0, y0, tile_size)), **kw))
    return out
