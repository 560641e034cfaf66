"""Synthetic road layouts, thinning, dataset directories and mixed real/synthetic batches."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from PIL import Image
from skimage.morphology import thin as _skimage_thin

from .graph import RoadGraph, TopologyLabel
from .seeding import stream

DEFAULT_METERS_PER_PIXEL = 40.0 / 128
MIN_SIDE = 32
THINNING_METHOD = "guo-hall two-subiteration (skimage.morphology.thin) + staircase pruning"


class DataError(Exception):
    """Bad or inconsistent input data (unreadable files, malformed annotations, ...)."""


@dataclass
class LayoutImage:
    pixels: np.ndarray
    meters_per_pixel: float = DEFAULT_METERS_PER_PIXEL

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError("layout image must be a single-channel H x W array")
        h, w = self.pixels.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"layout image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        if self.pixels.min(initial=0) < 0 or self.pixels.max(initial=0) > 1:
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape

    def is_binary(self) -> bool:
        return bool(np.all((self.pixels == 0) | (self.pixels == 1)))


@dataclass
class Sample:
    id: str
    image: np.ndarray
    graph: RoadGraph | None = None
    label: TopologyLabel | None = None


@dataclass
class Dataset:
    items: list[Sample]
    source: str = "real"
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __len__(self):
        return len(self.items)

    def split(self, name: str) -> "Dataset":
        if name not in self.splits:
            raise DataError(f"split {name!r} not present (have {sorted(self.splits)})")
        wanted = set(self.splits[name])
        return Dataset([s for s in self.items if s.id in wanted], self.source, {name: self.splits[name]})

    def check(self) -> None:
        for s in self.items:
            if self.source == "synthetic" and s.graph is None:
                raise DataError(f"synthetic sample {s.id} has no ground-truth graph")
            if self.source == "real" and s.graph is not None:
                raise DataError(f"real sample {s.id} carries a graph")


# --------------------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    size: int = 128
    inset_px: int = 2
    # along-border position range, as a fraction of the side; keeps border joints out of corners
    border_range: tuple[float, float] = (0.0625, 0.9375)
    center_box: float = 0.25
    edge_prob: float = 0.7
    min_edges: int = 2
    # border-to-border edges between neighbouring sides; off by default (pure star)
    border_edge_prob: float = 0.0
    line_width: float = 2.0


BORDERS = ("top", "right", "bottom", "left")


def _border_node(side: str, t: float, cfg: SyntheticConfig) -> tuple[float, float]:
    s = cfg.size
    near = (cfg.inset_px + 0.5) / s
    far = (s - cfg.inset_px - 0.5) / s
    return {"top": (t, near), "bottom": (t, far), "left": (near, t), "right": (far, t)}[side]


def sample_star_graph(rng: np.random.Generator, cfg: SyntheticConfig = SyntheticConfig()) -> RoadGraph:
    """Five joints: one per border (top, right, bottom, left) then the centre joint (index 4)."""
    lo, hi = cfg.border_range
    nodes = [_border_node(side, rng.uniform(lo, hi), cfg) for side in BORDERS]
    half = cfg.center_box / 2
    nodes.append(tuple(rng.uniform(0.5 - half, 0.5 + half, size=2)))
    while True:
        on = rng.random(4) < cfg.edge_prob
        if on.sum() >= cfg.min_edges:
            break
    edges = [(k, 4) for k in range(4) if on[k]]
    if cfg.border_edge_prob > 0:
        for k in range(4):
            if rng.random() < cfg.border_edge_prob:
                edges.append((k, (k + 1) % 4))
    return RoadGraph.from_edges(np.array(nodes), edges)


def rasterize(graph: RoadGraph, size: int | tuple[int, int], width: float = 2.0, threshold: float = 0.5) -> np.ndarray:
    """Anti-aliased drawing of every binarized edge, returned as float coverage in [0, 1]."""
    h, w = (size, size) if np.isscalar(size) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    out = np.zeros((h, w))
    for i, j in graph.edges(threshold):
        ax, ay = graph.nodes[i] * (w, h)
        bx, by = graph.nodes[j] * (w, h)
        out = np.maximum(out, _segment_coverage(xx, yy, ax, ay, bx, by, width))
    return out


def _segment_coverage(xx, yy, ax, ay, bx, by, width):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        d = np.hypot(xx - ax, yy - ay)
    else:
        t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / L2, 0.0, 1.0)
        d = np.hypot(xx - (ax + t * dx), yy - (ay + t * dy))
    return np.clip(width / 2 + 0.5 - d, 0.0, 1.0)


def render_layout(graph: RoadGraph, size, width: float = 2.0) -> np.ndarray:
    """Binary, thinned raster of a graph: anti-alias, binarize at 0.5, thin."""
    return thin((rasterize(graph, size, width) >= 0.5).astype(np.float32))


def generate_synthetic_sample(rng: np.random.Generator, cfg: SyntheticConfig = SyntheticConfig()) -> tuple[np.ndarray, RoadGraph]:
    graph = sample_star_graph(rng, cfg)
    return render_layout(graph, cfg.size, cfg.line_width), graph


def center_degree_distribution(cfg: SyntheticConfig = SyntheticConfig()) -> dict[int, float]:
    """Exact law of the centre joint's degree under the star generator."""
    p = cfg.edge_prob
    raw = {k: math.comb(4, k) * p**k * (1 - p) ** (4 - k) for k in range(cfg.min_edges, 5)}
    z = sum(raw.values())
    return {k: v / z for k, v in raw.items()}


# --------------------------------------------------------------------------- thinning

_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]


def neighbour_count(mask: np.ndarray) -> np.ndarray:
    m = np.pad(mask.astype(np.int32), 1)
    h, w = mask.shape
    return sum(m[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in _NEIGHBOURS) * mask


def _prune_staircases(skel: np.ndarray) -> np.ndarray:
    """Drop corner pixels of 4-connected staircases; each is redundant for 8-connectivity."""
    skel = skel.copy()
    changed = True
    while changed:
        changed = False
        p = np.pad(skel, 1)
        for y, x in zip(*np.nonzero(skel)):
            ring = [bool(p[1 + y + dy, 1 + x + dx]) for dy, dx in _NEIGHBOURS]
            n = sum(ring)
            if n < 3:
                continue
            # removable iff the remaining neighbours stay 8-connected and we do not create an endpoint change:
            # a pixel whose 4-neighbours form an L (N+E, E+S, S+W, W+N) with the diagonal between them empty
            north, east, south, west = ring[1], ring[3], ring[5], ring[7]
            for a, b, diag_between in ((north, east, ring[2]), (east, south, ring[4]), (south, west, ring[6]), (west, north, ring[0])):
                if a and b and not diag_between and _simple(ring):
                    skel[y, x] = False
                    p[1 + y, 1 + x] = False
                    changed = True
                    break
    return skel


def _simple(ring: list[bool]) -> bool:
    """Removing the centre keeps its 8-neighbourhood a single 8-connected group."""
    idx = [k for k in range(8) if ring[k]]
    if not idx:
        return False
    seen = {idx[0]}
    todo = [idx[0]]
    coords = _NEIGHBOURS
    while todo:
        k = todo.pop()
        for m in idx:
            if m not in seen and max(abs(coords[k][0] - coords[m][0]), abs(coords[k][1] - coords[m][1])) <= 1:
                seen.add(m)
                todo.append(m)
    return len(seen) == len(idx)


def thin(image):
    """Unit-width 8-connected skeleton of a binary raster. Accepts an array or a LayoutImage."""
    if isinstance(image, LayoutImage):
        return LayoutImage(thin(image.pixels), image.meters_per_pixel)
    arr = np.asarray(image)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("thin expects a binary image with values in {0, 1}")
    skel = _skimage_thin(arr.astype(bool))
    skel = _prune_staircases(skel)
    return skel.astype(np.float32)


# --------------------------------------------------------------------------- dataset directories


def read_png(path, binarize: bool = True) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "I", "I;16", "RGB", "RGBA", "P"):
                raise DataError(f"{path}: unsupported image mode {im.mode}")
            if im.mode in ("RGB", "RGBA", "P"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
                if np.any(np.ptp(rgb, axis=-1) > 0):
                    raise DataError(f"{path}: colour image, expected a grayscale road mask")
                arr = rgb[..., 0] / 255.0
            elif im.mode == "1":
                arr = np.asarray(im, dtype=np.float32)
            else:
                arr = np.asarray(im, dtype=np.float32)
                arr = arr / (65535.0 if arr.max(initial=0) > 255 else 255.0)
    except DataError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    if not binarize:
        return arr
    # a road mask may carry anti-aliasing, not a grey-level photo
    if np.mean((arr > 0.25) & (arr < 0.75)) > 0.05:
        raise DataError(f"{path}: not a binary road layout (too many mid-grey pixels)")
    return (arr >= 0.5).astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_topology_annotations(path) -> dict[str, TopologyLabel]:
    labels: dict[str, TopologyLabel] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "label"]:
            raise DataError(f"{path}: expected header 'id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: malformed row {row}")
            sid, raw = row[0].strip(), row[1].strip()
            try:
                value = int(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {raw!r} is not an integer") from None
            if not 0 <= value <= 8:
                raise DataError(f"{path}:{lineno}: label {value} outside 0..8")
            if sid in labels:
                raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
            labels[sid] = TopologyLabel(value)
    return labels


def load_dataset(directory, split: str | None = None, annotations=None) -> Dataset:
    """Load ``images/*.png`` (+ optional ``graphs/``, ``split.json``, ``annotations.csv``).

    Every image is binarized and thinned on load. A directory with ``graphs/`` is a
    synthetic export; otherwise it is treated as real data.
    """
    root = Path(directory)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    paths = {p.stem: p for p in sorted(image_dir.glob("*.png"))}
    graph_dir = root / "graphs"
    source = "synthetic" if graph_dir.is_dir() else "real"

    splits: dict[str, list[str]] = {}
    if (root / "split.json").exists():
        try:
            splits = {k: [str(i) for i in v] for k, v in json.loads((root / "split.json").read_text()).items()}
        except (ValueError, AttributeError) as exc:
            raise DataError(f"{root}/split.json: malformed ({exc})") from exc
        for name, ids in splits.items():
            missing = [i for i in ids if i not in paths]
            if missing:
                raise DataError(f"split {name!r} names ids without images: {missing[:5]}")

    ann_path = Path(annotations) if annotations else root / "annotations.csv"
    labels = load_topology_annotations(ann_path) if ann_path.exists() else {}
    orphans = [i for i in labels if i not in paths]
    if orphans:
        raise DataError(f"{ann_path}: ids without a matching image: {orphans[:5]}")

    ids = list(paths)
    if split is not None:
        if split not in splits:
            raise DataError(f"{root}: split {split!r} not in split.json")
        ids = splits[split]
    items = []
    for sid in ids:
        img = thin(read_png(paths[sid]))
        graph = None
        if source == "synthetic":
            gpath = graph_dir / f"{sid}.json"
            if not gpath.exists():
                raise DataError(f"{gpath}: missing ground-truth graph")
            graph = RoadGraph.load(gpath)
        items.append(Sample(sid, img, graph, labels.get(sid)))
    return Dataset(items, source, splits)


load_real_dataset = load_dataset


def export_synthetic(out, count: int, seed: int, cfg: SyntheticConfig = SyntheticConfig(), jobs: int = 1) -> Dataset:
    """Write a synthetic dataset directory; output bytes depend only on (count, seed, cfg)."""
    from .metrics import classify_topology

    root = Path(out)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "graphs").mkdir(exist_ok=True)
    except OSError as exc:
        raise DataError(f"{root}: not writable ({exc})") from exc

    def make(k):
        return generate_synthetic_sample(stream(seed, "synth-gen", k), cfg)

    if jobs > 1 and count > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_make_sample, [(seed, k, cfg) for k in range(count)]))
    else:
        results = [make(k) for k in range(count)]

    items = []
    for k, (img, graph) in enumerate(results):
        sid = f"{k:06d}"
        write_png(root / "images" / f"{sid}.png", img)
        graph.save(root / "graphs" / f"{sid}.json", with_scores=False)
        items.append(Sample(sid, img, graph, classify_topology(graph)))
    ids = [s.id for s in items]
    n_val = n_test = count // 10
    splits = {"train": ids[: count - n_val - n_test], "val": ids[count - n_val - n_test : count - n_test], "test": ids[count - n_test :]}
    (root / "split.json").write_text(json.dumps(splits, indent=1))
    with open(root / "annotations.csv", "w", newline="") as fh:
        fh.write("id,label\n")
        for s in items:
            fh.write(f"{s.id},{int(s.label)}\n")
    return Dataset(items, "synthetic", splits)


def _make_sample(args):
    seed, k, cfg = args
    return generate_synthetic_sample(stream(seed, "synth-gen", k), cfg)


# --------------------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray  # B x H x W float32
    graphs: list  # RoadGraph or None per item
    labels: list
    synthetic: np.ndarray  # bool mask
    epoch: int


def batch_split(proportion_synthetic: float, batch_size: int) -> tuple[int, int]:
    n_syn = int(math.floor(proportion_synthetic * batch_size + 0.5))
    return n_syn, batch_size - n_syn


def mixed_batches(
    real: Dataset | None,
    synth_generator: Callable[[np.random.Generator], tuple[np.ndarray, RoadGraph]] | None,
    proportion_synthetic: float,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """Infinite stream of batches laid out as [real sub-batch, synthetic sub-batch].

    Real items are drawn without replacement within an epoch (one pass over ``real``).
    With no real data, the epoch counter stays 0.
    """
    if not 0.0 <= proportion_synthetic <= 1.0:
        raise ValueError("proportion_synthetic must lie in [0, 1]")
    n_syn, n_real = batch_split(proportion_synthetic, batch_size)
    if n_real and (real is None or len(real) == 0):
        raise DataError("real dataset is empty but the batch asks for real items")
    if n_syn and synth_generator is None:
        raise ValueError("synthetic items requested without a generator")
    if synth_generator is None:
        synth_generator = generate_synthetic_sample

    epoch, order, cursor = 0, None, 0
    if real is not None and len(real):
        order = rng.permutation(len(real))
    while True:
        imgs, graphs, labels, syn = [], [], [], []
        for _ in range(n_real):
            if cursor == len(order):
                epoch += 1
                order, cursor = rng.permutation(len(real)), 0
            s = real.items[order[cursor]]
            cursor += 1
            imgs.append(s.image)
            graphs.append(s.graph)
            labels.append(s.label)
            syn.append(False)
        for _ in range(n_syn):
            img, g = synth_generator(rng)
            imgs.append(img)
            graphs.append(g)
            labels.append(None)
            syn.append(True)
        yield Batch(np.stack(imgs).astype(np.float32), graphs, labels, np.array(syn), epoch)
