"""Image -> graph: teacher/student joint attention, soft-argmax, pairwise ROIs, relation classifier."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import RoadGraph

TEMPERATURE = 0.1
ROI_SIZE = (8, 32)
CORRIDOR_PX = 8.0
MARGIN_PX = 4.0
PEAK_THRESHOLD = 0.3
NMS_RADIUS_PX = 6.0


class UntrainedModelError(RuntimeError):
    pass


# --------------------------------------------------------------------------- coordinates


def pixel_centres(h: int, w: int, dtype=torch.float32, device=None):
    """Normalized x and y of pixel centres, shapes (W,) and (H,)."""
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
    return xs, ys


def spatial_softmax(logits: torch.Tensor, temperature: float = TEMPERATURE) -> torch.Tensor:
    """Softmax over the last two (spatial) axes."""
    shape = logits.shape
    flat = logits.reshape(*shape[:-2], -1) / temperature
    return torch.softmax(flat, dim=-1).reshape(shape)


def smooth_maps(maps: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of normalized maps (..., H, W), renormalized to unit mass.

    Keeps the soft-argmax of interior mass unchanged while widening single-pixel peaks.
    """
    if sigma <= 0:
        return maps
    r = int(np.ceil(2 * sigma))
    taps = torch.arange(-r, r + 1, dtype=maps.dtype, device=maps.device)
    g = torch.exp(-0.5 * (taps / sigma) ** 2)
    g = g / g.sum()
    shape = maps.shape
    x = maps.reshape(-1, 1, *shape[-2:])
    x = F.conv2d(x, g.view(1, 1, 1, -1), padding=(0, r))
    x = F.conv2d(x, g.view(1, 1, -1, 1), padding=(r, 0))
    x = x.reshape(shape)
    return x / x.sum(dim=(-2, -1), keepdim=True).clamp_min(1e-12)


def soft_argmax(maps: torch.Tensor) -> torch.Tensor:
    """Expected (x, y) position under normalized maps ``(..., H, W)``; returns ``(..., 2)``."""
    total = maps.sum(dim=(-2, -1))
    if torch.any(total <= 0):
        raise ValueError("soft_argmax needs maps with positive mass")
    h, w = maps.shape[-2:]
    xs, ys = pixel_centres(h, w, maps.dtype, maps.device)
    x = (maps.sum(dim=-2) * xs).sum(-1) / total
    y = (maps.sum(dim=-1) * ys).sum(-1) / total
    return torch.stack([x, y], dim=-1)


def coord_channels(b: int, h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    xs, ys = pixel_centres(h, w, dtype, device)
    gx = xs.view(1, 1, 1, w).expand(b, 1, h, w)
    gy = ys.view(1, 1, h, 1).expand(b, 1, h, w)
    return torch.cat([gx, gy], dim=1) * 2 - 1


# --------------------------------------------------------------------------- networks


def _backbone(in_ch: int, width: int) -> nn.Sequential:
    # 128 -> 32 resolution, dilations widen the receptive field to ~the whole patch
    return nn.Sequential(
        nn.Conv2d(in_ch, width // 2, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(width // 2, width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
        nn.Conv2d(width, width, 3, padding=4, dilation=4), nn.ReLU(inplace=True),
        nn.Conv2d(width, width, 3, padding=8, dilation=8), nn.ReLU(inplace=True),
    )


def _prior_maps(k: int, res: int, border: float, centre: float) -> torch.Tensor:
    """Initial positional logits: channels 0-3 favour the top/right/bottom/left border, channel 4 the
    centre, further (spare) channels a corner, where they can park on background."""
    xs = (torch.arange(res) + 0.5) / res
    gy, gx = torch.meshgrid(xs, xs, indexing="ij")
    ramps = [1 - gy, gx, gy, 1 - gx, 1 - 2 * torch.maximum((gx - 0.5).abs(), (gy - 0.5).abs())]
    corners = [(2 - gx - gy) / 2, (1 + gx - gy) / 2, (gx + gy) / 2, (1 - gx + gy) / 2]
    prior = torch.zeros(k, res, res)
    for c in range(k):
        prior[c] = border * ramps[c] if c < 4 else centre * ramps[4] if c == 4 else border * corners[(c - 5) % 4]
    return prior


def road_degree(images: torch.Tensor) -> torch.Tensor:
    """Fraction of the 8 neighbours that are road, on road pixels (1/8 at road ends, >= 3/8 at junctions)."""
    ring = images.new_ones(1, 1, 3, 3)
    ring[..., 1, 1] = 0
    return F.conv2d(images, ring, padding=1) * images / 8


def road_bend(images: torch.Tensor, radius: int = 6) -> torch.Tensor:
    """Length of the mean offset to road pixels within ``radius``, on road pixels.

    ~0 along straight roads, ~0.58 sin(b/2) at a bend of b, ~0.58 at road ends.
    """
    r = radius
    off = torch.arange(-r, r + 1, dtype=images.dtype, device=images.device)
    dy, dx = torch.meshgrid(off, off, indexing="ij")
    disk = ((dx**2 + dy**2 <= (r + 0.5) ** 2) & ((dx != 0) | (dy != 0))).to(images.dtype)
    k = torch.stack([dx * disk / r, dy * disk / r, disk])[:, None]
    m = F.conv2d(images, k, padding=r)
    return torch.hypot(m[:, :1], m[:, 1:2]) / m[:, 2:].clamp_min(1) * images


def road_cues(images: torch.Tensor) -> torch.Tensor:
    """Fixed local shape cues (degree, bend) fed to the full-resolution branches."""
    return torch.cat([road_degree(images), road_bend(images)], 1)


class TeacherAttention(nn.Module):
    """K-channel attention; each channel is spatially normalized and attends one joint.

    Logits = learned features + learnable low-resolution positional prior + full-resolution local
    branch + gain * input mask,
    so attention starts on road pixels and each channel starts with a preferred region.
    """

    def __init__(self, k: int = 6, width: int = 32, border_prior: float = 6.0, centre_prior: float = 3.0, road_gain: float = 1.0):
        super().__init__()
        self.k = k
        self.features = _backbone(3, width)
        self.head = nn.Conv2d(width + 2, k, 1)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)
        self.prior = nn.Parameter(_prior_maps(k, 32, border_prior, centre_prior))
        gain = torch.full((k,), float(road_gain))
        gain[5:] = 0.0  # spare channels start blind to roads
        self.road_gain = nn.Parameter(gain)
        # full-resolution local branch (receptive field ~11 px) for sharp joint evidence, silent at init
        self.fine = nn.Sequential(
            nn.Conv2d(5, 16, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 16, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(16, k, 3, padding=2, dilation=2),
        )
        nn.init.zeros_(self.fine[-1].weight)
        nn.init.zeros_(self.fine[-1].bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, _, h, w = images.shape
        x = torch.cat([images, coord_channels(b, h, w, images.dtype, images.device)], 1)
        f = self.features(x)
        fh, fw = f.shape[-2:]
        f = torch.cat([f, coord_channels(b, fh, fw, f.dtype, f.device)], 1)
        logits = self.head(f) + F.interpolate(self.prior[None].to(f.dtype), size=(fh, fw), mode="bilinear", align_corners=False)
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        local = self.fine(torch.cat([x, road_cues(images)], 1))
        return logits + local + self.road_gain.view(1, -1, 1, 1) * images


class StudentAttention(nn.Module):
    """Single-channel joint heatmap in [0, 1] for any number of joints."""

    def __init__(self, width: int = 32, shape_cues: bool = True):
        super().__init__()
        self.shape_cues = shape_cues
        self.features = _backbone(3, width)
        self.head = nn.Conv2d(width + 2, 1, 1)
        nn.init.constant_(self.head.bias, -4.0)
        # full-resolution correction so peaks can sit on single road pixels;
        # receptive field ~13 px: enough to see every arm of a junction
        self.fine = nn.Sequential(
            nn.Conv2d(6 if shape_cues else 4, 16, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 16, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(16, 16, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(16, 1, 3, padding=1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, _, h, w = images.shape
        x = torch.cat([images, coord_channels(b, h, w, images.dtype, images.device)], 1)
        f = self.features(x)
        fh, fw = f.shape[-2:]
        f = torch.cat([f, coord_channels(b, fh, fw, f.dtype, f.device)], 1)
        coarse = F.interpolate(self.head(f), size=(h, w), mode="bilinear", align_corners=False)
        extra = [road_cues(images)] if self.shape_cues else []
        logits = coarse + self.fine(torch.cat([x, coarse, *extra], 1))
        return torch.sigmoid(logits)


class RelationClassifier(nn.Module):
    def __init__(self, roi_size=ROI_SIZE, width: int = 16, init_bias: float = -2.0):
        super().__init__()
        rh, rw = roi_size
        self.conv = nn.Sequential(
            nn.Conv2d(1, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.along = nn.Sequential(nn.Conv1d(width, width, 3, padding=1), nn.ReLU(inplace=True))
        self.fc = nn.Sequential(nn.Linear(width * rw, 32), nn.ReLU(inplace=True), nn.Linear(32, 1))
        nn.init.constant_(self.fc[-1].bias, init_bias)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        f = self.conv(patches).amax(dim=2)  # collapse the corridor width
        f = self.along(f)
        return torch.sigmoid(self.fc(f.flatten(1))).squeeze(-1)


# --------------------------------------------------------------------------- ROIs and relations


def canonical_pair(a: torch.Tensor, b: torch.Tensor):
    """Order each pair so the first endpoint comes first in row-major (y, then x) order."""
    swap = (a[..., 1] > b[..., 1]) | ((a[..., 1] == b[..., 1]) & (a[..., 0] > b[..., 0]))
    s = swap.unsqueeze(-1)
    return torch.where(s, b, a), torch.where(s, a, b)


def roi_grid(a: torch.Tensor, b: torch.Tensor, image_hw, roi_size=ROI_SIZE, corridor=CORRIDOR_PX, margin=MARGIN_PX) -> torch.Tensor:
    """grid_sample coordinates of the oriented corridor a->b; a, b are ``(P, 2)`` normalized."""
    h, w = image_hw
    rh, rw = roi_size
    scale = torch.tensor([w, h], dtype=a.dtype, device=a.device)
    pa, pb = a * scale, b * scale
    d = pb - pa
    length = torch.linalg.vector_norm(d, dim=-1, keepdim=True)
    tiny = length < 1e-6
    u = torch.where(tiny, torch.tensor([1.0, 0.0], dtype=a.dtype, device=a.device).expand_as(d), d / length.clamp_min(1e-6))
    n = torch.stack([-u[..., 1], u[..., 0]], -1)
    span = length + 2 * margin
    centre = (pa + pb) / 2
    s = ((torch.arange(rw, dtype=a.dtype, device=a.device) + 0.5) / rw - 0.5)  # along
    t = ((torch.arange(rh, dtype=a.dtype, device=a.device) + 0.5) / rh - 0.5) * corridor  # across
    pts = (
        centre[:, None, None, :]
        + u[:, None, None, :] * (s[None, None, :, None] * span[:, None, None, :])
        + n[:, None, None, :] * t[None, :, None, None]
    )
    return pts / scale * 2 - 1


def pairwise_roi(images: torch.Tensor, a: torch.Tensor, b: torch.Tensor, roi_size=ROI_SIZE,
                 corridor=CORRIDOR_PX, margin=MARGIN_PX) -> torch.Tensor:
    """Resample the corridor between a and b from each image.

    ``images`` is ``(P, 1, H, W)`` (one image per pair) and a, b are ``(P, 2)``.
    Returns ``(P, 1, rh, rw)``; differentiable in a and b.
    """
    grid = roi_grid(a, b, images.shape[-2:], roi_size, corridor, margin)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def pair_indices(n: int, device=None):
    return torch.triu_indices(n, n, offset=1, device=device)


def relation_scores(images: torch.Tensor, nodes: torch.Tensor, classifier: RelationClassifier) -> torch.Tensor:
    """Symmetric ``(B, N, N)`` adjacency with zero diagonal for ``(B, N, 2)`` nodes."""
    bsz, n, _ = nodes.shape
    adj = nodes.new_zeros(bsz, n, n)
    if n < 2:
        return adj
    iu, ju = pair_indices(n, nodes.device)
    a, b = canonical_pair(nodes[:, iu].reshape(-1, 2), nodes[:, ju].reshape(-1, 2))
    imgs = images.repeat_interleave(len(iu), dim=0)
    scores = classifier(pairwise_roi(imgs, a, b)).view(bsz, -1)
    adj = adj.index_put((torch.arange(bsz)[:, None], iu[None], ju[None]), scores)
    return adj + adj.transpose(1, 2)


def classify_relation(patch: torch.Tensor, classifier: RelationClassifier) -> torch.Tensor:
    return classifier(patch)


# --------------------------------------------------------------------------- peaks


def extract_peaks(heatmap, threshold: float = PEAK_THRESHOLD, nms_radius: float = NMS_RADIUS_PX) -> list[tuple[float, float]]:
    """Local maxima above ``threshold`` kept greedily by score with spacing > ``nms_radius`` pixels.

    Ties are broken by row-major index; returns normalized (x, y) of the pixel centres.
    """
    hm = np.asarray(heatmap.detach().cpu() if torch.is_tensor(heatmap) else heatmap, dtype=np.float64)
    h, w = hm.shape
    padded = np.pad(hm, 1, constant_values=-np.inf)
    neigh = np.max([padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)], axis=0)
    cand = np.nonzero((hm >= neigh) & (hm >= threshold) & (hm > 0))
    flat = cand[0] * w + cand[1]
    order = np.lexsort((flat, -hm[cand]))
    kept: list[tuple[int, int]] = []
    r2 = nms_radius**2
    for k in order:
        y, x = int(cand[0][k]), int(cand[1][k])
        if all((y - ky) ** 2 + (x - kx) ** 2 > r2 for ky, kx in kept):
            kept.append((y, x))
    return [((x + 0.5) / w, (y + 0.5) / h) for y, x in kept]


# --------------------------------------------------------------------------- full encoder


@dataclass
class EncoderConfig:
    k: int = 6
    image_size: int = 128
    width: int = 32
    peak_threshold: float = PEAK_THRESHOLD
    nms_radius: float = NMS_RADIUS_PX
    map_smoothing_px: float = 1.0


class GraphEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        if cfg.k < 2:
            raise ValueError("need at least two teacher channels")
        self.cfg = cfg
        self.teacher = TeacherAttention(cfg.k, cfg.width)
        self.student = StudentAttention(cfg.width)
        # exponential moving average of the student weights; used for inference
        self.student_ema = copy.deepcopy(self.student).requires_grad_(False)
        self.relation = RelationClassifier()

    def _check(self, images: torch.Tensor):
        s = self.cfg.image_size
        if images.shape[-2:] != (s, s):
            raise ValueError(f"encoder expects {s}x{s} images, got {tuple(images.shape[-2:])}")

    def teacher_attend(self, images: torch.Tensor) -> torch.Tensor:
        self._check(images)
        return smooth_maps(spatial_softmax(self.teacher(images)), self.cfg.map_smoothing_px)

    def student_attend(self, images: torch.Tensor, averaged: bool = False) -> torch.Tensor:
        self._check(images)
        return (self.student_ema if averaged else self.student)(images)

    @torch.no_grad()
    def update_student_ema(self, decay: float) -> None:
        for e, p in zip(self.student_ema.parameters(), self.student.parameters()):
            e.lerp_(p, 1.0 - decay)

    def teacher_graph(self, images: torch.Tensor):
        """Differentiable teacher pass: (maps, nodes (B,K,2), adjacency (B,K,K))."""
        maps = self.teacher_attend(images)
        nodes = soft_argmax(maps)
        return maps, nodes, relation_scores(images, nodes, self.relation)

    @torch.no_grad()
    def student_graphs(self, images: torch.Tensor, threshold=None, nms_radius=None) -> list[RoadGraph]:
        threshold = self.cfg.peak_threshold if threshold is None else threshold
        nms_radius = self.cfg.nms_radius if nms_radius is None else nms_radius
        heat = self.student_attend(images, averaged=True)
        out = []
        for img, hm in zip(images, heat):
            peaks = extract_peaks(hm[0], threshold, nms_radius)
            if not peaks:
                out.append(RoadGraph())
                continue
            nodes = torch.tensor(peaks, dtype=images.dtype)[None]
            adj = relation_scores(img[None], nodes, self.relation)[0]
            out.append(RoadGraph(nodes[0].double().numpy(), adj.double().numpy()))
        return out

    def architecture_hash(self) -> str:
        desc = repr(self) + repr(self.cfg) + repr([(k, tuple(v.shape)) for k, v in self.state_dict().items()])
        return hashlib.sha256(desc.encode()).hexdigest()[:16]


def used_channels(adjacency: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """(B, K) mask: a teacher channel counts as used if any of its relation scores reaches threshold."""
    return (adjacency >= threshold).any(dim=-1)


def _as_batch(image) -> torch.Tensor:
    arr = getattr(image, "pixels", image)
    t = torch.as_tensor(np.asarray(arr), dtype=torch.float32)
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def encode(image, model: GraphEncoder, mode: str = "student", require_trained: bool = False) -> RoadGraph:
    """Parse one layout image into a RoadGraph.

    Teacher mode always returns ``K`` nodes; student mode returns one node per detected peak.
    """
    if require_trained and getattr(model, "iteration", 0) <= 0:
        raise UntrainedModelError("encoder parameters are untrained (checkpoint iteration 0)")
    x = _as_batch(image)
    if mode == "student":
        return model.student_graphs(x)[0]
    if mode == "teacher":
        with torch.no_grad():
            _, nodes, adj = model.teacher_graph(x)
        return RoadGraph(nodes[0].double().clamp(0, 1).numpy(), adj[0].double().numpy())
    raise ValueError(f"unknown mode {mode!r}")
