"""Graph -> image: template road segments pasted by affine grid sampling, then residual refinement."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import pair_indices

TEMPLATE_SHAPE = (8, 64)
BAR_WIDTH_PX = 2.0
MIN_LENGTH_PX = 2.0


def make_template(shape=TEMPLATE_SHAPE, bar_width: float = BAR_WIDTH_PX, dtype=torch.float32) -> torch.Tensor:
    """Horizontal anti-aliased bar spanning the full template length, centred across its height."""
    rows, cols = shape
    offset = torch.arange(rows, dtype=dtype) + 0.5 - rows / 2
    profile = (bar_width / 2 + 0.5 - offset.abs()).clamp(0, 1)
    return profile[:, None].expand(rows, cols).contiguous()


def segment_transform(a: torch.Tensor, b: torch.Tensor, canvas_hw=(128, 128), template_height_px: float | None = None,
                      min_length_px: float = MIN_LENGTH_PX) -> torch.Tensor:
    """Affine ``(..., 2, 3)`` taking template coords (u, v) in [-1, 1]^2 to normalized canvas coords.

    The u axis runs from a to b; the v axis spans the template height, fixed in pixels.
    """
    h, w = canvas_hw
    template_height_px = TEMPLATE_SHAPE[0] if template_height_px is None else template_height_px
    scale = torch.tensor([w, h], dtype=a.dtype, device=a.device)
    pa, pb = a * scale, b * scale
    d = pb - pa
    # smooth clamp of the drawn length so a == b gives a dot instead of a singular map
    length = torch.sqrt((d * d).sum(-1) + min_length_px**2)
    tiny = (d.abs().amax(-1, keepdim=True) < 1e-9)
    d_safe = torch.where(tiny, torch.ones_like(d) * torch.tensor([1.0, 0.0], dtype=d.dtype, device=d.device), d)
    angle = torch.atan2(d_safe[..., 1], d_safe[..., 0])
    c, s = torch.cos(angle), torch.sin(angle)
    half_len, half_wid = length / 2, torch.full_like(length, template_height_px / 2)
    mid = (pa + pb) / 2
    m = torch.stack([
        torch.stack([c * half_len / w, -s * half_wid / w, mid[..., 0] / w], -1),
        torch.stack([s * half_len / h, c * half_wid / h, mid[..., 1] / h], -1),
    ], -2)
    return m


def _inverse_grid(a: torch.Tensor, b: torch.Tensor, canvas_hw, template_shape=TEMPLATE_SHAPE, min_length_px=MIN_LENGTH_PX):
    """grid_sample grid mapping each canvas pixel into template coordinates; a, b are (P, 2)."""
    h, w = canvas_hw
    m = segment_transform(a, b, canvas_hw, template_shape[0], min_length_px)
    lin, off = m[..., :2], m[..., 2]
    xs = (torch.arange(w, dtype=a.dtype, device=a.device) + 0.5) / w
    ys = (torch.arange(h, dtype=a.dtype, device=a.device) + 0.5) / h
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pix = torch.stack([gx, gy], -1)  # H, W, 2
    rel = pix[None] - off[:, None, None, :]
    inv = torch.linalg.inv(lin)  # P, 2, 2
    return torch.einsum("pij,phwj->phwi", inv, rel)


def draw_segments(a: torch.Tensor, b: torch.Tensor, weight: torch.Tensor, canvas_hw=(128, 128), template=None) -> torch.Tensor:
    """Batched drawing: ``(P, 2)`` endpoints and ``(P,)`` weights -> ``(P, H, W)`` images."""
    template = make_template(dtype=a.dtype).to(a.device) if template is None else template
    grid = _inverse_grid(a, b, canvas_hw, tuple(template.shape))
    tpl = template[None, None].expand(len(a), 1, *template.shape)
    drawn = F.grid_sample(tpl, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[:, 0]
    return drawn * weight[:, None, None]


def draw_segment(a, b, weight, canvas_size=128) -> torch.Tensor:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    weight = torch.as_tensor(weight, dtype=a.dtype)
    hw = (canvas_size, canvas_size) if isinstance(canvas_size, int) else tuple(canvas_size)
    return draw_segments(a[None], b[None], weight.reshape(1), hw)[0]


def render_coarse(nodes: torch.Tensor, adjacency: torch.Tensor, canvas_size=128) -> torch.Tensor:
    """Composite every unordered pair by complement product: ``1 - prod(1 - s_ij * T_ij)``.

    ``nodes`` is ``(B, N, 2)`` and ``adjacency`` ``(B, N, N)``; returns ``(B, 1, H, W)``.
    """
    hw = (canvas_size, canvas_size) if isinstance(canvas_size, int) else tuple(canvas_size)
    bsz, n, _ = nodes.shape
    if n < 2:
        return nodes.new_zeros(bsz, 1, *hw)
    iu, ju = pair_indices(n, nodes.device)
    a = nodes[:, iu].reshape(-1, 2)
    b = nodes[:, ju].reshape(-1, 2)
    wts = adjacency[:, iu, ju].reshape(-1)
    drawn = draw_segments(a, b, wts, hw).view(bsz, len(iu), *hw)
    return 1 - torch.prod(1 - drawn, dim=1, keepdim=True)


def render_graph(graph, canvas_size=128, dtype=torch.float64) -> torch.Tensor:
    """Convenience wrapper for a RoadGraph; returns ``(H, W)``."""
    nodes = torch.as_tensor(graph.nodes, dtype=dtype)[None]
    adj = torch.as_tensor(graph.adjacency, dtype=dtype)[None]
    return render_coarse(nodes, adj, canvas_size)[0, 0]


class Refiner(nn.Module):
    """Residual correction: ``clamp(coarse + net(coarse), 0, 1)``; starts as the identity."""

    def __init__(self, width: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, coarse: torch.Tensor) -> torch.Tensor:
        return (coarse + self.net(coarse)).clamp(0, 1)


class GraphDecoder(nn.Module):
    def __init__(self, image_size: int = 128, width: int = 8):
        super().__init__()
        self.image_size = image_size
        self.refiner = Refiner(width)

    def refine(self, coarse: torch.Tensor) -> torch.Tensor:
        if coarse.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"refiner expects {self.image_size}x{self.image_size}, got {tuple(coarse.shape[-2:])}")
        return self.refiner(coarse)

    def forward(self, nodes: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return self.refine(render_coarse(nodes, adjacency, self.image_size))

    decode = forward
