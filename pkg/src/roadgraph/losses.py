"""Reconstruction and distillation losses."""
from __future__ import annotations

import torch
import torch.nn.functional as F

# standard MS-SSIM scale weights, truncated to the number of scales and renormalized
_SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # separable valid-mode gaussian
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def ssim_components(x: torch.Tensor, y: torch.Tensor, g: torch.Tensor):
    """Per-image mean luminance*contrast*structure and contrast*structure terms."""
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    lum = (2 * mx * my + C1) / (mx * mx + my * my + C1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def ms_ssim(x: torch.Tensor, y: torch.Tensor, scales: int = 3, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Multi-scale SSIM per image for ``(B, C, H, W)`` inputs in [0, 1]."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    min_side = window * 2 ** (scales - 1)
    if min(x.shape[-2:]) < min_side:
        raise ValueError(f"images must be at least {min_side}px for {scales} scales with an {window}px window")
    w = torch.tensor(_SCALE_WEIGHTS[:scales], dtype=x.dtype, device=x.device)
    w = w / w.sum()
    g = gaussian_window(window, sigma, x.dtype).to(x.device)
    factors = []
    for k in range(scales):
        ssim, cs = ssim_components(x, y, g)
        last = k == scales - 1
        factors.append((ssim if last else cs).clamp(min=1e-8) ** w[k])
        if not last:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return torch.stack(factors, 0).prod(0)


def ms_ssim_loss(pred: torch.Tensor, target: torch.Tensor, scales: int = 3, reduction: str = "mean") -> torch.Tensor:
    """``1 - MS-SSIM``; accepts ``(H, W)``, ``(B, H, W)`` or ``(B, C, H, W)``."""
    while pred.dim() < 4:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if pred.dim() == 4 and target.dim() == 4 and pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = 1 - ms_ssim(pred, target, scales)
    return loss.mean() if reduction == "mean" else loss


def distill_target(teacher_maps: torch.Tensor, used: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pixel max over teacher channels, each rescaled to peak 1; unused channels masked out."""
    t = teacher_maps.detach()
    t = t / t.amax(dim=(-2, -1), keepdim=True).clamp_min(1e-12)
    if used is not None:
        t = t * used[..., None, None].to(t.dtype)
    return t.amax(dim=1, keepdim=True)


def student_distill_loss(student_map: torch.Tensor, teacher_maps: torch.Tensor, used: torch.Tensor | None = None) -> torch.Tensor:
    target = distill_target(teacher_maps, used)
    # no clamp: clamping saturated outputs zeroes their gradient and the student cannot recover;
    # binary_cross_entropy already bounds the log terms
    return F.binary_cross_entropy(student_map, target)
