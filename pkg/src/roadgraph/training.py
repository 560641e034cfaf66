"""Self-supervised auto-encoder training, the fully-supervised baseline, and the multi-seed protocol."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .dataio import DataError, Dataset, SyntheticConfig, generate_synthetic_sample, mixed_batches
from .decoder import GraphDecoder
from .encoder import EncoderConfig, GraphEncoder, used_channels
from .losses import ms_ssim_loss, student_distill_loss
from .metrics import aggregate_matches, classify_topology, match_graphs, node_stats, topology_accuracy
from .seeding import stream, torch_seed

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    adam_beta1: float = 0.6
    adam_beta2: float = 0.9
    batch_size: int = 32
    iterations: int = 12000
    proportion_synthetic: float = 0.75
    k: int = 6
    image_size: int = 128
    seed: int = 0
    eval_interval: int = 500
    eval_samples: int = 64
    distill_weight: float = 1.0
    # the student only sees a sparse distillation target; it trains at this multiple of learning_rate
    student_lr_scale: float = 4.0
    # inference uses a moving average of the student weights with this decay per iteration
    student_ema_decay: float = 0.99
    # zero margin around reconstruction and target so the valid-window loss also sees the border band
    recon_pad_px: int = 16
    # iterations per "epoch" when there is no real split to count passes over
    synthetic_epoch: int = 250
    # baseline only
    warmup_epochs: int = 2
    target_sigma_px: float = 2.0
    keep_checkpoints: int = 3

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "iterations", "k", "image_size", "eval_interval", "synthetic_epoch"):
            if getattr(self, name) <= 0 and not (name == "learning_rate" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.student_lr_scale < 0:
            raise ValueError("student_lr_scale must be >= 0")
        if not 0.0 <= self.student_ema_decay < 1.0:
            raise ValueError("student_ema_decay must lie in [0, 1)")
        if self.recon_pad_px < 0:
            raise ValueError("recon_pad_px must be >= 0")
        if not 0.0 <= self.proportion_synthetic <= 1.0:
            raise ValueError("proportion_synthetic must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PAPER_PROFILE = TrainConfig()
DESK_PROFILE = TrainConfig(batch_size=16, iterations=2000, proportion_synthetic=1.0, eval_interval=250)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def make_config(values: dict, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Build a TrainConfig from string or typed values, coercing to the field types."""
    kinds = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(base)}
    typed = {}
    for key, value in values.items():
        if key not in kinds:
            raise ValueError(f"unknown config key {key!r}")
        typed[key] = kinds[key](value)
    return dataclasses.replace(base, **typed)


def load_config(path, base: TrainConfig = TrainConfig()) -> TrainConfig:
    return make_config(parse_config_text(Path(path).read_text()), base)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# --------------------------------------------------------------------------- model


class AutoEncoder(nn.Module):
    def __init__(self, k: int = 6, image_size: int = 128):
        super().__init__()
        self.encoder = GraphEncoder(EncoderConfig(k=k, image_size=image_size))
        self.decoder = GraphDecoder(image_size)
        self.iteration = 0

    def forward(self, images: torch.Tensor):
        maps, nodes, adj = self.encoder.teacher_graph(images)
        recon = self.decoder(nodes, adj)
        return maps, nodes, adj, recon


def autoencoder_loss(model: AutoEncoder, images: torch.Tensor, distill_weight: float = 1.0, pad: int = 16):
    maps, nodes, adj, recon = model(images)
    rec = ms_ssim_loss(F.pad(recon, (pad,) * 4), F.pad(images, (pad,) * 4))
    student = model.encoder.student_attend(images)
    distill = student_distill_loss(student, maps, used_channels(adj.detach()))
    return rec + distill_weight * distill, {"reconstruction": rec.item(), "distill": distill.item()}


def make_optimizer(params, cfg: TrainConfig, student_params=()):
    groups = [{"params": list(params)}]
    student_params = list(student_params)
    if student_params:
        groups.append({"params": student_params, "lr": cfg.learning_rate * cfg.student_lr_scale})
    return torch.optim.Adam(groups, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


def deterministic_torch(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------- evaluation


def synthetic_eval_set(n: int, seed: int = 12345, cfg: SyntheticConfig = SyntheticConfig()):
    """Held-out synthetic samples from a stream never used for training."""
    return [generate_synthetic_sample(stream(seed, "held-out", k), cfg) for k in range(n)]


def predict_graphs(encoder: GraphEncoder, images, mode: str = "student", batch: int = 32):
    out = []
    encoder.eval()
    with torch.no_grad():
        for s in range(0, len(images), batch):
            x = torch.as_tensor(np.stack(images[s : s + batch]), dtype=torch.float32)[:, None]
            if mode == "student":
                out.extend(encoder.student_graphs(x))
            else:
                from .graph import RoadGraph

                _, nodes, adj = encoder.teacher_graph(x)
                out.extend(RoadGraph(n.double().clamp(0, 1).numpy(), a.double().numpy()) for n, a in zip(nodes, adj))
    encoder.train()
    return out


def evaluate_synthetic(encoder: GraphEncoder, samples, mode: str = "student") -> dict:
    graphs = predict_graphs(encoder, [img for img, _ in samples], mode)
    matches = [match_graphs(p, g) for p, (_, g) in zip(graphs, samples)]
    agg = aggregate_matches(matches)
    preds = [classify_topology(p) for p in graphs]
    gts = [classify_topology(g) for _, g in samples]
    return {
        "triplet_precision": agg.precision,
        "triplet_recall": agg.recall,
        "triplet_f1": agg.f1,
        "synthetic_topology_accuracy": topology_accuracy(preds, gts),
        "synthetic_avg_nodes": node_stats(graphs).avg_nodes,
    }


def evaluate_real(encoder: GraphEncoder, data: Dataset) -> dict:
    graphs = predict_graphs(encoder, [s.image for s in data.items])
    out = node_stats(graphs).as_dict()
    labelled = [(classify_topology(g), s.label) for g, s in zip(graphs, data.items) if s.label is not None]
    if labelled:
        out["topology_accuracy"] = topology_accuracy([p for p, _ in labelled], [g for _, g in labelled])
    return out


# --------------------------------------------------------------------------- run bookkeeping


@dataclass
class RunRecord:
    """Metric values per seed per evaluation; aggregates use the last three evaluations of every seed."""

    runs: dict[int, list[dict]] = field(default_factory=dict)
    last: int = 3

    def add(self, seed: int, entry: dict) -> None:
        self.runs.setdefault(seed, []).append(entry)

    def aggregate(self) -> dict[str, dict[str, float]]:
        """Mean and population standard deviation (ddof=0) per metric."""
        pooled: dict[str, list[float]] = {}
        for entries in self.runs.values():
            for e in entries[-self.last :]:
                for k, v in e.get("metrics", {}).items():
                    if isinstance(v, (int, float)) and math.isfinite(v):
                        pooled.setdefault(k, []).append(float(v))
        return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in pooled.items()}

    def to_json(self) -> dict:
        return {"runs": {str(k): v for k, v in self.runs.items()}, "aggregate": self.aggregate()}


def save_checkpoint(model: AutoEncoder, path, cfg: TrainConfig, iteration: int, extra: dict | None = None) -> Path:
    from .checkpoint import save

    return save(model, path, cfg, iteration, extra)


# --------------------------------------------------------------------------- self-supervised training


def _epoch_of(batch, it: int, cfg: TrainConfig, has_real: bool) -> int:
    return batch.epoch if has_real else it // cfg.synthetic_epoch


def train_autoencoder(
    cfg: TrainConfig,
    real: Dataset | None = None,
    out_dir=None,
    real_eval: Dataset | None = None,
    synth_cfg: SyntheticConfig = SyntheticConfig(),
    on_eval: Callable[[dict], None] | None = None,
) -> tuple[AutoEncoder, RunRecord]:
    """Optimize teacher encoder + decoder on 1 - MS-SSIM, the student on distillation, jointly."""
    deterministic_torch(torch_seed(cfg.seed, "init"))
    model = AutoEncoder(cfg.k, cfg.image_size)
    student = set(map(id, model.encoder.student.parameters()))
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad and id(p) not in student], cfg, model.encoder.student.parameters())
    rng = stream(cfg.seed, "batches")
    has_real = real is not None and len(real) > 0 and cfg.proportion_synthetic < 1
    if cfg.proportion_synthetic < 1 and not has_real:
        raise DataError(f"proportion_synthetic={cfg.proportion_synthetic} needs a non-empty real dataset")
    batches = mixed_batches(real if has_real else None, lambda r: generate_synthetic_sample(r, synth_cfg),
                            cfg.proportion_synthetic if has_real else 1.0, cfg.batch_size, rng)
    held_out = synthetic_eval_set(cfg.eval_samples, cfg=synth_cfg)
    record = RunRecord()
    out_dir = Path(out_dir) if out_dir else None
    metrics_log = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_log = open(out_dir / "metrics.jsonl", "w")
    t0 = time.time()
    running = []
    try:
        for it in range(1, cfg.iterations + 1):
            batch = next(batches)
            images = torch.from_numpy(batch.images)[:, None]
            loss, parts = autoencoder_loss(model, images, cfg.distill_weight, cfg.recon_pad_px)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.encoder.update_student_ema(cfg.student_ema_decay)
            model.iteration = it
            running.append(loss.item())
            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                metrics = evaluate_synthetic(model.encoder, held_out)
                if real_eval is not None and len(real_eval):
                    metrics.update(evaluate_real(model.encoder, real_eval))
                entry = {"iteration": it, "epoch": _epoch_of(batch, it, cfg, has_real), "loss": float(np.mean(running)),
                         **{f"loss_{k}": v for k, v in parts.items()}, "metrics": metrics, "elapsed_s": time.time() - t0}
                running = []
                record.add(cfg.seed, entry)
                log.info("it %d loss %.4f f1 %.3f", it, entry["loss"], metrics["triplet_f1"])
                if metrics_log:
                    metrics_log.write(json.dumps(entry) + "\n")
                    metrics_log.flush()
                if out_dir:
                    save_checkpoint(model, out_dir / f"ckpt_{it:06d}", cfg, it, {"metrics": metrics})
                    _prune_checkpoints(out_dir, cfg.keep_checkpoints)
                if on_eval:
                    on_eval(entry)
    finally:
        if metrics_log:
            metrics_log.close()
    return model, record


def _prune_checkpoints(out_dir: Path, keep: int) -> None:
    ckpts = sorted(out_dir.glob("ckpt_*.pt"))
    for old in ckpts[:-keep]:
        old.unlink()
        side = old.with_suffix(".json")
        if side.exists():
            side.unlink()


# --------------------------------------------------------------------------- fully-supervised baseline


def gaussian_targets(points: torch.Tensor, hw, sigma_px: float) -> torch.Tensor:
    """``(M, 2)`` normalized points -> ``(M, H, W)`` unit-peak Gaussians."""
    h, w = hw
    ys = torch.arange(h, dtype=points.dtype) + 0.5
    xs = torch.arange(w, dtype=points.dtype) + 0.5
    px, py = points[:, 0] * w, points[:, 1] * h
    gx = torch.exp(-((xs[None] - px[:, None]) ** 2) / (2 * sigma_px**2))
    gy = torch.exp(-((ys[None] - py[:, None]) ** 2) / (2 * sigma_px**2))
    return gy[:, :, None] * gx[:, None, :]


def assign_channels(channel_xy: np.ndarray, gt_xy: np.ndarray) -> np.ndarray:
    """Min-cost matching of GT joints to teacher channels; returns the channel of each GT joint."""
    if len(gt_xy) > len(channel_xy):
        raise ValueError("more ground-truth joints than teacher channels")
    cost = np.linalg.norm(gt_xy[:, None] - channel_xy[None], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(gt_xy), dtype=int)
    out[rows] = cols
    return out


def supervised_loss(model: AutoEncoder, images: torch.Tensor, graphs, cfg: TrainConfig, with_adjacency: bool):
    enc = model.encoder
    logits = enc.teacher(images)
    from .encoder import relation_scores, soft_argmax, spatial_softmax

    maps = spatial_softmax(logits)
    nodes = soft_argmax(maps)
    b, k, h, w = logits.shape
    target = torch.zeros_like(logits)
    adj_target = torch.zeros(b, k, k)
    for n, g in enumerate(graphs):
        vis = g.drop_isolated()
        if vis.num_nodes == 0:
            continue
        chans = assign_channels(nodes[n].detach().numpy().astype(np.float64), vis.nodes)
        target[n, chans] = gaussian_targets(torch.as_tensor(vis.nodes, dtype=logits.dtype), (h, w), cfg.target_sigma_px)
        a = torch.as_tensor((vis.adjacency >= 0.5).astype(np.float32))
        adj_target[n][np.ix_(chans, chans)] = a
    node_loss = F.binary_cross_entropy_with_logits(logits, target)
    student = enc.student_attend(images)
    adj = relation_scores(images, nodes, enc.relation) if with_adjacency else None
    used = used_channels(adj.detach()) if adj is not None else (target.amax(dim=(-2, -1)) > 0)
    distill = student_distill_loss(student, maps, used)
    total = node_loss + cfg.distill_weight * distill
    parts = {"node": node_loss.item(), "distill": distill.item()}
    if with_adjacency:
        iu, ju = torch.triu_indices(k, k, 1)
        adj_loss = F.binary_cross_entropy(adj[:, iu, ju].clamp(1e-6, 1 - 1e-6), adj_target[:, iu, ju])
        total = total + adj_loss
        parts["adjacency"] = adj_loss.item()
    return total, parts


def train_supervised_baseline(
    cfg: TrainConfig,
    synth_only: Dataset | None = None,
    out_dir=None,
    real_eval: Dataset | None = None,
    synth_cfg: SyntheticConfig = SyntheticConfig(),
    on_eval: Callable[[dict], None] | None = None,
) -> tuple[AutoEncoder, RunRecord]:
    """Encoder trained directly on ground-truth graphs; adjacency loss only after the warm-up epochs.

    Only synthetic data can be used: real layouts carry no graph ground truth.
    """
    if synth_only is not None and (synth_only.source != "synthetic" or any(s.graph is None for s in synth_only.items)):
        raise DataError("the supervised baseline needs ground-truth graphs; real-world data has none")
    deterministic_torch(torch_seed(cfg.seed, "init"))
    model = AutoEncoder(cfg.k, cfg.image_size)
    opt = make_optimizer([p for p in model.encoder.parameters() if p.requires_grad], cfg)
    rng = stream(cfg.seed, "batches")
    if synth_only is not None and len(synth_only):
        batches = mixed_batches(synth_only, None, 0.0, cfg.batch_size, rng)
        epoch_of = lambda batch, it: batch.epoch  # noqa: E731
    else:
        batches = mixed_batches(None, lambda r: generate_synthetic_sample(r, synth_cfg), 1.0, cfg.batch_size, rng)
        epoch_of = lambda batch, it: it // cfg.synthetic_epoch  # noqa: E731
    held_out = synthetic_eval_set(cfg.eval_samples, cfg=synth_cfg)
    record = RunRecord()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    running = []
    for it in range(1, cfg.iterations + 1):
        batch = next(batches)
        images = torch.from_numpy(batch.images)[:, None]
        epoch = epoch_of(batch, it - 1)
        loss, parts = supervised_loss(model, images, batch.graphs, cfg, with_adjacency=epoch >= cfg.warmup_epochs)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.encoder.update_student_ema(cfg.student_ema_decay)
        model.iteration = it
        running.append(loss.item())
        if it % cfg.eval_interval == 0 or it == cfg.iterations:
            metrics = evaluate_synthetic(model.encoder, held_out)
            if real_eval is not None and len(real_eval):
                metrics.update(evaluate_real(model.encoder, real_eval))
            entry = {"iteration": it, "epoch": epoch, "loss": float(np.mean(running)), "metrics": metrics,
                     "elapsed_s": time.time() - t0, **{f"loss_{k}": v for k, v in parts.items()}}
            running = []
            record.add(cfg.seed, entry)
            if out_dir:
                with open(out_dir / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(entry) + "\n")
                save_checkpoint(model, out_dir / f"ckpt_{it:06d}", cfg, it, {"metrics": metrics, "baseline": True})
                _prune_checkpoints(out_dir, cfg.keep_checkpoints)
            if on_eval:
                on_eval(entry)
    return model, record


# --------------------------------------------------------------------------- multi-seed protocol


def multi_seed_protocol(cfg: TrainConfig, n_seeds: int = 5, trainer=train_autoencoder, out_dir=None, **kw) -> RunRecord:
    """Train with seeds ``cfg.seed + 0 .. n_seeds - 1`` and pool the last three evaluations of each."""
    record = RunRecord()
    for s in range(n_seeds):
        run_cfg = dataclasses.replace(cfg, seed=cfg.seed + s)
        sub = Path(out_dir) / f"seed_{run_cfg.seed}" if out_dir else None
        _, rec = trainer(run_cfg, out_dir=sub, **kw)
        for seed, entries in rec.runs.items():
            for e in entries:
                record.add(seed, e)
    return record
