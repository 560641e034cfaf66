"""Acceptance criteria, one test per criterion, each printing a single PASS/FAIL line.

The desk-trained model behind criteria 1, 2 and 7b takes close to an hour on one CPU core. It is
trained once and cached under $ROADGRAPH_CACHE/acceptance, keyed by the desk config and a hash of the
model and training sources. Set ROADGRAPH_RETRAIN=1 to ignore the cache.
"""
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import roadgraph
from roadgraph import checkpoint
from roadgraph.cli import cache_dir
from roadgraph.dataio import SyntheticConfig, export_synthetic, rasterize, sample_star_graph, thin
from roadgraph.decoder import GraphDecoder, draw_segment, render_coarse
from roadgraph.encoder import pairwise_roi, soft_argmax
from roadgraph.graph import TopologyLabel, graph_close
from roadgraph.largescale import make_composite, merge, parse_large, quadrant_topologies, tile, with_origins
from roadgraph.losses import ms_ssim_loss
from roadgraph.metrics import classify_topology, match_triplets, node_stats
from roadgraph.seeding import stream
from roadgraph.training import DESK_PROFILE, TrainConfig, evaluate_synthetic, synthetic_eval_set, train_autoencoder

from gradcheck import fd_probe_errors, nondegenerate_probes
from test_metrics import CANONICAL, brute_force_matching, random_triplets

D = torch.float64
HELD_OUT = 200
DESK_BUDGET_S = 2 * 3600


def report(name: str, ok: bool, detail: str) -> None:
    print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")


# --------------------------------------------------------------------------- desk model (criteria 1, 2, 7b)


def _source_hash() -> str:
    src = Path(roadgraph.__file__).parent
    h = hashlib.sha256()
    for name in ("encoder.py", "decoder.py", "losses.py", "training.py", "dataio.py", "graph.py", "seeding.py"):
        h.update((src / name).read_bytes())
    h.update(json.dumps(DESK_PROFILE.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="module")
def desk():
    """(model, training seconds) for one seed of the desk profile, trained on synthetic data only."""
    root = cache_dir() / "acceptance" / f"desk-{_source_hash()}"
    ckpt = root / "final"
    if ckpt.with_suffix(".pt").exists() and not os.environ.get("ROADGRAPH_RETRAIN"):
        model, _ = checkpoint.load(ckpt)
        return model, checkpoint.read_meta(ckpt)["train_seconds"]
    t0 = time.process_time()
    model, _ = train_autoencoder(DESK_PROFILE, out_dir=root / "run")
    seconds = time.process_time() - t0
    checkpoint.save(model, ckpt, DESK_PROFILE, model.iteration, {"train_seconds": seconds})
    return model, seconds


@pytest.fixture(scope="module")
def desk_metrics(desk):
    model, _ = desk
    return evaluate_synthetic(model.encoder, synthetic_eval_set(HELD_OUT))


def test_c1_desk_triplet_f1(desk, desk_metrics):
    _, seconds = desk
    f1 = desk_metrics["triplet_f1"]
    ok = f1 >= 0.80 and seconds <= DESK_BUDGET_S
    report("C1 desk triplet F1", ok, f"F1 {f1:.3f} (>= 0.80) at tol 8/128 on {HELD_OUT} held-out, "
           f"training {seconds / 60:.1f} CPU-min (<= 120)")
    assert ok


def test_c2_desk_topology_accuracy(desk_metrics):
    acc = desk_metrics["synthetic_topology_accuracy"]
    ok = acc >= 0.90
    report("C2 desk topology accuracy", ok, f"{acc:.3f} (>= 0.90) on {HELD_OUT} held-out, analytic labels")
    assert ok


# --------------------------------------------------------------------------- C3 gradients


def _random_graph(rng, n=4):
    nodes = torch.as_tensor(rng.uniform(0.1, 0.9, (1, n, 2)), dtype=D)
    a = np.triu(rng.uniform(0.2, 0.9, (n, n)), 1)
    return nodes, torch.as_tensor(a + a.T, dtype=D)[None]


def _sym(x):
    u = torch.triu(x, 1)
    return u + u.transpose(1, 2)


def test_c3_gradients_match_finite_differences():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    errs: dict[str, list[float]] = {}

    m = torch.as_tensor(rng.random((24, 24)) + 0.01, dtype=D)
    w2 = torch.tensor([0.7, -1.3], dtype=D)
    errs["soft_argmax"] = list(fd_probe_errors(lambda x: (soft_argmax(x / x.sum()) * w2).sum(), m,
                                               rng.choice(m.numel(), 10, replace=False), h=1e-6))

    # coordinate probes go through bilinear sampling; probes on a sampling kink are redrawn
    yy, xx = np.mgrid[0:128, 0:128] / 128
    img = torch.as_tensor(sum(np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.01) for cx, cy in rng.random((6, 2))), dtype=D)[None, None]
    roi_w = torch.as_tensor(rng.random((8, 32)), dtype=D)
    errs["pairwise_roi"] = []
    while len(errs["pairwise_roi"]) < 10:
        ab = torch.as_tensor(rng.uniform(0.2, 0.8, (2, 2)), dtype=D)
        fn = lambda p: (pairwise_roi(img, p[:1], p[1:])[0, 0] * roi_w).sum()
        errs["pairwise_roi"] += list(fd_probe_errors(fn, ab, nondegenerate_probes(fn, ab, rng.permutation(4), 1)))

    errs["draw_segment"] = []
    while len(errs["draw_segment"]) < 10:
        a, b = torch.as_tensor(rng.uniform(0.15, 0.85, (2, 2)), dtype=D)
        w = float(rng.uniform(0.3, 1))
        fn = lambda a: draw_segment(a, b, w).sum()
        errs["draw_segment"] += list(fd_probe_errors(fn, a, nondegenerate_probes(fn, a, rng.permutation(2), 1)))

    # 6 node-coordinate probes + 4 adjacency probes each
    nodes, adj = _random_graph(rng)
    pix_w = torch.as_tensor(rng.random((128, 128)), dtype=D)
    fn = lambda n: (render_coarse(n, adj)[0, 0] * pix_w).sum()
    errs["render_coarse"] = list(fd_probe_errors(fn, nodes, nondegenerate_probes(fn, nodes, rng.permutation(8), 6)))
    errs["render_coarse"] += list(fd_probe_errors(lambda x: (render_coarse(nodes, _sym(x))[0, 0] * pix_w).sum(), adj, [1, 2, 7, 11]))

    torch.manual_seed(0)
    dec = GraphDecoder().double()
    torch.nn.init.normal_(dec.refiner.net[-1].weight, std=0.05)
    target = torch.as_tensor(rng.random((1, 1, 128, 128)) > 0.9, dtype=D)
    fn = lambda n: ms_ssim_loss(dec(n, adj), target)
    errs["decode"] = list(fd_probe_errors(fn, nodes, nondegenerate_probes(fn, nodes, rng.permutation(8), 6)))
    errs["decode"] += list(fd_probe_errors(lambda x: ms_ssim_loss(dec(nodes, _sym(x)), target), adj, [1, 2, 7, 11]))

    elapsed = time.time() - t0
    limit = {"soft_argmax": 1e-3}
    ok = all(len(e) == 10 and max(e) <= limit.get(k, 1e-2) for k, e in errs.items()) and elapsed < 60
    report("C3 gradient check", ok, ", ".join(f"{k} {max(e):.1e} ({len(e)} probes)" for k, e in errs.items())
           + f" in {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- C4 MS-SSIM


def test_c4_ms_ssim_identity_and_symmetry():
    rng = np.random.default_rng(4)
    self_loss, asym = 0.0, 0.0
    for k in range(20):
        x = torch.as_tensor(rng.random((1, 1, 128, 128)), dtype=D)
        if k % 2:
            x = (x > 0.8).to(D)
        y = torch.as_tensor(rng.random((1, 1, 128, 128)) > 0.7, dtype=D)
        self_loss = max(self_loss, abs(ms_ssim_loss(x, x.clone()).item()))
        asym = max(asym, abs(ms_ssim_loss(x, y).item() - ms_ssim_loss(y, x).item()))
    ok = self_loss <= 1e-6 and asym <= 1e-9
    report("C4 MS-SSIM", ok, f"max self-loss {self_loss:.1e} (<= 1e-6), max asymmetry {asym:.1e} (<= 1e-9) over 20 images")
    assert ok


# --------------------------------------------------------------------------- C5 matching and classification


def test_c5_matching_and_canonical_topologies():
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        gt = random_triplets(rng, int(rng.integers(0, 6)))
        pred = random_triplets(rng, min(len(gt), int(rng.integers(0, 6))), jitter_from=gt) if gt and seed % 2 else []
        pred += random_triplets(rng, int(rng.integers(0, 6 - len(pred) + 1)))
        mismatches += match_triplets(pred, gt, 0.06).matched != brute_force_matching(pred, gt, 0.06)
    wrong = [lab.name for lab in TopologyLabel if classify_topology(CANONICAL[lab]) is not lab]
    ok = mismatches == 0 and not wrong and len(CANONICAL) == 9
    report("C5 matching and topology", ok, f"{100 - mismatches}/100 matchings equal brute force, "
           f"{9 - len(wrong)}/9 canonical graphs classified correctly")
    assert ok


# --------------------------------------------------------------------------- C6 node stats


def test_c6_node_stats_ratios():
    # integer node counts whose means are the tabulated averages
    cases = {4.2: ([4, 4, 4, 4, 5], 11.0), 4.4: ([4, 4, 4, 5, 5], 16.3), 6.6: ([6, 6, 7, 7, 7], 74.4), 3.6: ([3, 3, 4, 4, 4], -4.9)}
    got = {avg: node_stats(counts, 3.784).exceeding_ratio * 100 for avg, (counts, _) in cases.items()}
    ok = all(abs(got[a] - pct) <= 0.05 for a, (_, pct) in cases.items())
    report("C6 node stats", ok, ", ".join(f"{a}->{got[a]:.2f}% (want {pct})" for a, (_, pct) in cases.items()))
    assert ok


# --------------------------------------------------------------------------- C7 large scale


def test_c7a_oracle_tiles_merge_to_global_graph():
    n, good = 20, 0
    for k in range(n):
        c = make_composite(stream(7, "acceptance-composite", k))
        merged = merge(with_origins(c.tile_graphs, tile(c.image, 128)))
        good += graph_close(merged, c.graph, 4 / 256)
    ok = good == n
    report("C7a oracle merge", ok, f"{good}/{n} merged composites graph_close to the global graph at 4 px")
    assert ok


def test_c7b_trained_encoder_preserves_quadrant_topology(desk):
    model, _ = desk
    n, whole, quads = 20, 0, 0
    for k in range(n):
        c = make_composite(stream(7, "acceptance-composite", k))
        merged = parse_large(c.image, model.encoder, tile_size=128, mode="student")
        pred = quadrant_topologies(merged, c.image.shape, 128)
        want = quadrant_topologies(c.graph, c.image.shape, 128)
        hits = sum(p == w for p, w in zip(pred, want))
        quads += hits
        whole += hits == 4
    ok = whole / n >= 0.75
    report("C7b trained quadrant topology", ok, f"{whole}/{n} composites with all 4 quadrants preserved "
           f"({whole / n:.2f}, >= 0.75); per-quadrant rate {quads / (4 * n):.3f}")
    assert ok


# --------------------------------------------------------------------------- C8 reproducibility


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c8_bitwise_reproducibility(tmp_path):
    export_synthetic(tmp_path / "a", 50, seed=3)
    export_synthetic(tmp_path / "b", 50, seed=3)
    synth_same = _files(tmp_path / "a") == _files(tmp_path / "b") and len(_files(tmp_path / "a")) > 100

    cfg = TrainConfig(batch_size=16, iterations=50, proportion_synthetic=1.0, eval_interval=50, eval_samples=8, seed=1)
    m1, r1 = train_autoencoder(cfg)
    m2, r2 = train_autoencoder(cfg)
    s1, s2 = m1.state_dict(), m2.state_dict()
    weights_same = s1.keys() == s2.keys() and all(torch.equal(s1[k], s2[k]) for k in s1)
    loss_same = [e["loss"] for e in r1.runs[1]] == [e["loss"] for e in r2.runs[1]]
    ok = synth_same and weights_same and loss_same
    report("C8 reproducibility", ok, f"synth-gen identical {synth_same}, 50-iteration weights identical {weights_same}, "
           f"losses identical {loss_same}")
    assert ok


# --------------------------------------------------------------------------- C9 thinning


def _unit_width(skel: np.ndarray) -> bool:
    """No 2x2 block is fully set, so no pixel pair could be dropped without thinning further."""
    s = skel.astype(bool)
    return not (s[:-1, :-1] & s[1:, :-1] & s[:-1, 1:] & s[1:, 1:]).any()


def test_c9_thin_idempotent_and_unit_width():
    cfg = SyntheticConfig()
    bad = 0
    for k in range(100):
        rng = stream(9, "thin", k)
        # thick roads so thinning has real work to do
        img = (rasterize(sample_star_graph(rng, cfg), 128, width=float(rng.uniform(2, 7))) >= 0.5).astype(np.float32)
        once = thin(img)
        bad += not (np.array_equal(thin(once), once) and _unit_width(once) and once.any())
    ok = bad == 0
    report("C9 thin", ok, f"{100 - bad}/100 rasters thin to an idempotent unit-width skeleton")
    assert ok


def test_acceptance_covers_every_criterion():
    names = {n for n in globals() if n.startswith("test_c")}
    assert {n.split("_")[1] for n in names} == {"c1", "c2", "c3", "c4", "c5", "c6", "c7a", "c7b", "c8", "c9"}
