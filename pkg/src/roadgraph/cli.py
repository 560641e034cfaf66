"""``roadgraph`` command line: synth-gen, train, train-baseline, infer, eval, ablate, parse-large, export.

Every flag can also be given in a ``key = value`` file passed with ``--config``; flags on the
command line win. Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
CACHE_ENV = "ROADGRAPH_CACHE"

log = logging.getLogger("roadgraph")


class UsageError(Exception):
    pass


def cache_dir() -> Path:
    """Where generated datasets are cached; ``$ROADGRAPH_CACHE`` or ``~/.cache/roadgraph``."""
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "roadgraph"))


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------------------- parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    from .training import TrainConfig

    g = p.add_argument_group("training config (also settable in --config)")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)
    p.add_argument("--profile", choices=["paper", "desk"], default="paper", help="base hyper-parameters")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="key = value file; command-line flags override it")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="roadgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--out", type=Path, default=None, help="defaults to $ROADGRAPH_CACHE/synthetic-<seed>-<count>")

    for name in ("train", "train-baseline"):
        p = sub.add_parser(name, parents=[common], help="train the auto-encoder" if name == "train" else "train the supervised baseline")
        p.add_argument("--dataset", type=Path, help="dataset directory (real data for train, synthetic export for train-baseline)")
        p.add_argument("--eval-dataset", type=Path, help="annotated real split evaluated at every eval interval")
        p.add_argument("--seeds", type=int, default=1)
        p.add_argument("--out", type=Path, required=False, default=Path("runs") / name)
        _train_flags(p)

    p = sub.add_parser("infer", parents=[common], help="parse layout images into graph JSON")
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--image", type=Path, nargs="+", required=False)
    p.add_argument("--out", type=Path, required=False, help="output directory (one <stem>.json per image)")
    p.add_argument("--overlay", action="store_true", help="also write <stem>_overlay.png")
    p.add_argument("--mode", choices=["student", "teacher"], default="student")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--nms-radius", dest="nms_radius", type=float, default=None)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or saved predictions")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="directory of <id>.json graphs")
    p.add_argument("--dataset", type=Path, required=False)
    p.add_argument("--split", default=None)
    p.add_argument("--annotations", type=Path)
    p.add_argument("--out", type=Path, help="report JSON (stdout if omitted)")

    p = sub.add_parser("ablate", parents=[common], help="train over a grid of synthetic proportions")
    p.add_argument("--proportions", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--dataset", type=Path)
    p.add_argument("--eval-dataset", type=Path)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("runs") / "ablate")
    _train_flags(p)

    p = sub.add_parser("parse-large", parents=[common], help="tile, parse and merge a large layout")
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--image", type=Path, required=False)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--tile-size", dest="tile_size", type=int, default=128)
    p.add_argument("--dedup-radius", dest="dedup_radius", type=float, default=6.0)

    p = sub.add_parser("export", parents=[common], help="graph JSON -> OSM-style map document")
    p.add_argument("--graph", type=Path, required=False)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--image-size", dest="image_size", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.add_argument("--meters-per-pixel", dest="meters_per_pixel", type=float, default=None)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, filling anything not given on the command line from ``--config``."""
    from .training import parse_config_text

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        values = parse_config_text(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    # re-parse with config values as defaults so that explicit flags win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    extra = {}
    for key, raw in values.items():
        if key in known and key not in ("help", "config"):
            action = known[key]
            if action.type is not None:
                try:
                    if action.nargs in ("+", "*") or isinstance(action.nargs, int):
                        defaults[key] = [action.type(v) for v in raw.split()]
                    else:
                        defaults[key] = action.type(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}") from exc
            elif isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = raw
        else:
            extra[key] = raw
    if extra:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(extra)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _train_config(args):
    from .training import DESK_PROFILE, PAPER_PROFILE, TrainConfig, make_config

    base = DESK_PROFILE if args.profile == "desk" else PAPER_PROFILE
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig) if getattr(args, f.name, None) is not None}
    values["seed"] = args.seed
    try:
        return make_config(values, base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------- commands


def cmd_synth_gen(args) -> dict:
    from .dataio import export_synthetic

    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = args.out or cache_dir() / f"synthetic-{args.seed}-{args.count}"
    ds = export_synthetic(out, args.count, args.seed, jobs=args.jobs)
    return {"out": str(out), "count": len(ds), "seed": args.seed}


def _load_optional(path, split=None):
    from .dataio import load_dataset

    return load_dataset(path, split) if path else None


def cmd_train(args, baseline: bool = False) -> dict:
    from .training import multi_seed_protocol, train_autoencoder, train_supervised_baseline

    cfg = _train_config(args)
    data = _load_optional(args.dataset)
    if data is not None and "train" in data.splits:
        data = data.split("train")
    real_eval = _load_optional(args.eval_dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    if baseline:
        record = multi_seed_protocol(cfg, args.seeds, train_supervised_baseline, args.out, synth_only=data, real_eval=real_eval)
    else:
        record = multi_seed_protocol(cfg, args.seeds, train_autoencoder, args.out, real=data, real_eval=real_eval)
    report = {"config": cfg.to_dict(), "seeds": args.seeds, **record.to_json()}
    (args.out / "run_record.json").write_text(json.dumps(report, indent=1))
    return {"out": str(args.out), "aggregate": report["aggregate"]}


def _load_encoder(path):
    from .checkpoint import load
    from .dataio import DataError
    from .encoder import UntrainedModelError

    try:
        model, meta = load(path)
    except (ValueError, KeyError, UntrainedModelError) as exc:
        raise DataError(f"{path}: unusable checkpoint ({exc})") from exc
    return model.encoder, meta


def draw_overlay(image: np.ndarray, graph, threshold: float = 0.5) -> np.ndarray:
    """RGB overlay: layout in grey, predicted segments in white, joints as red dots."""
    from skimage.draw import disk, line

    h, w = image.shape
    rgb = np.repeat((np.asarray(image) * 96).astype(np.uint8)[..., None], 3, axis=-1)
    px = graph.nodes * [w, h] - 0.5
    for i, j in graph.edges(threshold):
        rr, cc = line(*np.round(px[i][::-1]).astype(int), *np.round(px[j][::-1]).astype(int))
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rgb[rr[ok], cc[ok]] = 255
    for x, y in px:
        rr, cc = disk((y, x), 2.5, shape=(h, w))
        rgb[rr, cc] = (255, 0, 0)
    return rgb


def cmd_infer(args) -> dict:
    from PIL import Image

    from .dataio import read_png, thin
    from .encoder import encode

    _require(args, "checkpoint", "image", "out")
    enc, _ = _load_encoder(args.checkpoint)
    if args.threshold is not None:
        enc.cfg.peak_threshold = args.threshold
    if args.nms_radius is not None:
        enc.cfg.nms_radius = args.nms_radius
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in args.image:
        img = thin(read_png(path))
        if img.shape != (enc.cfg.image_size, enc.cfg.image_size):
            from .dataio import DataError

            raise DataError(f"{path}: image is {img.shape[0]}x{img.shape[1]}, checkpoint expects {enc.cfg.image_size}x{enc.cfg.image_size}")
        graph = encode(img, enc, args.mode)
        target = args.out / f"{path.stem}.json"
        graph.save(target)
        written.append(str(target))
        if args.overlay:
            Image.fromarray(draw_overlay(img, graph)).save(args.out / f"{path.stem}_overlay.png")
    return {"graphs": written}


def cmd_eval(args) -> dict:
    from .dataio import DataError, load_dataset
    from .graph import RoadGraph
    from .metrics import aggregate_matches, classify_topology, confusion_matrix, match_graphs, node_stats, topology_accuracy
    from .training import predict_graphs

    _require(args, "dataset")
    if args.checkpoint is None and args.predictions is None:
        raise UsageError("eval: give --checkpoint or --predictions")
    data = load_dataset(args.dataset, args.split, args.annotations)
    has_graphs = any(s.graph is not None for s in data.items)
    has_labels = any(s.label is not None for s in data.items)
    if not (has_graphs or has_labels):
        raise DataError(f"{args.dataset}: neither ground-truth graphs nor topology labels present")
    resolved = {"dataset": str(args.dataset), "split": args.split, "annotations": str(args.annotations) if args.annotations else None}
    if args.checkpoint is not None:
        enc, meta = _load_encoder(args.checkpoint)
        preds = predict_graphs(enc, [s.image for s in data.items])
        resolved.update(checkpoint=str(args.checkpoint), model_config=meta.get("config"),
                        peak_threshold=enc.cfg.peak_threshold, nms_radius=enc.cfg.nms_radius)
    else:
        preds = []
        for s in data.items:
            p = args.predictions / f"{s.id}.json"
            if not p.exists():
                raise DataError(f"{p}: missing prediction for {s.id}")
            preds.append(RoadGraph.load(p))
        resolved["predictions"] = str(args.predictions)
    report: dict = {"config": resolved, "n": len(data), **node_stats(preds).as_dict()}
    if has_graphs:
        pairs = [(p, s.graph) for p, s in zip(preds, data.items) if s.graph is not None]
        agg = aggregate_matches([match_graphs(p, g) for p, g in pairs])
        report.update(triplet_precision=agg.precision, triplet_recall=agg.recall, triplet_f1=agg.f1)
    labelled = [(classify_topology(p), s.label) for p, s in zip(preds, data.items) if s.label is not None]
    if labelled:
        pl, gl = [int(a) for a, _ in labelled], [int(b) for _, b in labelled]
        report["topology_accuracy"] = topology_accuracy(pl, gl)
        report["confusion_matrix"] = confusion_matrix(pl, gl).tolist()
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(report, indent=1))
    return report


def ablation_table(records: dict[float, dict]) -> list[dict]:
    """One row per synthetic proportion with mean and std of the ablation columns."""
    from .metrics import REFERENCE_NODES

    rows = []
    for prop in sorted(records):
        agg = records[prop]
        row = {"proportion_synthetic": prop}
        for key in ("triplet_f1", "topology_accuracy", "avg_nodes"):
            if key in agg:
                row[key] = {"mean": agg[key]["mean"], "std": agg[key]["std"]}
        if "avg_nodes" in agg:
            row["exceeding_ratio"] = agg["avg_nodes"]["mean"] / REFERENCE_NODES - 1
        rows.append(row)
    return rows


def cmd_ablate(args) -> dict:
    from .training import multi_seed_protocol, train_autoencoder

    cfg = _train_config(args)
    real = _load_optional(args.dataset)
    if real is not None and "train" in real.splits:
        real = real.split("train")
    real_eval = _load_optional(args.eval_dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    records = {}
    for prop in args.proportions:
        run_cfg = dataclasses.replace(cfg, proportion_synthetic=prop)
        rec = multi_seed_protocol(run_cfg, args.seeds, train_autoencoder, args.out / f"p{prop:g}", real=real, real_eval=real_eval)
        records[prop] = rec.aggregate()
    report = {"config": cfg.to_dict(), "seeds": args.seeds, "proportions": args.proportions, "rows": ablation_table(records)}
    (args.out / "ablation.json").write_text(json.dumps(report, indent=1))
    return report


def cmd_parse_large(args) -> dict:
    from .dataio import read_png
    from .largescale import parse_large

    _require(args, "checkpoint", "image", "out")
    enc, _ = _load_encoder(args.checkpoint)
    img = read_png(args.image)
    try:
        graph = parse_large(img, enc, args.tile_size, dedup_radius=args.dedup_radius, jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    doc = graph.to_json()
    doc["image_shape"] = list(img.shape)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(doc))
    return {"out": str(args.out), "nodes": graph.num_nodes, "edges": len(graph.edges())}


def cmd_export(args) -> dict:
    from .dataio import DEFAULT_METERS_PER_PIXEL
    from .graph import RoadGraph
    from .largescale import export_map, save_map

    _require(args, "graph", "out")
    doc = json.loads(args.graph.read_text())
    shape = args.image_size or doc.get("image_shape")
    if shape is None:
        raise UsageError("export: --image-size H W is required when the graph JSON does not record its image shape")
    mpp = args.meters_per_pixel or DEFAULT_METERS_PER_PIXEL
    out = export_map(RoadGraph.from_json(doc), shape, mpp)
    save_map(out, args.out)
    return {"out": str(args.out), "nodes": len(out["nodes"]), "ways": len(out["ways"])}


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "train-baseline": lambda a: cmd_train(a, baseline=True),
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "parse-large": cmd_parse_large,
    "export": cmd_export,
}


def main(argv=None) -> int:
    from .dataio import DataError
    from .training import DivergenceError

    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"roadgraph: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"roadgraph: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"roadgraph: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"roadgraph: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
