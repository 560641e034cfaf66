"""Parse 2x2 synthetic composites tile by tile and compare against the global graph.

With no checkpoint the tiles use their ground-truth graphs, which isolates the merge step.

    python3 scripts/large_scale_demo.py --checkpoint runs/desk/ckpt_002000 --count 20 --export-dir runs/maps
"""
import argparse
from pathlib import Path

from roadgraph import checkpoint
from roadgraph.graph import graph_close
from roadgraph.largescale import export_map, make_composite, merge, parse_large, quadrant_topologies, save_map, tile, with_origins
from roadgraph.seeding import stream


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint")
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--export-dir")
    args = ap.parse_args()

    encoder = checkpoint.load(args.checkpoint)[0].encoder if args.checkpoint else None
    whole = quads = close = 0
    for k in range(args.count):
        c = make_composite(stream(args.seed, "acceptance-composite", k))
        if encoder is None:
            merged = merge(with_origins(c.tile_graphs, tile(c.image, c.tile_size)))
        else:
            merged = parse_large(c.image, encoder, tile_size=c.tile_size)
        pred = quadrant_topologies(merged, c.image.shape, c.tile_size)
        want = quadrant_topologies(c.graph, c.image.shape, c.tile_size)
        hits = sum(p == w for p, w in zip(pred, want))
        quads += hits
        whole += hits == 4
        close += graph_close(merged, c.graph, 4 / c.image.shape[0])
        print(f"{k:3d}  nodes {merged.num_nodes:2d}/{c.graph.num_nodes:2d}  quadrants {hits}/4  "
              f"{' '.join(p.name for p in pred)}")
        if args.export_dir:
            Path(args.export_dir).mkdir(parents=True, exist_ok=True)
            save_map(export_map(merged, c.image.shape), Path(args.export_dir) / f"composite_{k:03d}.json")
    n = args.count
    print(f"graph_close at 4 px: {close}/{n}; all quadrants preserved: {whole}/{n}; per quadrant {quads / (4 * n):.3f}")


if __name__ == "__main__":
    main()
