"""Synthetic-proportion ablation: trains every proportion over several seeds and prints the table.

Proportions below 1 need real road layouts (see ``roadgraph synth-gen`` for the directory format):

    python3 scripts/run_ablation.py --dataset data/real --eval-dataset data/real_test --out runs/ablation
"""
import argparse
import json
import sys
from pathlib import Path

from roadgraph.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dataset")
    ap.add_argument("--eval-dataset")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--proportions", nargs="+", default=["0", "0.25", "0.5", "0.75", "1"])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--profile", default="paper", choices=["paper", "desk"])
    args, extra = ap.parse_known_args()

    argv = ["ablate", "--out", args.out, "--seeds", str(args.seeds), "--profile", args.profile, "--proportions", *args.proportions]
    if args.dataset:
        argv += ["--dataset", args.dataset]
    if args.eval_dataset:
        argv += ["--eval-dataset", args.eval_dataset]
    rc = cli_main(argv + extra)
    if rc:
        sys.exit(rc)
    rows = json.loads((Path(args.out) / "ablation.json").read_text())["rows"]
    print(f"{'prop':>5} {'F1':>13} {'topology':>13} {'avg nodes':>13} {'exceed':>8}")
    for r in rows:
        cell = lambda k: f"{r[k]['mean']:.3f}+-{r[k]['std']:.3f}" if k in r else "-"
        ex = f"{100 * r['exceeding_ratio']:.1f}%" if "exceeding_ratio" in r else "-"
        print(f"{r['proportion_synthetic']:>5g} {cell('triplet_f1'):>13} {cell('topology_accuracy'):>13} {cell('avg_nodes'):>13} {ex:>8}")


if __name__ == "__main__":
    main()
