"""Desk-scale self-supervised run (batch 16, 2000 iterations, synthetic only) with held-out progress.

    python3 scripts/train_desk.py --out runs/desk --eval-interval 250
"""
import argparse
import dataclasses
import logging
import time

from roadgraph.training import DESK_PROFILE, evaluate_synthetic, synthetic_eval_set, train_autoencoder


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--iterations", type=int, default=DESK_PROFILE.iterations)
    ap.add_argument("--eval-interval", type=int, default=DESK_PROFILE.eval_interval)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--final-samples", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = dataclasses.replace(DESK_PROFILE, iterations=args.iterations, eval_interval=args.eval_interval, seed=args.seed)

    def progress(entry):
        m = entry["metrics"]
        print(f"it {entry['iteration']:5d}  loss {entry['loss']:.4f}  F1 {m['triplet_f1']:.3f}  "
              f"topo {m['synthetic_topology_accuracy']:.3f}  nodes {m['synthetic_avg_nodes']:.2f}  "
              f"{entry['elapsed_s'] / 60:.1f} min", flush=True)

    t0 = time.process_time()
    model, _ = train_autoencoder(cfg, out_dir=args.out, on_eval=progress)
    print(f"trained in {(time.process_time() - t0) / 60:.1f} CPU-min")
    final = evaluate_synthetic(model.encoder, synthetic_eval_set(args.final_samples))
    teacher = evaluate_synthetic(model.encoder, synthetic_eval_set(args.final_samples), mode="teacher")
    print(f"student on {args.final_samples} held-out: " + ", ".join(f"{k} {v:.3f}" for k, v in final.items()))
    print(f"teacher on {args.final_samples} held-out: " + ", ".join(f"{k} {v:.3f}" for k, v in teacher.items()))


if __name__ == "__main__":
    main()
