"""Feature-set and aggregation-depth ablation on the synthetic corpus.

Trains every cell of the feature sweep (K=0), the K sweep (all features) and
the self-aggregation control with identical seed and step budget, then writes
one CSV row per cell.

    python3 scripts/ablation.py --steps 1000 --out ablation.csv
"""
import argparse
import csv
import logging

from octsqueeze.experiments import CorpusConfig, Study, base_config, baseline_models, symbol_bps, synthetic_corpus, \
    val_bpp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--scenes", type=int, default=64)
    ap.add_argument("--points", type=int, default=800)
    ap.add_argument("--depth", type=int, default=10)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    corpus = synthetic_corpus(CorpusConfig(scenes=args.scenes, points=args.points, depth=args.depth))
    rows = [{"cell": name, "depth": args.depth, "bits_per_symbol": symbol_bps(m, corpus.val),
             "bpp": val_bpp(m, corpus), "seconds": 0.0} for name, m in baseline_models(corpus).items()]
    study = Study(corpus)
    base = base_config(args.steps)
    cells = study.feature_sweep(base) + study.k_sweep(base) + [study.self_control(base)]
    rows += [{"cell": c.name, "depth": args.depth, "bits_per_symbol": c.val_bps,
              "bpp": val_bpp(c.result.model, corpus), "seconds": round(c.seconds, 1)} for c in cells]
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["cell", "depth", "bits_per_symbol", "bpp", "seconds"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['cell']:>16s}  {r['bits_per_symbol']:.4f} bits/symbol  {r['bpp']:.3f} bpp")


if __name__ == "__main__":
    main()
