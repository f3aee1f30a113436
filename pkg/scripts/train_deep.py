"""Train one deep entropy model on the synthetic corpus and compare it to the baselines.

Writes the checkpoint and a per-step loss CSV; prints validation bits/symbol
and bits/point next to the count-based baselines.

    python3 scripts/train_deep.py --steps 1000 --K 4 --out k4.ckpt
"""
import argparse
import logging
from dataclasses import replace

from octsqueeze import entropy as E
from octsqueeze.experiments import CorpusConfig, base_config, baseline_models, symbol_bps, synthetic_corpus, val_bpp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--K", type=int, default=4)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--aggregation", choices=["parent", "self"], default="parent")
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--scenes", type=int, default=64)
    ap.add_argument("--points", type=int, default=800)
    ap.add_argument("--depth", type=int, default=10)
    ap.add_argument("--out", default="model.ckpt")
    ap.add_argument("--loss-csv", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    corpus = synthetic_corpus(CorpusConfig(scenes=args.scenes, points=args.points, depth=args.depth))
    cfg = replace(base_config(args.steps), K=args.K, lr=args.lr, seed=args.seed, aggregation=args.aggregation,
                  compute_dtype=args.dtype)
    res = E.train(cfg, corpus.train, corpus.val)
    E.save_checkpoint(res.model, args.out)
    if args.loss_csv:
        E.write_history_csv(res.history, args.loss_csv)

    for name, m in baseline_models(corpus).items():
        print(f"{name:>16s}  {symbol_bps(m, corpus.val):.4f} bits/symbol  {val_bpp(m, corpus):.3f} bpp")
    print(f"{'deep K=' + str(args.K):>16s}  {symbol_bps(res.model, corpus.val):.4f} bits/symbol  "
          f"{val_bpp(res.model, corpus):.3f} bpp  -> {args.out} ({res.model.model_hash:08x})")


if __name__ == "__main__":
    main()
