"""Train one model on the default synthetic corpus and report forecasting and grouping scores.

    python scripts/train_eval.py --mode gd-gan --epochs 200 --seed 0 --out runs/gd-gan-s0.ckpt
"""

import argparse
import logging
import time

from crowdgan.encoder import ModelConfig
from crowdgan.gan import TrainConfig

from common import corpus_windows, forecast_report, fresh_scenes, grouping_score, median_abs_hidden, train_or_load


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mode", default="gd-gan")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lam", type=float, default=0.2)
    ap.add_argument("--hidden-size", type=int, default=32)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    model_cfg = ModelConfig(hidden_size=args.hidden_size)
    train_cfg = TrainConfig(mode=args.mode, epochs=args.epochs, seed=args.seed, lam=args.lam)
    windows = corpus_windows(model_cfg)
    start = time.time()
    model, history = train_or_load(args.out, model_cfg, train_cfg, windows)
    print(f"trained in {time.time() - start:.0f}s" if history else "loaded cached checkpoint")
    for name, (ade, fde) in forecast_report(model, windows["test"]).items():
        print(f"test {name:18s} ADE {ade:.3f}  FDE {fde:.3f}")
    print(f"median |h| on test windows: {median_abs_hidden(model, windows['test']):.4f}")
    pooled, _ = grouping_score(model, fresh_scenes())
    print(f"Group-MITRE on fresh scenes: P {pooled.precision:.3f}  R {pooled.recall:.3f}")


if __name__ == "__main__":
    main()
