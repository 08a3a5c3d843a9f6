"""Compare the objective variants (gd-gan, no-gan, unconditional-gan, no-l1) over seeds.

    python scripts/ablation.py --seeds 0 1 2 --epochs 200 --out runs

Checkpoints are cached under --out, so re-running only trains what is missing.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from crowdgan.encoder import ModelConfig
from crowdgan.gan import MODES, TrainConfig
from crowdgan.synth import SynthConfig, generate_corpus

from common import corpus_windows, forecast_report, grouping_score, median_abs_hidden, train_or_load


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()

    model_cfg = ModelConfig()
    windows = corpus_windows(model_cfg)
    test_scenes = generate_corpus(SynthConfig(), 100).split("test")
    rows = []
    for mode in args.modes:
        for seed in args.seeds:
            cfg = TrainConfig(mode=mode, seed=seed, epochs=args.epochs)
            model, _ = train_or_load(Path(args.out) / f"{mode}-s{seed}.ckpt", model_cfg, cfg, windows)
            ade, fde = forecast_report(model, windows["test"])["model"]
            pooled, _ = grouping_score(model, test_scenes)
            rows.append([mode, seed, ade, fde, median_abs_hidden(model, windows["test"]), pooled.precision, pooled.recall])
            print(*(f"{v:.4f}" if isinstance(v, float) else v for v in rows[-1]), flush=True)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["mode", "seed", "ade", "fde", "median_abs_h", "gm_precision", "gm_recall"])
    writer.writerows(rows)
    for mode in args.modes:
        got = np.array([r[2:] for r in rows if r[0] == mode], dtype=float)
        print(f"# {mode}: mean ADE {got[:, 0].mean():.3f}, mean Group-MITRE P {got[:, 3].mean():.3f} R {got[:, 4].mean():.3f}")


if __name__ == "__main__":
    main()
