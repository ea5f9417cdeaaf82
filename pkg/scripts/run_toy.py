"""Train SAU and the CE-on-real baseline on the default toy and compare.

    python3 scripts/run_toy.py --epochs 50 --variant L2 --out runs/toy
"""

import argparse
import csv
import dataclasses
import time
from pathlib import Path

from sau import cli
from sau import model as M
from sau.trainer import LossConfig, SynthConfig, TrainConfig, fit


def train(name, cfg, out):
    t0 = time.perf_counter()
    with open(out / f"{name}_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cli.METRIC_COLUMNS)
        _, reps = fit(cfg, callback=lambda r: (w.writerow(cli.metrics_row(r)), fh.flush()))
    r = reps[-1]
    print(f"{name:<9} top1 {r.test_top1:.4f} many {r.many:.4f} med {r.med:.4f} few {r.few:.4f} "
          f"noise {r.noise_count} ({time.perf_counter() - t0:.0f}s)")
    return r


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--variant", default="L2", choices=("L1", "L2", "L3"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = TrainConfig(optim=M.OptimConfig(total_epochs=args.epochs), loss=LossConfig(variant=args.variant),
                      seed=args.seed)
    sau = train("sau", cfg, out)
    base = train("baseline", dataclasses.replace(cfg, loss=LossConfig(ce=1.0, mixup=0.0, cutmix=0.0, sc=0.0),
                                                 synth=SynthConfig(enabled=False)), out)
    print(f"delta     top1 {100 * (sau.test_top1 - base.test_top1):+.1f} pts, few {100 * (sau.few - base.few):+.1f} pts")


if __name__ == "__main__":
    main()
