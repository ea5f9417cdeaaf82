"""Loss-variant sweep and component grid on the default toy.

    python3 scripts/run_ablation.py --epochs 20 --out runs/ablation
"""

import argparse
import dataclasses
from pathlib import Path

from sau import cli
from sau import config as C
from sau import model as M
from sau.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--no-components", action="store_true")
    args = ap.parse_args()
    cfg = C.RunConfig(train=TrainConfig(optim=M.OptimConfig(total_epochs=args.epochs), seed=args.seed),
                      out_dir=args.out)
    if args.no_components:
        cfg = dataclasses.replace(cfg, ablate_components=False)
    out = Path(args.out)
    C.save(cfg, out / "config.json")
    variants, grid, digests = cli.run_ablation(cfg)
    header = ("run", "top1", "many", "med", "few", "noise_count")
    cli.write_table(out / "ablation_losses.csv", header, variants)
    if grid:
        cli.write_table(out / "ablation_components.csv", header, grid)
    cli.write_table(out / "batch_digests.csv", ("run", "epoch", "digest"), digests)
    print(f"{'run':<16} {'top1':>7} {'many':>7} {'med':>7} {'few':>7}")
    for name, top1, many, med, few, _ in (*variants, *grid):
        print(f"{name:<16} {top1:7.4f} {many:7.4f} {med:7.4f} {few:7.4f}")


if __name__ == "__main__":
    main()
