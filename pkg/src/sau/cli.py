"""Command-line entry point: sau {make-data, gen-synth, train, ablate, gradcheck, eval}."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import gradcheck
from . import model as M
from .data import class_counts, long_tailed_counts
from .storage import read_dataset, write_dataset
from .trainer import (Datasets, EpochReport, LossConfig, SynthConfig, build_real, build_synthetic,
                      evaluate, fit)

log = logging.getLogger("sau")

METRIC_COLUMNS = ("epoch", "lr", "loss_mixup", "loss_cutmix", "loss_sc", "noise_count",
                  "test_top1", "many", "med", "few")

REAL_MANIFEST = "real_train.jsonl"
TEST_MANIFEST = "test.jsonl"
SYN_MANIFEST = "synthetic.jsonl"
TOY_META = "toy.json"
CHECKPOINT = "model.ckpt"

# component grid: (name, ce, mixup, cutmix, sc)
COMPONENT_ROWS = (
    ("CE", 1.0, 0.0, 0.0, 0.0),
    ("MixUp", 0.0, 1.0, 0.0, 0.0),
    ("CutMix", 0.0, 0.0, 1.0, 0.0),
    ("MixUp+CutMix", 0.0, 1.0, 1.0, 0.0),
    ("MixUp+SC", 0.0, 1.0, 0.0, 1.0),
    ("CutMix+SC", 0.0, 0.0, 1.0, 1.0),
    ("MixUp+CutMix+SC", 0.0, 1.0, 1.0, 1.0),
)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_row(rep: EpochReport) -> list[str]:
    return [_fmt(v) for v in (rep.epoch, rep.lr, rep.loss_mixup, rep.loss_cutmix, rep.loss_sc,
                              rep.noise_count, rep.test_top1, rep.many, rep.med, rep.few)]


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


# -- config plumbing -----------------------------------------------------------

def _run_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    t = cfg.train
    if args.seed is not None:
        t = dataclasses.replace(t, seed=args.seed, toy=dataclasses.replace(t.toy, seed=args.seed),
                                lt=dataclasses.replace(t.lt, seed=args.seed))
    if getattr(args, "epochs", None) is not None:
        t = dataclasses.replace(t, optim=dataclasses.replace(t.optim, total_epochs=args.epochs))
    if getattr(args, "variant", None):
        t = dataclasses.replace(t, loss=dataclasses.replace(t.loss, variant=args.variant))
    cfg = dataclasses.replace(cfg, train=t)
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, data_dir=args.data, use_data_dir=True)
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def load_datasets(data_dir: str | Path, synth_enabled: bool = True) -> Datasets:
    d = Path(data_dir)
    for name in (REAL_MANIFEST, TEST_MANIFEST, TOY_META):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} not found; run make-data first")
    meta = json.loads((d / TOY_META).read_text())
    synthetic = []
    if synth_enabled:
        if not (d / SYN_MANIFEST).exists():
            raise FileNotFoundError(f"{d / SYN_MANIFEST} not found; run gen-synth first")
        synthetic = read_dataset(d / SYN_MANIFEST)
    return Datasets(read_dataset(d / REAL_MANIFEST), synthetic, read_dataset(d / TEST_MANIFEST),
                    np.asarray(meta["class_means"], dtype=np.float64))


def _datasets(cfg: C.RunConfig) -> Datasets:
    if cfg.use_data_dir:
        return load_datasets(cfg.data_dir, cfg.train.synth.enabled)
    t = cfg.train
    real, test, means, next_id = build_real(t)
    return Datasets(real, build_synthetic(t, class_counts(real, t.lt.n_classes), means, next_id), test, means)


# -- commands ----------------------------------------------------------------

def cmd_make_data(args) -> int:
    cfg = _run_config(args)
    t = cfg.train
    n = args.classes if args.classes is not None else t.lt.n_classes
    lt = dataclasses.replace(t.lt, n_classes=n,
                             n0=args.n0 if args.n0 is not None else t.lt.n0,
                             imbalance_factor=args.imbalance if args.imbalance is not None else t.lt.imbalance_factor)
    t = dataclasses.replace(t, lt=lt, toy=dataclasses.replace(t.toy, n_classes=n))
    out = Path(args.out or cfg.data_dir)
    real, test, means, next_id = build_real(t)
    write_dataset(real, out / REAL_MANIFEST)
    write_dataset(test, out / TEST_MANIFEST)
    meta = {"toy": C.to_dict(t.toy), "lt": C.to_dict(t.lt), "next_id": next_id, "class_means": means.tolist()}
    (out / TOY_META).write_text(json.dumps(meta, indent=1) + "\n")
    print("counts", " ".join(str(c) for c in long_tailed_counts(lt)))
    return 0


def cmd_gen_synth(args) -> int:
    cfg = _run_config(args)
    src = Path(args.data or cfg.data_dir)
    out = Path(args.out or src)
    meta = json.loads((src / TOY_META).read_text())
    real = read_dataset(src / REAL_MANIFEST)
    t = cfg.train
    synth = dataclasses.replace(
        t.synth, enabled=True,
        noise_rate=args.noise_rate if args.noise_rate is not None else t.synth.noise_rate,
        quality_threshold=args.threshold if args.threshold is not None else t.synth.quality_threshold,
        balance_target=args.target if args.target is not None else t.synth.balance_target)
    lt = C.from_dict(type(t.lt), meta["lt"])
    toy = C.from_dict(type(t.toy), meta["toy"])
    t = dataclasses.replace(t, synth=synth, lt=lt, toy=toy)
    counts = class_counts(real, lt.n_classes)
    syn = build_synthetic(t, counts, np.asarray(meta["class_means"]), int(meta["next_id"]))
    write_dataset(syn, out / SYN_MANIFEST)
    totals = [a + b for a, b in zip(counts, class_counts(syn, lt.n_classes))]
    print("synthetic", len(syn), "totals", " ".join(map(str, totals)))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.json")
    data = _datasets(cfg)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        fh.flush()

        def on_epoch(rep: EpochReport) -> None:
            w.writerow(metrics_row(rep))
            fh.flush()

        model, reports = fit(cfg.train, data, callback=on_epoch)
    M.save_checkpoint(model, out / CHECKPOINT)
    if reports:
        r = reports[-1]
        print(f"top1 {r.test_top1:.4f} many {r.many:.4f} med {r.med:.4f} few {r.few:.4f}")
    return 0


def run_ablation(cfg: C.RunConfig, data: Datasets | None = None, components: bool | None = None):
    """Loss-variant sweep and component grid on one shared dataset build.

    Returns (variant rows, component rows, digest rows); each row is
    (name, top1, many, med, few, noise_count of the last epoch).
    """
    data = data if data is not None else _datasets(cfg)
    components = cfg.ablate_components if components is None else components
    digests: list[tuple[str, int, str]] = []

    def run(name: str, loss: LossConfig):
        _, reps = fit(dataclasses.replace(cfg.train, loss=loss), data)
        digests.extend((name, r.epoch, r.batch_digest) for r in reps)
        r = reps[-1] if reps else None
        log.info("ablation %s top1 %s", name, r and r.test_top1)
        if r is None:
            return (name, *[float("nan")] * 4, 0)
        return (name, r.test_top1, r.many, r.med, r.few, r.noise_count)

    base = cfg.train.loss
    variants = [run(v, dataclasses.replace(base, variant=v)) for v in cfg.ablate_variants]
    grid = []
    if components:
        for name, ce, mix, cut, sc in COMPONENT_ROWS:
            grid.append(run(name, dataclasses.replace(base, ce=ce, mixup=mix, cutmix=cut, sc=sc)))
    return variants, grid, digests


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if args.variants:
        cfg = dataclasses.replace(cfg, ablate_variants=tuple(args.variants))
    if args.no_components:
        cfg = dataclasses.replace(cfg, ablate_components=False)
    out = Path(cfg.out_dir)
    C.save(cfg, out / "config.json")
    variants, grid, digests = run_ablation(cfg)
    header = ("run", "top1", "many", "med", "few", "noise_count")
    write_table(out / "ablation_losses.csv", header, variants)
    if grid:
        write_table(out / "ablation_components.csv", header, grid)
    write_table(out / "batch_digests.csv", ("run", "epoch", "digest"), digests)
    for row in (*variants, *grid):
        print(f"{row[0]:<16} top1 {row[1]:.4f} few {row[4]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    n = args.instances if args.instances is not None else cfg.gradcheck_instances
    ok = True
    for res in gradcheck.run_all(n, cfg.train.seed):
        print(res.line())
        ok &= res.passed
    probe = gradcheck.constant_probe(cfg.train.seed)
    print(f"{'PASS' if probe else 'FAIL'} constant_probe exact_zero={probe}")
    if not (ok and probe):
        print("error: gradient check failed", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / CHECKPOINT
    model = M.load_checkpoint(ckpt, cfg.train.arch)
    data = _datasets(cfg)
    counts = class_counts(data.real, cfg.train.arch.n_classes)
    ev = evaluate(model, data.test, counts, (cfg.train.t_lo, cfg.train.t_hi))
    print(f"top1 {ev['top1']:.4f} many {ev['many']:.4f} med {ev['medium']:.4f} few {ev['few']:.4f}")
    return 0


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--log-level", default=None)

    p = argparse.ArgumentParser(prog="sau")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", parents=[common], help="build the long-tailed real split")
    s.add_argument("--classes", type=int)
    s.add_argument("--n0", type=int)
    s.add_argument("--if", dest="imbalance", type=float)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("gen-synth", parents=[common], help="generate the synthetic complement")
    s.add_argument("--data", type=str, help="directory holding the real manifest")
    s.add_argument("--noise-rate", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--target", type=int, help="per-class real+synthetic total")
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train", parents=[common], help="train and write metrics.csv + checkpoint")
    s.add_argument("--data", type=str, help="read manifests from this directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--variant", choices=("L1", "L2", "L3"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", parents=[common], help="loss-variant and component sweeps")
    s.add_argument("--data", type=str)
    s.add_argument("--epochs", type=int)
    s.add_argument("--variants", nargs="+", choices=("L1", "L2", "L3"))
    s.add_argument("--no-components", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--instances", type=int)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--data", type=str)
    s.add_argument("--checkpoint", type=str)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level or "WARNING"
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config and not Path(args.config).exists():
            raise FileNotFoundError(f"config {args.config} does not exist")
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
