"""Dual-branch training loop: mixing losses on the classification head and a
noise-aware supervised contrastive loss on the projection head, optimised
jointly with one SGD step per batch pair."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import contrastive as con
from . import mixer
from . import model as M
from . import rng as rngmod
from .data import (LtSpec, Sample, ToySpec, build_lt_split, class_counts, complement_counts,
                   long_tailed_counts, make_batch_pairs, make_toy, augment)
from .syngen import GenSpec, generate_complement

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    enabled: bool = True
    noise_rate: float = 0.2
    quality_threshold: float = 0.5
    widen: float = 3.0
    # per-class real+synthetic total; None means the head-class size n0
    balance_target: int | None = None


@dataclass
class LossConfig:
    # plain cross-entropy on the un-mixed view; only used by baseline rows
    ce: float = 0.0
    mixup: float = 1.0
    cutmix: float = 1.0
    sc: float = 1.0
    variant: str = "L2"
    tau: float = 0.1
    k: int = 5
    alpha: float = 1.0
    sc_reduction: str = "mean"
    knn_reference: str = "bank"

    def __post_init__(self):
        if self.variant not in con.LOSSES:
            raise ValueError(f"loss variant must be one of {sorted(con.LOSSES)}")
        if min(self.ce, self.mixup, self.cutmix, self.sc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sc_reduction not in ("sum", "mean"):
            raise ValueError("sc_reduction must be 'sum' or 'mean'")
        if self.knn_reference not in ("bank", "batch"):
            raise ValueError("knn_reference must be 'bank' or 'batch'")


@dataclass
class TrainConfig:
    toy: ToySpec = field(default_factory=ToySpec)
    lt: LtSpec = field(default_factory=LtSpec)
    synth: SynthConfig = field(default_factory=SynthConfig)
    arch: M.ArchConfig = field(default_factory=M.ArchConfig)
    optim: M.OptimConfig = field(default_factory=M.OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 128
    t_lo: int = 20
    t_hi: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.t_lo < self.t_hi:
            raise ValueError("need t_lo < t_hi")

    @property
    def epochs(self) -> int:
        return self.optim.total_epochs


@dataclass
class EpochReport:
    epoch: int
    lr: float
    loss_mixup: float
    loss_cutmix: float
    loss_sc: float
    noise_count: int
    test_top1: float
    many: float
    med: float
    few: float
    loss_ce: float = float("nan")
    batch_digest: str = ""


@dataclass
class Datasets:
    real: list[Sample]
    synthetic: list[Sample]
    test: list[Sample]
    class_means: np.ndarray | None = None

    @property
    def train(self) -> list[Sample]:
        return self.real + self.synthetic


@dataclass
class StepLosses:
    total: float
    ce: float = float("nan")
    mixup: float = float("nan")
    cutmix: float = float("nan")
    sc: float = float("nan")


def build_real(cfg: TrainConfig) -> tuple[list[Sample], list[Sample], np.ndarray, int]:
    """Toy pool -> long-tailed real split. Returns (real, test, class means, next free id)."""
    toy = cfg.toy
    if toy.n_classes != cfg.lt.n_classes:
        raise ValueError("toy and long-tail specs disagree on n_classes")
    pool, test, means = make_toy(toy)
    real = build_lt_split(pool, long_tailed_counts(cfg.lt), cfg.lt.seed)
    return real, test, means, max(s.id for s in pool + test) + 1


def build_synthetic(cfg: TrainConfig, real_counts: Sequence[int], class_means: np.ndarray,
                    id_start: int) -> list[Sample]:
    """Quality-filtered synthetic complement up to the balance target."""
    if not cfg.synth.enabled:
        return []
    target = cfg.synth.balance_target or cfg.lt.n0
    need = complement_counts(real_counts, target)
    spec = GenSpec(class_means, cfg.toy.spread, cfg.synth.noise_rate, cfg.synth.quality_threshold,
                   cfg.seed, cfg.synth.widen)
    return generate_complement(spec, need, id_start)


def build_datasets(cfg: TrainConfig) -> Datasets:
    real, test, means, next_id = build_real(cfg)
    synthetic = build_synthetic(cfg, class_counts(real, cfg.lt.n_classes), means, next_id)
    return Datasets(real, synthetic, test, means)


# -- evaluation --------------------------------------------------------------

def shot_groups(real_counts: Sequence[int], t_lo: int = 20, t_hi: int = 100) -> dict[str, list[int]]:
    """many: n > t_hi; medium: t_lo < n <= t_hi; few: n <= t_lo."""
    groups = {"many": [], "medium": [], "few": []}
    for c, n in enumerate(real_counts):
        key = "many" if n > t_hi else ("few" if n <= t_lo else "medium")
        groups[key].append(c)
    return groups


def evaluate(model: M.ModelState, test_set: Sequence[Sample], real_train_counts: Sequence[int],
             thresholds: tuple[int, int] = (20, 100), predictions: np.ndarray | None = None) -> dict:
    """Balanced top-1 overall and per shot group. Empty groups report NaN."""
    y = np.array([s.label for s in test_set], dtype=np.int64)
    if predictions is None:
        predictions = M.predict(model, np.stack([s.features for s in test_set]))
    n_classes = len(real_train_counts)
    per_class = np.full(n_classes, np.nan)
    for c in range(n_classes):
        sel = y == c
        if sel.any():
            per_class[c] = float((predictions[sel] == c).mean())
    out = {"top1": float(np.nanmean(per_class)), "per_class": per_class}
    for name, classes in shot_groups(real_train_counts, *thresholds).items():
        vals = per_class[classes] if classes else np.array([])
        vals = vals[~np.isnan(vals)]
        out[name] = float(vals.mean()) if len(vals) else float("nan")
    return out


# -- prototypes and real-embedding bank ----------------------------------------

def real_views(reals: Sequence[Sample], seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Both contrastive views of every real sample for this epoch."""
    return tuple(
        np.stack([augment(s.features, "contrastive", rngmod.stream(seed, epoch, 0, s.id, purpose))
                  for s in reals])
        for purpose in ("refresh2", "refresh3"))


def embed_reals(model: M.ModelState, reals: Sequence[Sample], seed: int, epoch: int):
    """Eval-mode embeddings of every real sample under both contrastive views."""
    v2, v3 = real_views(reals, seed, epoch)
    return M.embed(model, v2), M.embed(model, v3), np.array([s.label for s in reals], dtype=np.int64)


def refresh_prototypes(model: M.ModelState, reals: Sequence[Sample], seed: int, epoch: int,
                       n_classes: int) -> tuple[con.PrototypeSet, con.PrototypeSet]:
    z2, z3, y = embed_reals(model, reals, seed, epoch)
    return con.compute_prototypes(z2, y, n_classes), con.compute_prototypes(z3, y, n_classes)


def calibrate_norm_stats(model: M.ModelState, split: Sequence[Sample], batch_size: int, seed: int) -> None:
    """Set projection running statistics to the average batch statistics of one
    no-update pass, so eval-mode embeddings are meaningful from step 0."""
    if not model.arch.proj_norm or not split:
        return
    P = model.constants()
    acc: dict[str, list] = {}
    plan = make_batch_pairs(split, min(batch_size, len(split)), 0, seed)
    for step in range(len(plan)):
        lo, hi = plan.spans[step]
        rows = plan.order1[lo:hi]
        x = np.stack([augment(plan.X[r], "contrastive", rngmod.stream(seed, 0, step, int(plan.ids[r]), "calib"))
                      for r in rows])
        stats: dict = {}
        M._project(P, M._encode(P, x, model.arch), model.arch, train=True, stats_out=stats)
        for k, v in stats.items():
            acc.setdefault(k, []).append(v)
    for k, vs in acc.items():
        model.buffers[f"{k}.mean"] = np.mean([v[0] for v in vs], axis=0)
        model.buffers[f"{k}.var"] = np.mean([v[1] for v in vs], axis=0)


@dataclass
class KnnReference:
    """Real samples under the epoch's two contrastive views.

    The views are fixed for the epoch but embedded with the current weights
    at every query, so the reference never lags the model mid-epoch.
    """

    v2: np.ndarray
    v3: np.ndarray
    labels: np.ndarray

    def embed(self, model: M.ModelState) -> tuple[np.ndarray, np.ndarray]:
        return M.embed(model, self.v2), M.embed(model, self.v3)


# -- one optimisation step ----------------------------------------------------

def step_objective(model: M.ModelState, pair, prototypes: tuple[con.PrototypeSet, con.PrototypeSet] | None,
                   cfg: TrainConfig, bank: KnnReference | None = None, epoch: int = 0, step: int = 0):
    """Build the combined objective for one batch pair.

    Returns ``(objective, side)``: ``objective(params)`` evaluates the weighted
    sum of the enabled losses and fills ``side`` with the component Tensors,
    the noise count and the projection batch statistics. Label correction runs
    on the first evaluation only; later evaluations (finite differences) reuse
    the same corrected labels.
    """
    arch, lc = model.arch, cfg.loss
    mix_rng = rngmod.stream(cfg.seed, epoch, step, "mix")
    (xm, ym1, ym2, lam_m), (xc, yc1, yc2, lam_c) = mixer.mix_batch(
        pair.v1, pair.labels, pair.x2_v1, pair.labels2, mix_rng, lc.alpha)
    side: dict = {"noise": 0, "stats": []}

    def correction(h2: np.ndarray, h3: np.ndarray) -> np.ndarray:
        labels = np.asarray(pair.labels, dtype=np.int64)
        syn = np.asarray(pair.is_synthetic, dtype=bool)
        if not syn.any():
            return labels
        C = model.constants()
        q2 = M._project(C, h2, arch, model.buffers, train=False).data
        q3 = M._project(C, h3, arch, model.buffers, train=False).data
        empty = con.PrototypeSet(np.zeros((0, q2.shape[1])), np.zeros(0, bool))
        p2, p3 = prototypes if prototypes is not None else (empty, empty)
        use_bank = lc.knn_reference == "bank" and bank is not None
        b2, b3 = bank.embed(model) if use_bank else (None, None)
        cor = []
        for q, ps, bank_z in ((q2, p2, b2), (q3, p3, b3)):
            ref = [q[~syn], ps.rows]
            ref_y = [labels[~syn], ps.labels]
            if use_bank:
                ref.append(bank_z)
                ref_y.append(bank.labels)
            cor.append(con.knn_correct(q[syn], np.concatenate(ref), np.concatenate(ref_y), lc.k))
        res = con.relabel(labels[syn], cor[0], cor[1])
        side["noise"] = res.noise_count
        out = labels.copy()
        out[syn] = res.y_new
        return out

    def objective(P):
        total = ad.Tensor(np.array(0.0))
        if lc.ce > 0:
            logits = M._classify(P, M._encode(P, pair.v1, arch))
            side["ce"] = mixer.cross_entropy(logits, pair.labels).mean()
            total = total + lc.ce * side["ce"]
        if lc.mixup > 0:
            side["mixup"] = mixer.mixed_ce_loss(M._classify(P, M._encode(P, xm, arch)), ym1, ym2, lam_m)
            total = total + lc.mixup * side["mixup"]
        if lc.cutmix > 0:
            side["cutmix"] = mixer.mixed_ce_loss(M._classify(P, M._encode(P, xc, arch)), yc1, yc2, lam_c)
            total = total + lc.cutmix * side["cutmix"]
        if lc.sc > 0:
            h2 = M._encode(P, pair.v2, arch)
            h3 = M._encode(P, pair.v3, arch)
            st2, st3 = {}, {}
            z2 = M._project(P, h2, arch, train=True, stats_out=st2)
            z3 = M._project(P, h3, arch, train=True, stats_out=st3)
            side["stats"] = [st2, st3]
            if "y_new" not in side:
                side["y_new"] = correction(h2.data, h3.data)
            y_new = side["y_new"]
            emb = con.Embeddings(ad.concat([z2, z3]), np.concatenate([y_new, y_new]), lc.tau,
                                 np.concatenate([pair.is_synthetic, pair.is_synthetic]))
            protos = list(prototypes) if prototypes is not None else None
            sc = con.LOSSES[lc.variant](emb, protos)
            if lc.sc_reduction == "mean":
                full = con._with_protos(emb, protos)
                n_anchor = len(full.labels) if lc.variant == "L2" else int((~full.noise).sum())
                sc = sc / max(n_anchor, 1)
            side["sc"] = sc
            total = total + lc.sc * sc
        return total

    return objective, side


def train_step(model: M.ModelState, pair, prototypes: tuple[con.PrototypeSet, con.PrototypeSet] | None,
               cfg: TrainConfig, lr: float, bank: KnnReference | None = None,
               epoch: int = 0, step: int = 0):
    """One gradient computation and one SGD step on the combined objective.

    Returns (updated model, StepLosses, noise_count).
    """
    objective, side = step_objective(model, pair, prototypes, cfg, bank, epoch, step)
    try:
        value, grads = M.grad(model, objective)
    except ad.NonFiniteError as exc:
        raise TrainingDivergedError(f"epoch {epoch} step {step}: {exc}") from exc
    new = M.sgd_step(model, grads, lr, cfg.optim)
    for st in side["stats"]:
        M.update_running_stats(new, st)
    losses = StepLosses(value, *(float(side[k].data) if k in side else float("nan")
                                 for k in ("ce", "mixup", "cutmix", "sc")))
    return new, losses, side["noise"]


# -- full run ------------------------------------------------------------------

def fit(cfg: TrainConfig, data: Datasets | None = None,
        callback: Callable[[EpochReport], None] | None = None,
        init: M.ModelState | None = None):
    """Train for ``cfg.optim.total_epochs`` epochs; returns (model, reports)."""
    if data is None:
        data = build_datasets(cfg)
    n_classes = cfg.arch.n_classes
    split = data.train
    real_counts = class_counts(data.real, n_classes)
    model = init.copy() if init is not None else M.init_params(cfg.arch, cfg.seed)
    reports: list[EpochReport] = []
    if cfg.epochs == 0:
        return model, reports
    use_sc = cfg.loss.sc > 0
    if use_sc and init is None:
        calibrate_norm_stats(model, split, cfg.batch_size, cfg.seed)
    batch_size = min(cfg.batch_size, len(split))
    for epoch in range(cfg.epochs):
        lr = M.cosine_lr(epoch, cfg.epochs, cfg.optim.lr0)
        prototypes, bank = None, None
        if use_sc:
            v2, v3 = real_views(data.real, cfg.seed, epoch)
            y = np.array([s.label for s in data.real], dtype=np.int64)
            bank = KnnReference(v2, v3, y)
            z2, z3 = bank.embed(model)
            prototypes = (con.compute_prototypes(z2, y, n_classes), con.compute_prototypes(z3, y, n_classes))
        sums = {"ce": [], "mixup": [], "cutmix": [], "sc": []}
        noise = 0
        digest = hashlib.sha1()
        for step, pair in enumerate(make_batch_pairs(split, batch_size, epoch, cfg.seed)):
            digest.update(pair.digest().encode())
            model, losses, n_noise = train_step(model, pair, prototypes, cfg, lr, bank, epoch, step)
            if not math.isfinite(losses.total):
                raise TrainingDivergedError(f"epoch {epoch} step {step}: non-finite loss {losses}")
            noise += n_noise
            for k in sums:
                sums[k].append(getattr(losses, k))
        model.epoch = epoch + 1
        ev = evaluate(model, data.test, real_counts, (cfg.t_lo, cfg.t_hi))
        rep = EpochReport(epoch, lr, *(float(np.mean(sums[k])) for k in ("mixup", "cutmix", "sc")),
                          noise, ev["top1"], ev["many"], ev["medium"], ev["few"],
                          float(np.mean(sums["ce"])), digest.hexdigest()[:16])
        log.info("epoch %d lr %.5f top1 %.4f few %.4f noise %d", epoch, lr, rep.test_top1, rep.few, noise)
        reports.append(rep)
        if callback is not None:
            callback(rep)
    return model, reports
