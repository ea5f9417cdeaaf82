"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (visible even under capture) and
then asserts. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import csv
import dataclasses
import math
import time

import numpy as np
import pytest

from oracles import contrastive_oracle, knn_oracle
from sau import cli
from sau import config as C
from sau import contrastive as con
from sau import gradcheck as GC
from sau import mixer as X
from sau import model as M
from sau import rng as R
from sau.data import LtSpec, ToySpec, complement_counts, long_tailed_counts
from sau.trainer import LossConfig, SynthConfig, TrainConfig, build_datasets, fit

TOY_EPOCHS = 50


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail, check=True):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}", flush=True)
        if check:
            assert ok, detail
    return emit


def unit(g, m, d):
    z = g.standard_normal((m, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(g, noise_frac):
    """Two views per sample with shared noise ids, plus two prototype sets."""
    B, K, d = int(g.integers(2, 9)), int(g.integers(2, 5)), int(g.integers(2, 9))
    y = g.integers(0, K, B)
    syn = g.random(B) < 0.5
    noise = syn & (g.random(B) < noise_frac)
    y = y.copy()
    y[noise] = -1 - np.arange(noise.sum())
    valid = g.random(K) < 0.8
    protos = [con.PrototypeSet(unit(g, K, d), valid) for _ in range(2)]
    emb = con.Embeddings(unit(g, 2 * B, d), np.concatenate([y, y]), float(g.uniform(0.1, 1.0)),
                         np.concatenate([syn, syn]))
    return emb, protos


def test_criterion_1_gradient_oracle(report):
    t0 = time.perf_counter()
    results = GC.run_all(n_instances=20, seed=0)
    probe = GC.constant_probe(0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed and r.instances >= 20 for r in results) and probe and elapsed < 60
    detail = ", ".join(f"{r.target}={r.max_rel_err:.1e}" for r in results)
    report(1, ok, f"max rel err {worst:.2e} < 1e-3 [{detail}], constant probe exact={probe}, {elapsed:.1f}s < 60s")


def test_criterion_2_noise_free_reduction(report):
    g = np.random.default_rng(2)
    worst, n = 0.0, 0
    t0 = time.perf_counter()
    while n < 200:
        emb, protos = random_batch(g, 0.0)
        l1 = con.loss_l1(emb, protos).item()
        sup = con.supcon_loss(con.append_prototypes(emb, *protos)).item()
        worst = max(worst, abs(l1 - con.loss_l2(emb, protos).item()), abs(l1 - con.loss_l3(emb, protos).item()),
                    abs(l1 - sup))
        n += 1
    report(2, worst < 1e-9, f"{n} batches, max |L1-L2|,|L1-L3|,|L1-supcon| = {worst:.2e} < 1e-9 "
                            f"({time.perf_counter() - t0:.2f}s)")


def test_criterion_3_loss_oracles(report):
    g = np.random.default_rng(3)
    worst, checked = 0.0, {"L1": 0, "L2": 0, "L3": 0}
    while min(checked.values()) < 150:
        emb, protos = random_batch(g, 0.6)
        full = con.append_prototypes(emb, *protos)
        if not (full.labels < 0).any():
            continue
        for v in checked:
            try:
                want = contrastive_oracle(np.asarray(full.z), full.labels, full.tau, v)
            except ValueError:
                continue
            worst = max(worst, abs(con.LOSSES[v](emb, protos).item() - want))
            checked[v] += 1
    report(3, worst < 1e-9, f"batches with noise marks per variant {checked}, max |impl - oracle| = {worst:.2e} < 1e-9")


def test_criterion_4_knn_oracle(report):
    g = np.random.default_rng(4)
    mismatches, relabel_bad, n = 0, 0, 0
    sizes = [int(s) for s in g.integers(1, 1001, 150)] + [1000]
    for m in sizes:
        d = int(g.integers(2, 17))
        k = int(g.integers(1, 10))
        ref, q = unit(g, m, d), unit(g, int(g.integers(1, 8)), d)
        y = g.integers(0, int(g.integers(1, 6)), m)
        got = con.knn_correct(q, ref, y, k).tolist()
        mismatches += got != knn_oracle(q, ref, y, k)
        y_org = g.integers(0, 4, len(q))
        other = con.knn_correct(q + 0.3 * g.standard_normal(q.shape), ref, y, k)
        r = con.relabel(y_org, got, other, next_noise_id=-1 - int(g.integers(0, 100)))
        noise = r.y_new[r.y_new < 0]
        both = np.concatenate([r.y_new, r.y_new])
        relabel_bad += (len(set(noise.tolist())) != len(noise)) or not np.array_equal(both[:len(q)], both[len(q):])
        n += 1
    ok = mismatches == 0 and relabel_bad == 0
    report(4, ok, f"{n} instances (max M={max(sizes)}): knn mismatches={mismatches}, relabel violations={relabel_bad}")


def test_criterion_5_invariances(report):
    g = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        emb, protos = random_batch(g, 0.5)
        full = con.append_prototypes(emb, *protos)
        z, y, tau = np.asarray(full.z), full.labels, full.tau
        Q, _ = np.linalg.qr(g.standard_normal((z.shape[1], z.shape[1])))
        perm = g.permutation(len(y))
        for fn in (con.supcon_loss, con.loss_l1, con.loss_l2, con.loss_l3):
            try:
                base = fn(con.Embeddings(z, y, tau)).item()
            except con.EmptyPositiveSetError:
                continue
            worst = max(worst, abs(base - fn(con.Embeddings(z @ Q, y, tau)).item()),
                        abs(base - fn(con.Embeddings(z[perm], y[perm], tau)).item()))
    coeff_ok, area_ok = True, True
    for i in range(500):
        r = R.stream(5, "mix", i)
        lam = X.sample_mix_ratio(1.0, r)
        W, H = int(r.integers(1, 40)), int(r.integers(1, 40))
        m = X.mixup(np.zeros(3), 0, np.ones(3), 1, lam)
        box = X.cutmix_box(W, H, lam, r)
        c = X.cutmix(np.zeros((1, H, W)), 0, np.ones((1, H, W)), 1, box)
        coeff_ok &= (m.lam_label + (1 - m.lam_label) == 1.0) and (c.lam_label + (1 - c.lam_label) == 1.0)
        area_ok &= (box.area_ratio == c.x_tilde.sum() / (W * H)) and (c.lam_label == 1.0 - box.area_ratio)
    rs = R.stream(5, "mix", 10 ** 6)
    mean = float(np.mean([X.sample_mix_ratio(1.0, rs) for _ in range(10_000)]))
    ok = worst < 1e-9 and coeff_ok and area_ok and abs(mean - 0.5) <= 0.02
    report(5, ok, f"rotation/permutation max dev {worst:.2e} < 1e-9; coefficients sum to 1: {coeff_ok}; "
                  f"cutmix realized-area exact: {area_ok}; Beta(1,1) mean {mean:.4f} (0.5 +- 0.02)")


def test_criterion_6_dataset_construction(report):
    ok, parts = True, []
    for imb in (10, 50, 100, 200):
        c = long_tailed_counts(LtSpec(10, 5000, imb))
        good = c[0] == 5000 and c[9] == round(5000 / imb)
        comp = complement_counts(c, 5000)
        good &= len({a + b for a, b in zip(c, comp)}) == 1
        ok &= good
        parts.append(f"IF={imb}: [{c[0]}..{c[9]}]")
    report(6, ok, "; ".join(parts) + "; complements restore a constant total")


class _Stop(Exception):
    pass


def _prefix(cfg, n):
    reps = []

    def cb(r):
        reps.append(r)
        if len(reps) == n:
            raise _Stop

    try:
        fit(cfg, callback=cb)
    except _Stop:
        pass
    return reps


def test_criterion_7_toy_end_to_end(report):
    cfg = TrainConfig(optim=M.OptimConfig(total_epochs=TOY_EPOCHS), loss=LossConfig(variant="L2"))
    assert cfg.synth.noise_rate == 0.2 and cfg.lt.n0 == 500 and cfg.lt.imbalance_factor == 100
    t0 = time.perf_counter()
    _, sau = fit(cfg)
    elapsed = time.perf_counter() - t0
    again = _prefix(cfg, 3)
    deterministic = repr(again) == repr(sau[:3])
    base_cfg = dataclasses.replace(cfg, loss=LossConfig(ce=1.0, mixup=0.0, cutmix=0.0, sc=0.0),
                                   synth=SynthConfig(enabled=False))
    _, base = fit(base_cfg)
    s, b = sau[-1], base[-1]
    d_top, d_few = 100 * (s.test_top1 - b.test_top1), 100 * (s.few - b.few)
    sep_cfg = dataclasses.replace(cfg, toy=ToySpec(mean_scale=3.0, spread=0.1), synth=SynthConfig(noise_rate=0.0))
    _, sep = fit(sep_cfg)
    noise = [r.noise_count for r in sep]
    ok_a = elapsed < 300 and deterministic
    ok_b, ok_c, ok_d = d_top >= 5, d_few >= 10, all(n == 0 for n in noise)
    lines = [
        ("7a", ok_a, f"{TOY_EPOCHS}-epoch run {elapsed:.0f}s < 300s, repeat run bit-identical: {deterministic}"),
        ("7b", ok_b, f"balanced top-1 SAU {s.test_top1:.3f} vs CE-on-real-LT {b.test_top1:.3f} (+{d_top:.1f} pts, need 5)"),
        ("7c", ok_c, f"few-shot SAU {s.few:.3f} vs baseline {b.few:.3f} (+{d_few:.1f} pts, need 10)"),
        ("7d", ok_d, f"noise-free separated toy (mean_scale 3, spread 0.1): max noise_count {max(noise)} over {len(noise)} epochs"),
    ]
    for c, ok, detail in lines:
        report(c, ok, detail, check=False)
    failed = [c for c, ok, _ in lines if not ok]
    assert not failed, f"criteria {failed} failed"


def test_criterion_8_ablation_harness(report, tmp_path):
    cfg = C.RunConfig(train=TrainConfig(optim=M.OptimConfig(total_epochs=3)), out_dir=str(tmp_path / "ablate"))
    C.save(cfg, tmp_path / "cfg.json")
    t0 = time.perf_counter()
    rc = cli.main(["ablate", "--config", str(tmp_path / "cfg.json")])
    out = tmp_path / "ablate"
    losses = list(csv.DictReader(open(out / "ablation_losses.csv")))
    grid = list(csv.DictReader(open(out / "ablation_components.csv")))
    per_run: dict[str, list[str]] = {}
    for r in csv.DictReader(open(out / "batch_digests.csv")):
        per_run.setdefault(r["run"], []).append(r["digest"])
    shared = len({tuple(v) for v in per_run.values()}) == 1 and len(per_run) == len(losses) + len(grid)
    parsed = all(math.isfinite(float(r["top1"])) for r in losses + grid)
    ok = (rc == 0 and [r["run"] for r in losses] == ["L1", "L2", "L3"]
          and [r["run"] for r in grid] == [r[0] for r in cli.COMPONENT_ROWS] and parsed and shared)
    best = max(losses, key=lambda r: float(r["top1"]))["run"]
    table = " ".join(f"{r['run']}={float(r['top1']):.3f}" for r in losses + grid)
    report(8, ok, f"{len(losses)} variant rows + {len(grid)} component rows parsed, identical batch digests "
                  f"across runs: {shared}, {time.perf_counter() - t0:.0f}s; "
                  f"[{table}]; best variant {best} (informational)")
