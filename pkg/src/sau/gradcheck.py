"""Central finite-difference check of every training objective.

Each target builds a random small network (batch <= 8, widths <= 16, BN on in
the projection head), evaluates the objective with reverse-mode gradients and
compares every parameter coordinate against a central difference at step h.
The default is the five-point stencil
``(8[f(p+h) - f(p-h)] - [f(p+2h) - f(p-2h)]) / 12h``. Its O(h^4) truncation
error stays negligible where the objective is sharply curved (small
temperature, summed loss); the plain ``(f(p+h) - f(p-h)) / 2h`` is
``stencil=3``.
Instances whose ReLU inputs come within ``KINK_MARGIN`` of zero are resampled,
because a finite difference straddling a kink measures a one-sided slope.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import contrastive as con
from . import mixer
from . import model as M
from . import rng as rngmod
from .data import BatchPair

STEP = 1e-4
TOL = 1e-3
# gradients below FLOOR are held to an absolute TOL * FLOOR
FLOOR = 1e-5
KINK_MARGIN = 2e-3
MAX_RESAMPLE = 200

TARGETS = ("mixed_ce", "supcon", "L1", "L2", "L3", "composite")


@dataclass
class CheckResult:
    target: str
    instances: int
    coords: int
    max_rel_err: float
    seconds: float
    resampled: int = 0
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.max_rel_err < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.target:<10} instances={self.instances} coords={self.coords} "
                f"max_rel_err={self.max_rel_err:.3e} time={self.seconds:.2f}s")


def rel_err(a: np.ndarray, f: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def numeric_grad(fn, params: dict[str, np.ndarray], h: float = STEP, stencil: int = 5) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``fn(constants)`` for every coordinate."""
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    work = {k: v.copy() for k, v in params.items()}
    consts = {k: ad.Tensor(v) for k, v in work.items()}
    out = {}
    for name, p in work.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)

        def at(i, v):
            flat[i] = v
            return float(fn(consts).data)

        for i in range(flat.size):
            orig = flat[i]
            d1 = at(i, orig + h) - at(i, orig - h)
            if stencil == 3:
                gflat[i] = d1 / (2 * h)
            else:
                gflat[i] = (8 * d1 - (at(i, orig + 2 * h) - at(i, orig - 2 * h))) / (12 * h)
            flat[i] = orig
        out[name] = g
    return out


def compare(fn, params: dict[str, np.ndarray], h: float = STEP, stencil: int = 5) -> tuple[float, int]:
    _, analytic = ad.grad(fn, params)
    numeric = numeric_grad(fn, params, h, stencil)
    errs = [rel_err(analytic[k], numeric[k]).max(initial=0.0) for k in params]
    return float(max(errs)), sum(v.size for v in params.values())


# -- random instances --------------------------------------------------------

def _arch(g: np.random.Generator) -> M.ArchConfig:
    return M.ArchConfig(
        input_shape=(int(g.integers(2, 7)),),
        n_classes=int(g.integers(2, 5)),
        encoder_dims=(int(g.integers(2, 7)),),
        proj_hidden=(int(g.integers(2, 7)),),
        d_z=int(g.integers(2, 6)),
        proj_norm=True,
    )


def _model(arch: M.ArchConfig, g: np.random.Generator) -> M.ModelState:
    state = M.init_params(arch, int(g.integers(1 << 31)))
    # move off the symmetric init: nonzero biases, BN scales away from 1
    for k, v in state.params.items():
        state.params[k] = v + 0.3 * g.standard_normal(v.shape)
    for k in state.buffers:
        if k.endswith(".mean"):
            state.buffers[k] = 0.3 * g.standard_normal(state.buffers[k].shape)
        else:
            state.buffers[k] = 0.5 + g.random(state.buffers[k].shape)
    return state


def _noise_labels(y: np.ndarray, syn: np.ndarray, g: np.random.Generator) -> np.ndarray:
    """Mark a random subset of synthetic rows as noise, keeping one clean row."""
    flagged = syn & (g.random(len(y)) < 0.5)
    if flagged.all():
        flagged[0] = False
    out = y.copy()
    out[flagged] = -1 - np.arange(flagged.sum())
    return out


def _prototypes(arch: M.ArchConfig, g: np.random.Generator) -> tuple[con.PrototypeSet, con.PrototypeSet]:
    """One set per view, valid for the same classes as in training."""
    valid = g.random(arch.n_classes) < 0.7
    out = []
    for _ in range(2):
        P = g.standard_normal((arch.n_classes, arch.d_z))
        out.append(con.PrototypeSet(P / np.linalg.norm(P, axis=1, keepdims=True), valid))
    return tuple(out)


def _contrastive_instance(target: str, g: np.random.Generator):
    arch = _arch(g)
    state = _model(arch, g)
    B = int(g.integers(3, 9))
    x = g.standard_normal((B, *arch.input_shape))
    xa = x + 0.3 * g.standard_normal(x.shape)
    xb = x + 0.3 * g.standard_normal(x.shape)
    y = g.integers(0, arch.n_classes, B)
    syn = g.random(B) < 0.5
    tau = float(g.uniform(0.1, 1.0))
    if target != "supcon":
        y = _noise_labels(y, syn, g)
    protos = list(_prototypes(arch, g))

    def fn(P):
        za = M._project(P, M._encode(P, xa, arch), arch, train=True)
        zb = M._project(P, M._encode(P, xb, arch), arch, train=True)
        emb = con.Embeddings(ad.concat([za, zb]), np.concatenate([y, y]), tau, np.concatenate([syn, syn]))
        if target == "supcon":
            return con.supcon_loss(emb)
        return con.LOSSES[target](emb, protos)

    return state.params, fn


def _mixed_ce_instance(g: np.random.Generator):
    arch = _arch(g)
    state = _model(arch, g)
    B = int(g.integers(2, 9))
    x1, x2 = g.standard_normal((2, B, *arch.input_shape))
    y1, y2 = g.integers(0, arch.n_classes, (2, B))
    (xm, _, _, lam_m), (xc, _, _, lam_c) = mixer.mix_batch(x1, y1, x2, y2, g, 1.0)
    use_cut = bool(g.random() < 0.5)
    xin, lam = (xc, lam_c) if use_cut else (xm, lam_m)

    def fn(P):
        return mixer.mixed_ce_loss(M._classify(P, M._encode(P, xin, arch)), y1, y2, lam)

    return state.params, fn


def _composite_instance(g: np.random.Generator):
    from .trainer import KnnReference, LossConfig, TrainConfig, step_objective

    arch = _arch(g)
    state = _model(arch, g)
    B = int(g.integers(3, 9))
    shape = arch.input_shape
    x = g.standard_normal((B, *shape))
    pair = BatchPair(
        v1=x + 0.1 * g.standard_normal(x.shape),
        v2=x + 0.3 * g.standard_normal(x.shape),
        v3=x + 0.3 * g.standard_normal(x.shape),
        labels=g.integers(0, arch.n_classes, B),
        is_synthetic=g.random(B) < 0.5,
        ids=np.arange(B),
        x2_v1=g.standard_normal((B, *shape)),
        labels2=g.integers(0, arch.n_classes, B),
        ids2=np.arange(B, 2 * B),
    )
    loss = LossConfig(
        ce=float(g.random() < 0.5) * float(g.uniform(0.1, 1)),
        mixup=float(g.uniform(0.1, 2)), cutmix=float(g.uniform(0.1, 2)), sc=float(g.uniform(0.1, 2)),
        variant=str(g.choice(list(con.LOSSES))), tau=float(g.uniform(0.1, 1.0)), k=3,
        sc_reduction=str(g.choice(["sum", "mean"])), knn_reference="bank",
    )
    cfg = TrainConfig(arch=arch, loss=loss, batch_size=max(B, 2), seed=int(g.integers(1 << 31)))
    n_bank = 3 * arch.n_classes
    bank = KnnReference(g.standard_normal((n_bank, *shape)), g.standard_normal((n_bank, *shape)),
                        np.arange(n_bank) % arch.n_classes)
    protos = _prototypes(arch, g)
    fn, _ = step_objective(state, pair, protos, cfg, bank, epoch=0, step=int(g.integers(100)))
    return state.params, fn


def make_instance(target: str, g: np.random.Generator):
    if target == "mixed_ce":
        return _mixed_ce_instance(g)
    if target == "composite":
        return _composite_instance(g)
    if target in ("supcon", *con.LOSSES):
        return _contrastive_instance(target, g)
    raise ValueError(f"unknown gradcheck target {target!r}")


def _kink_distance(fn, params) -> float:
    with ad.watch_kinks() as log:
        fn({k: ad.Tensor(v) for k, v in params.items()})
    return min(log, default=np.inf)


def check_target(target: str, n_instances: int = 20, seed: int = 0, h: float = STEP) -> CheckResult:
    t0 = time.perf_counter()
    worst, coords, done, skipped = 0.0, 0, 0, 0
    attempt = 0
    while done < n_instances:
        if skipped > MAX_RESAMPLE:
            break
        g = rngmod.stream(seed, "test", TARGETS.index(target), attempt)
        attempt += 1
        params, fn = make_instance(target, g)
        # also evaluates the composite once, freezing its corrected labels
        if _kink_distance(fn, params) < KINK_MARGIN:
            skipped += 1
            continue
        err, n = compare(fn, params, h)
        worst, coords, done = max(worst, err), coords + n, done + 1
    return CheckResult(target, done, coords, worst, time.perf_counter() - t0, skipped)


def constant_probe(seed: int = 0) -> bool:
    """An objective that ignores (or zero-weights) its inputs has exactly zero gradient."""
    g = rngmod.stream(seed, "test", len(TARGETS))
    params, fn = make_instance("composite", g)
    _, g1 = ad.grad(lambda P: ad.Tensor(np.array(3.0)), params)
    _, g2 = ad.grad(lambda P: 0.0 * fn(P) + 3.0, params)
    return all(np.all(v == 0.0) for v in (*g1.values(), *g2.values()))


def run_all(n_instances: int = 20, seed: int = 0, targets=TARGETS) -> list[CheckResult]:
    return [check_target(t, n_instances, seed) for t in targets]
