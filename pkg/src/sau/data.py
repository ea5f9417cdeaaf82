"""Long-tailed splits, synthetic complements, augmentation and paired batches."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngmod


class InsufficientSamplesError(ValueError):
    def __init__(self, class_id: int, needed: int, available: int):
        super().__init__(f"class {class_id}: need {needed} samples, only {available} available")
        self.class_id = class_id


class ComplementError(ValueError):
    def __init__(self, class_id: int, target: int, count: int):
        super().__init__(f"class {class_id}: balance target {target} is below real count {count}")
        self.class_id = class_id


@dataclass
class Sample:
    features: np.ndarray
    label: int
    is_synthetic: bool = False
    quality: float = 1.0
    id: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality must lie in [0, 1], got {self.quality}")
        if self.id < 0:
            raise ValueError("sample id must be non-negative")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"sample {self.id} has non-finite features")

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.label == other.label and self.is_synthetic == other.is_synthetic
                and self.quality == other.quality and self.id == other.id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class LtSpec:
    n_classes: int = 10
    n0: int = 500
    imbalance_factor: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")
        if self.imbalance_factor < 1:
            raise ValueError("imbalance_factor must be >= 1")


def long_tailed_counts(spec: LtSpec) -> list[int]:
    """Per-class counts decaying exponentially from n0 down to n0 / IF."""
    n = spec.n_classes
    if n == 1:
        return [spec.n0]
    # round-half-up, so 0.5 boundaries do not depend on banker's rounding
    return [int(math.floor(spec.n0 * spec.imbalance_factor ** (-i / (n - 1)) + 0.5)) for i in range(n)]


def build_lt_split(full_dataset: Sequence[Sample], counts: Sequence[int], seed: int) -> list[Sample]:
    by_class: dict[int, list[Sample]] = {}
    for s in full_dataset:
        by_class.setdefault(s.label, []).append(s)
    split: list[Sample] = []
    for c, need in enumerate(counts):
        pool = sorted(by_class.get(c, []), key=lambda s: s.id)
        if len(pool) < need:
            raise InsufficientSamplesError(c, need, len(pool))
        if need == 0:
            continue
        idx = rngmod.stream(seed, "split", c).choice(len(pool), size=need, replace=False)
        for i in sorted(idx):
            s = pool[i]
            split.append(Sample(s.features, s.label, False, s.quality, s.id))
    return split


def complement_counts(real_counts: Sequence[int], target: int) -> list[int]:
    for c, n in enumerate(real_counts):
        if target < n:
            raise ComplementError(c, target, n)
    return [target - n for n in real_counts]


def class_counts(samples: Sequence[Sample], n_classes: int, synthetic: bool | None = None) -> list[int]:
    counts = [0] * n_classes
    for s in samples:
        if synthetic is None or s.is_synthetic == synthetic:
            counts[s.label] += 1
    return counts


# -- toy problem -------------------------------------------------------------

@dataclass
class ToySpec:
    """Class-conditional isotropic Gaussians; ``shape`` may be (D,) or (C, H, W)."""

    n_classes: int = 10
    shape: tuple[int, ...] = (16,)
    mean_scale: float = 0.7
    spread: float = 1.0
    n_train_per_class: int = 500
    n_test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)


def toy_class_means(spec: ToySpec) -> np.ndarray:
    g = rngmod.stream(spec.seed, "toy", 0)
    return g.normal(size=(spec.n_classes, *spec.shape)) * spec.mean_scale


def make_toy(spec: ToySpec) -> tuple[list[Sample], list[Sample], np.ndarray]:
    """Returns (full real training pool, balanced test set, class means)."""
    means = toy_class_means(spec)

    def draw(n_per_class: int, key: int, id_base: int) -> list[Sample]:
        g = rngmod.stream(spec.seed, "toy", key)
        out = []
        for c in range(spec.n_classes):
            xs = means[c] + spec.spread * g.normal(size=(n_per_class, *spec.shape))
            for k in range(n_per_class):
                out.append(Sample(xs[k], c, False, 1.0, id_base + c * n_per_class + k))
        return out

    train = draw(spec.n_train_per_class, 1, 0)
    test = draw(spec.n_test_per_class, 2, spec.n_classes * spec.n_train_per_class)
    return train, test, means


# -- augmentation ------------------------------------------------------------

POLICIES = ("identity", "classification", "contrastive")

# flat-vector analogues of the image transforms
FLAT_CLS_NOISE = 0.1
FLAT_CON_NOISE = 0.2
FLAT_CON_SCALE = 0.2


def flip_horizontal(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1].copy()


def pad_crop(x: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    """Zero-pad by ``pad`` then crop back at offset (dy, dx) in [0, 2*pad]."""
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    return xp[:, dy:dy + H, dx:dx + W].copy()


def cutout(x: np.ndarray, cy: int, cx: int, size: int) -> np.ndarray:
    out = x.copy()
    half = size // 2
    out[:, max(cy - half, 0):max(cy - half + size, 0), max(cx - half, 0):max(cx - half + size, 0)] = 0.0
    return out


def channel_jitter(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return x * scale[:, None, None] + shift[:, None, None]


def augment(x: np.ndarray, policy: str, rng: np.random.Generator) -> np.ndarray:
    """Apply one random draw of ``policy`` to a (C, H, W) image or a flat (D,) vector.

    Images: ``classification`` is flip + pad-and-crop; ``contrastive`` adds a
    cutout erase and per-channel affine jitter. Flat vectors have no spatial
    axes, so they get additive Gaussian jitter (both policies) plus a global
    scale jitter (contrastive only).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    x = np.asarray(x, dtype=np.float64)
    if policy == "identity":
        return x.copy()
    if x.ndim == 1:
        if policy == "classification":
            return x + FLAT_CLS_NOISE * rng.standard_normal(x.shape)
        scale = 1.0 + FLAT_CON_SCALE * (2.0 * rng.random() - 1.0)
        return x * scale + FLAT_CON_NOISE * rng.standard_normal(x.shape)
    if x.ndim != 3:
        raise ValueError(f"augment expects (D,) or (C, H, W), got shape {x.shape}")
    C, H, W = x.shape
    pad = max(1, H // 8)
    out = flip_horizontal(x) if rng.random() < 0.5 else x
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = pad_crop(out, pad, int(dy), int(dx))
    if policy == "contrastive":
        size = max(1, H // 4)
        cy, cx = rng.integers(0, H), rng.integers(0, W)
        out = cutout(out, int(cy), int(cx), size)
        out = channel_jitter(out, 1.0 + 0.2 * (2 * rng.random(C) - 1), 0.1 * rng.standard_normal(C))
    return out


# -- paired batches ----------------------------------------------------------

@dataclass
class ViewTriple:
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray


@dataclass
class BatchPair:
    """Batch-major arrays; row r of the first batch has views v1[r], v2[r], v3[r]."""

    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    labels: np.ndarray
    is_synthetic: np.ndarray
    ids: np.ndarray
    x2_v1: np.ndarray
    labels2: np.ndarray
    ids2: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def batch1(self) -> list[tuple[ViewTriple, int, bool, int]]:
        return [(ViewTriple(self.v1[r], self.v2[r], self.v3[r]), int(self.labels[r]),
                 bool(self.is_synthetic[r]), int(self.ids[r])) for r in range(len(self))]

    @property
    def batch2(self) -> list[tuple[np.ndarray, int]]:
        return [(self.x2_v1[r], int(self.labels2[r])) for r in range(len(self))]

    def digest(self) -> str:
        h = hashlib.sha1()
        for a in (self.ids, self.ids2, self.v1, self.v2, self.v3, self.x2_v1):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def _boundaries(n: int, batch_size: int) -> list[tuple[int, int]]:
    edges = list(range(0, n, batch_size)) + [n]
    spans = list(zip(edges[:-1], edges[1:]))
    # a trailing singleton breaks batch statistics; fold it into its neighbour
    if len(spans) > 1 and spans[-1][1] - spans[-1][0] < 2:
        spans[-2] = (spans[-2][0], n)
        spans.pop()
    return spans


class BatchPlan(Sequence[BatchPair]):
    """Lazily materialised sequence of BatchPairs for one epoch.

    Views are pure functions of (seed, epoch, step, sample id, purpose), so
    any step can be built independently and in any order.
    """

    def __init__(self, split: Sequence[Sample], batch_size: int, epoch: int, seed: int):
        if not split:
            raise ValueError("cannot batch an empty split")
        if batch_size > len(split):
            raise ValueError(f"batch_size {batch_size} exceeds split size {len(split)}")
        self.X = np.stack([s.features for s in split])
        self.labels = np.array([s.label for s in split], dtype=np.int64)
        self.synthetic = np.array([s.is_synthetic for s in split], dtype=bool)
        self.ids = np.array([s.id for s in split], dtype=np.int64)
        self.epoch, self.seed = epoch, seed
        self.order1 = rngmod.stream(seed, epoch, "shuffle1").permutation(len(split))
        self.order2 = rngmod.stream(seed, epoch, "shuffle2").permutation(len(split))
        self.spans = _boundaries(len(split), batch_size)

    def __len__(self) -> int:
        return len(self.spans)

    def _views(self, rows: np.ndarray, step: int, purpose: str, policy: str) -> np.ndarray:
        return np.stack([
            augment(self.X[r], policy, rngmod.stream(self.seed, self.epoch, step, int(self.ids[r]), purpose))
            for r in rows
        ])

    def __getitem__(self, step):
        if isinstance(step, slice):
            return [self[i] for i in range(*step.indices(len(self)))]
        if step < 0:
            step += len(self)
        lo, hi = self.spans[step]
        r1, r2 = self.order1[lo:hi], self.order2[lo:hi]
        return BatchPair(
            v1=self._views(r1, step, "view1", "classification"),
            v2=self._views(r1, step, "view2", "contrastive"),
            v3=self._views(r1, step, "view3", "contrastive"),
            labels=self.labels[r1], is_synthetic=self.synthetic[r1], ids=self.ids[r1],
            x2_v1=self._views(r2, step, "view1_b2", "classification"),
            labels2=self.labels[r2], ids2=self.ids[r2],
        )

    def __iter__(self) -> Iterator[BatchPair]:
        for i in range(len(self)):
            yield self[i]


def make_batch_pairs(split: Sequence[Sample], batch_size: int, epoch: int, seed: int) -> BatchPlan:
    return BatchPlan(split, batch_size, epoch, seed)
