"""Procedural stand-in for text-to-image generation plus relevance filtering.

Generated samples come from the same class-conditional Gaussians as the real
toy data. A fraction ``noise_rate`` are low-quality generations: half drawn
from a different class (mislabeled), half drawn with a widened spread
(blurry). The quality score is the posterior of the labeled class under the
equal-variance Gaussian model, which plays the role of an image-text relevance
score for ``filter_by_quality``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .data import Sample
from .storage import read_dataset


@dataclass
class GenSpec:
    class_means: np.ndarray
    spread: float = 1.0
    noise_rate: float = 0.0
    quality_threshold: float = 0.5
    seed: int = 0
    widen: float = 3.0

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if not 0.0 <= self.quality_threshold <= 1.0:
            raise ValueError("quality_threshold must lie in [0, 1]")
        if self.spread <= 0:
            raise ValueError("spread must be positive")

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]


def class_posterior(spec: GenSpec, x: np.ndarray) -> np.ndarray:
    """Posterior over classes for each row of ``x`` (any trailing shape)."""
    flat = x.reshape(len(x), -1)
    means = spec.class_means.reshape(spec.n_classes, -1)
    d2 = ((flat[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    logits = -d2 / (2.0 * spec.spread ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def generate_class_samples(spec: GenSpec, class_id: int, count: int,
                           rng: np.random.Generator, id_start: int = 0) -> list[Sample]:
    if not 0 <= class_id < spec.n_classes:
        raise ValueError(f"class_id {class_id} out of range")
    if count <= 0:
        return []
    shape = spec.class_means.shape[1:]
    K = spec.n_classes
    low = rng.random(count) < spec.noise_rate
    wrong = rng.random(count) < 0.5
    # uniform over the other classes
    other = rng.integers(0, max(K - 1, 1), size=count)
    other = np.where(other >= class_id, other + 1, other) if K > 1 else np.full(count, class_id)
    eps = rng.standard_normal((count, *shape))

    src = np.where(low & wrong, other, class_id)
    scale = np.where(low & ~wrong, spec.widen * spec.spread, spec.spread)
    x = spec.class_means[src] + scale.reshape(-1, *([1] * len(shape))) * eps
    q = np.clip(class_posterior(spec, x)[:, class_id], 0.0, 1.0)
    return [Sample(x[k], class_id, True, float(q[k]), id_start + k) for k in range(count)]


def filter_by_quality(samples: Sequence[Sample], threshold: float) -> list[Sample]:
    return [s for s in samples if s.quality >= threshold]


def load_external(manifest_path: str | Path) -> list[Sample]:
    """Ingest externally generated synthetic data (manifest + blob)."""
    return read_dataset(manifest_path)


class UnmeetableTargetError(RuntimeError):
    pass


def generate_complement(spec: GenSpec, needed: Sequence[int], id_start: int,
                        max_rounds: int = 50) -> list[Sample]:
    """Generate and quality-filter until each class has ``needed[c]`` survivors."""
    out: list[Sample] = []
    next_id = id_start
    for c, need in enumerate(needed):
        kept: list[Sample] = []
        for rnd in range(max_rounds):
            missing = need - len(kept)
            if missing <= 0:
                break
            # over-draw a little so typical filter rates finish in one round
            draw = max(missing + missing // 2, 4)
            batch = generate_class_samples(spec, c, draw, rngmod.stream(spec.seed, "generate", c, rnd), next_id)
            next_id += draw
            kept.extend(filter_by_quality(batch, spec.quality_threshold)[:missing])
        if len(kept) < need:
            raise UnmeetableTargetError(
                f"class {c}: only {len(kept)} of {need} synthetic samples passed "
                f"quality threshold {spec.quality_threshold} after {max_rounds} rounds")
        out.extend(kept)
    return out
