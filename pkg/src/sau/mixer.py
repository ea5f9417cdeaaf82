"""MixUp, CutMix and the mixed cross-entropy used by the classification branch.

Soft labels are kept as ``(y_i, y_j, lam)`` triples: the target distribution
puts mass ``lam`` on ``y_i`` and ``1 - lam`` on ``y_j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class MixRatio:
    lam: float
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("mix ratio must lie in [0, 1]")


@dataclass
class CutBox:
    r_x: float
    r_y: float
    r_w: float
    r_h: float
    # clipped integer pixel bounds, half-open: rows [y0, y1), cols [x0, x1)
    x0: int
    y0: int
    x1: int
    y1: int
    W: int
    H: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def area_ratio(self) -> float:
        return self.area / float(self.W * self.H)


@dataclass
class MixedExample:
    x_tilde: np.ndarray
    y_i: int
    y_j: int
    lam_label: float


def sample_mix_ratio(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError("Beta concentration must be positive")
    return float(rng.beta(alpha, alpha))


def mixup(x_i, y_i, x_j, y_j, lam: float) -> MixedExample:
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return MixedExample(lam * x_i + (1.0 - lam) * x_j, y_i, y_j, float(lam))


def make_box(W: int, H: int, lam: float, r_x: float, r_y: float) -> CutBox:
    r_w = W * np.sqrt(1.0 - lam)
    r_h = H * np.sqrt(1.0 - lam)
    x0 = int(np.clip(np.round(r_x - r_w / 2), 0, W))
    x1 = int(np.clip(np.round(r_x + r_w / 2), 0, W))
    y0 = int(np.clip(np.round(r_y - r_h / 2), 0, H))
    y1 = int(np.clip(np.round(r_y + r_h / 2), 0, H))
    return CutBox(float(r_x), float(r_y), float(r_w), float(r_h), x0, y0, x1, y1, W, H)


def cutmix_box(W: int, H: int, lam: float, rng: np.random.Generator) -> CutBox:
    if W < 1 or H < 1:
        raise ValueError("image dimensions must be >= 1")
    r_x = rng.uniform(0, W)
    r_y = rng.uniform(0, H)
    return make_box(W, H, lam, r_x, r_y)


def spatial_dims(shape: tuple[int, ...]) -> tuple[int, int]:
    """(W, H) of a sample; a flat (D,) vector is a 1 x D strip."""
    if len(shape) == 1:
        return shape[0], 1
    return shape[-1], shape[-2]


def paste(x_i: np.ndarray, x_j: np.ndarray, box: CutBox, flat: bool = False) -> np.ndarray:
    """x_i with the box region replaced by x_j; works on (..., H, W) or flat (..., D)."""
    out = np.array(x_i, copy=True)
    if box.area == 0:
        return out
    if flat:
        out[..., box.x0:box.x1] = x_j[..., box.x0:box.x1]
    else:
        out[..., box.y0:box.y1, box.x0:box.x1] = x_j[..., box.y0:box.y1, box.x0:box.x1]
    return out


def cutmix(x_i, y_i, x_j, y_j, box: CutBox) -> MixedExample:
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    # label ratio follows the clipped box actually pasted
    return MixedExample(paste(x_i, x_j, box, flat=x_i.ndim == 1), y_i, y_j, 1.0 - box.area_ratio)


def cross_entropy(logits, target) -> ad.Tensor:
    """Per-row negative log-likelihood; ``target`` holds class indices."""
    lp = ad.log_softmax(logits, axis=-1)
    target = np.asarray(target)
    return -lp[np.arange(len(target)), target]


def mixed_ce_loss(logits, y_i, y_j=None, lam=None) -> ad.Tensor:
    """Batch-mean of lam * CE(y_i) + (1 - lam) * CE(y_j).

    Accepts either a single :class:`MixedExample` in place of the label
    arguments (1-d logits) or aligned label/ratio arrays (2-d logits).
    """
    if isinstance(y_i, MixedExample):
        m = y_i
        logits = ad.as_tensor(logits).reshape(1, -1)
        y_i, y_j, lam = [m.y_i], [m.y_j], [m.lam_label]
    logits = ad.as_tensor(logits)
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("lam_label must lie in [0, 1]")
    per_row = lam * cross_entropy(logits, y_i) + (1.0 - lam) * cross_entropy(logits, y_j)
    return per_row.mean()


def mix_batch(x1: np.ndarray, y1: np.ndarray, x2: np.ndarray, y2: np.ndarray,
              rng: np.random.Generator, alpha: float = 1.0):
    """One MixUp and one CutMix of two aligned batches, each with its own ratio.

    Returns ((x_mixup, y1, y2, lam_m), (x_cutmix, y1, y2, lam_c)) where lam_*
    are per-row arrays.
    """
    lam_m = sample_mix_ratio(alpha, rng)
    x_m = lam_m * x1 + (1.0 - lam_m) * x2
    lam_c = sample_mix_ratio(alpha, rng)
    W, H = spatial_dims(x1.shape[1:])
    box = cutmix_box(W, H, lam_c, rng)
    x_c = paste(x1, x2, box, flat=x1.ndim == 2)
    n = len(x1)
    return ((x_m, y1, y2, np.full(n, lam_m)),
            (x_c, y1, y2, np.full(n, 1.0 - box.area_ratio)))
