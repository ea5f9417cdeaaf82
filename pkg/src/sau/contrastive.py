"""Synthetic-aware branch: supervised contrastive losses, KNN label correction
and class prototypes.

All four contrastive objectives share one kernel. For anchor ``i`` with
positive set ``P(i)`` and denominator set ``D(i)`` (both exclude ``i``)::

    l_i = -1/|P(i)| * sum_{j in P(i)} [ z_i.z_j / tau - log sum_{k in D(i)} exp(z_i.z_k / tau) ]

and the loss is the sum of ``l_i`` over the anchor set. The variants differ
only in which points are anchors, positives and denominator terms. Noise
points are marked by negative labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

NO_MAJORITY = -(2 ** 31)
PROTOTYPE_MIN_NORM = 1e-8


class EmptyPositiveSetError(ValueError):
    pass


@dataclass
class Embeddings:
    z: object  # ndarray or autodiff Tensor, (M, d) unit rows
    labels: np.ndarray
    tau: float = 0.1
    is_synthetic: np.ndarray | None = None
    is_prototype: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        m = len(self.labels)
        if self.is_synthetic is None:
            self.is_synthetic = np.zeros(m, dtype=bool)
        if self.is_prototype is None:
            self.is_prototype = np.zeros(m, dtype=bool)
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if ad.as_tensor(self.z).shape[0] != m:
            raise ValueError("embedding rows and labels disagree in length")

    @property
    def noise(self) -> np.ndarray:
        return self.labels < 0


@dataclass
class PrototypeSet:
    P: np.ndarray
    valid: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.flatnonzero(self.valid)

    @property
    def rows(self) -> np.ndarray:
        return self.P[self.valid]


@dataclass
class CorrectionResult:
    y_new: np.ndarray
    noise_count: int
    next_noise_id: int = -1
    noise_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _contrastive(z, anchors: np.ndarray, pos: np.ndarray, den: np.ndarray, tau: float) -> ad.Tensor:
    z = ad.as_tensor(z)
    idx = np.flatnonzero(anchors)
    if len(idx) == 0:
        return ad.Tensor(np.array(0.0))
    pos, den = pos[idx], den[idx]
    npos = pos.sum(axis=1)
    if np.any(npos == 0):
        bad = idx[npos == 0].tolist()
        raise EmptyPositiveSetError(f"anchors {bad} have no positives")
    sims = (z[idx] @ z.T) / tau
    lse = ad.masked_logsumexp(sims, den, axis=1)
    mean_pos = (sims * pos).sum(axis=1) / npos
    return (lse - mean_pos).sum()


def _masks(labels: np.ndarray):
    m = len(labels)
    same = labels[:, None] == labels[None, :]
    other = ~np.eye(m, dtype=bool)
    return same, other


def supcon_loss(emb: Embeddings) -> ad.Tensor:
    same, other = _masks(emb.labels)
    return _contrastive(emb.z, np.ones(len(emb.labels), bool), same & other, other, emb.tau)


def _with_protos(emb: Embeddings, prototypes) -> Embeddings:
    if prototypes is None:
        return emb
    if isinstance(prototypes, PrototypeSet):
        prototypes = [prototypes]
    return append_prototypes(emb, *prototypes)


def loss_l1(emb: Embeddings, prototypes=None) -> ad.Tensor:
    """Noise points are dropped everywhere: not anchors, positives or negatives."""
    emb = _with_protos(emb, prototypes)
    same, other = _masks(emb.labels)
    clean = ~emb.noise
    keep = other & clean[None, :]
    return _contrastive(emb.z, clean, same & keep, keep, emb.tau)


def loss_l2(emb: Embeddings, prototypes=None) -> ad.Tensor:
    """Each noise sample forms its own class through its unique negative label."""
    return supcon_loss(_with_protos(emb, prototypes))


def loss_l3(emb: Embeddings, prototypes=None) -> ad.Tensor:
    """Noise points only ever appear as negatives in the denominator."""
    emb = _with_protos(emb, prototypes)
    same, other = _masks(emb.labels)
    clean = ~emb.noise
    return _contrastive(emb.z, clean, same & other & clean[None, :], other, emb.tau)


LOSSES = {"L1": loss_l1, "L2": loss_l2, "L3": loss_l3}


def overall_loss(l_mixup, l_cutmix, l_sc, weights=(1.0, 1.0, 1.0)):
    lam, beta, gamma = weights
    if min(weights) < 0:
        raise ValueError("loss weights must be non-negative")
    return lam * l_mixup + beta * l_cutmix + gamma * l_sc


# -- prototypes --------------------------------------------------------------

def compute_prototypes(z_real: np.ndarray, y_real: Sequence[int], n_classes: int) -> PrototypeSet:
    z_real = np.asarray(z_real, dtype=np.float64)
    y_real = np.asarray(y_real, dtype=np.int64)
    d = z_real.shape[1] if z_real.ndim == 2 else 0
    P = np.zeros((n_classes, d))
    valid = np.zeros(n_classes, dtype=bool)
    for c in range(n_classes):
        rows = z_real[y_real == c]
        if len(rows) == 0:
            continue
        mu = rows.mean(axis=0)
        norm = np.linalg.norm(mu)
        if norm < PROTOTYPE_MIN_NORM:
            continue
        P[c] = mu / norm
        valid[c] = True
    return PrototypeSet(P, valid)


def append_prototypes(emb: Embeddings, *proto_sets: PrototypeSet) -> Embeddings:
    rows = [ps.rows for ps in proto_sets]
    labels = [ps.labels for ps in proto_sets]
    n = sum(len(r) for r in rows)
    if n == 0:
        return emb
    z = ad.concat([ad.as_tensor(emb.z), ad.Tensor(np.concatenate(rows))], axis=0)
    if not isinstance(emb.z, ad.Tensor):
        z = z.data
    return Embeddings(
        z=z,
        labels=np.concatenate([emb.labels, *labels]),
        tau=emb.tau,
        is_synthetic=np.concatenate([emb.is_synthetic, np.zeros(n, bool)]),
        is_prototype=np.concatenate([emb.is_prototype, np.ones(n, bool)]),
    )


# -- label correction --------------------------------------------------------

def knn_correct(z_syn: np.ndarray, z_ref: np.ndarray, y_ref: Sequence[int], k: int = 5) -> np.ndarray:
    """Plurality label among each query's min(k, |ref|) nearest references.

    Ties for the top count yield ``NO_MAJORITY``. Distance ties at the k-th
    place are broken arbitrarily.
    """
    z_syn = np.atleast_2d(np.asarray(z_syn, dtype=np.float64))
    z_ref = np.asarray(z_ref, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.int64)
    if len(z_ref) == 0:
        raise ValueError("knn_correct needs a non-empty reference set")
    if len(z_syn) == 0 or z_syn.size == 0:
        return np.zeros(0, dtype=np.int64)
    kk = min(k, len(z_ref))
    d2 = (z_syn ** 2).sum(1)[:, None] + (z_ref ** 2).sum(1)[None, :] - 2.0 * z_syn @ z_ref.T
    if kk < len(z_ref):
        cand = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
    else:
        cand = np.broadcast_to(np.arange(len(z_ref)), d2.shape)
    nb_labels = y_ref[cand]
    counts = (nb_labels[:, :, None] == nb_labels[:, None, :]).sum(axis=2)
    top = counts.max(axis=1)
    winner = nb_labels[np.arange(len(nb_labels)), counts.argmax(axis=1)]
    # exactly one label reaches the top count iff `top` slots carry it
    unique_top = (counts == top[:, None]).sum(axis=1) == top
    return np.where(unique_top, winner, NO_MAJORITY).astype(np.int64)


def relabel(y_org: Sequence[int], y_cor_view2: Sequence[int], y_cor_view3: Sequence[int],
            next_noise_id: int = -1) -> CorrectionResult:
    """Keep a label only when both views' corrections agree with it.

    Disagreeing samples get fresh negative labels next_noise_id,
    next_noise_id - 1, ...; the returned label applies to both views.
    """
    if next_noise_id >= 0:
        raise ValueError("noise ids must be negative")
    y_org = np.asarray(y_org, dtype=np.int64)
    keep = (np.asarray(y_cor_view2) == y_org) & (np.asarray(y_cor_view3) == y_org)
    noise = ~keep
    n = int(noise.sum())
    y_new = y_org.copy()
    y_new[noise] = next_noise_id - np.arange(n)
    return CorrectionResult(y_new, n, next_noise_id - n, noise)
