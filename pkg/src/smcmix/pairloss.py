"""Positive-pair taxonomy for blended samples and the training losses.

Pair sets are held as boolean (n, n) matrices; row ``i`` describes anchor
``i``. A pair can be foreground- and background-shared at once; the
cross-shared set is whatever shares a class without being either.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .mixer import MixRecord
from .tensor import ContractViolation, Tensor

logger = logging.getLogger(__name__)

SCHEMES = ("weighted", "averaging", "assign-larger")
PAIR_TYPES = ("f", "b", "c")


@dataclass(frozen=True)
class PairSets:
    fg_shared: np.ndarray
    bg_shared: np.ndarray
    cross_shared: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.fg_shared)

    def sets(self, i: int) -> dict[str, list[int]]:
        return {
            "F": np.flatnonzero(self.fg_shared[i]).tolist(),
            "B": np.flatnonzero(self.bg_shared[i]).tolist(),
            "C": np.flatnonzero(self.cross_shared[i]).tolist(),
            "N": np.flatnonzero(self.negatives[i]).tolist(),
        }

    def masks(self) -> dict[str, np.ndarray]:
        return {"f": self.fg_shared, "b": self.bg_shared, "c": self.cross_shared}


@dataclass(frozen=True)
class LossWeights:
    w_f: float
    w_b: float
    w_c: float


def _classes(records: Sequence[MixRecord]) -> tuple[np.ndarray, np.ndarray]:
    fg = np.array([r.fg_class for r in records])
    bg = np.array([r.bg_class for r in records])
    return fg, bg


def classify_pairs(records: Sequence[MixRecord]) -> PairSets:
    if len(records) < 2:
        raise ContractViolation("pair classification needs at least two samples")
    fg, bg = _classes(records)
    off = ~np.eye(len(records), dtype=bool)
    same_fg = fg[:, None] == fg[None, :]
    same_bg = bg[:, None] == bg[None, :]
    shares = same_fg | same_bg | (fg[:, None] == bg[None, :]) | (bg[:, None] == fg[None, :])
    f = same_fg & off
    b = same_bg & off
    c = shares & ~same_fg & ~same_bg & off
    n = ~shares & off
    return PairSets(f, b, c, n)


def loss_weights(lam: float) -> LossWeights:
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"combination ratio {lam} outside [0, 1]")
    return LossWeights(lam / 1.5, (1.0 - lam) / 1.5, 0.5 / 1.5)


def _type_weights(records: Sequence[MixRecord], scheme: str) -> dict[str, np.ndarray]:
    n = len(records)
    if scheme == "averaging":
        third = np.full(n, 1.0 / 3.0)
        return {"f": third, "b": third, "c": third}
    lam = np.array([r.lambda_effective for r in records])
    return {"f": lam / 1.5, "b": (1.0 - lam) / 1.5, "c": np.full(n, 0.5 / 1.5)}


def pair_weight_matrix(pairsets: PairSets, records: Sequence[MixRecord], scheme: str = "weighted") -> np.ndarray:
    """Constant (n, n) weights so that the loss equals -sum(W * log p).

    Each pair type contributes w_t(i) / (|A_t| * |P_t(i)|) per positive,
    where A_t is the set of anchors with at least one type-t positive.
    """
    if scheme not in SCHEMES:
        raise ContractViolation(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if scheme == "assign-larger":
        fg, bg = _classes(records)
        lam = np.array([r.lambda_effective for r in records])
        labels = np.where(lam >= 0.5, fg, bg)
        return supcon_weight_matrix(labels)
    weights = np.zeros((len(records), len(records)))
    per_anchor = _type_weights(records, scheme)
    for t, mask in pairsets.masks().items():
        size = mask.sum(axis=1)
        anchors = size > 0
        if not anchors.any():
            continue
        scale = np.where(anchors, per_anchor[t] / np.maximum(size, 1), 0.0) / anchors.sum()
        weights += mask * scale[:, None]
    return weights


def supcon_weight_matrix(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    size = pos.sum(axis=1)
    anchors = size > 0
    if not anchors.any():
        return np.zeros(pos.shape)
    return pos * (np.where(anchors, 1.0 / np.maximum(size, 1), 0.0) / anchors.sum())[:, None]


def contrastive_from_weights(embeddings: Tensor, weights: np.ndarray, tau: float) -> Tensor:
    """-sum_ij W_ij log softmax_{j != i}(z_i . z_j / tau)."""
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    n = embeddings.shape[0]
    if n < 2:
        raise ContractViolation("contrastive loss needs at least two samples")
    sim = T.matmul(embeddings, embeddings, transpose_b=True) * (1.0 / tau)
    logp = T.log_softmax(sim, axis=1, where=~np.eye(n, dtype=bool))
    return T.sum(T.mask_apply(logp, weights)) * -1.0


def smc_loss(
    embeddings: Tensor,
    pairsets: PairSets,
    records: Sequence[MixRecord],
    tau: float = 0.1,
    scheme: str = "weighted",
) -> Tensor:
    """Mixed-class supervised contrastive loss over unit-norm embeddings.

    The softmax denominator for anchor ``i`` runs over the whole batch
    except ``i``. The foreground/background weights come from the
    anchor's own realized combination ratio.
    """
    weights = pair_weight_matrix(pairsets, records, scheme)
    if not weights.any():
        logger.info("smc_loss: no positive pairs in batch, loss is 0")
    return contrastive_from_weights(embeddings, weights, tau)


def smc_loss_variant(embeddings, pairsets, records, tau: float = 0.1, scheme: str = "weighted") -> Tensor:
    return smc_loss(embeddings, pairsets, records, tau, scheme)


def balanced_ce(logits: Tensor, soft_labels, log_prior=None) -> Tensor:
    """Soft-target cross-entropy on prior-shifted logits, averaged over the batch.

    With ``log_prior`` None this is plain soft-target cross-entropy.
    """
    soft_labels = np.asarray(soft_labels, dtype=np.float64)
    if soft_labels.shape != logits.shape:
        raise ContractViolation(f"labels {soft_labels.shape} do not match logits {logits.shape}")
    z = logits if log_prior is None else T.add(logits, np.asarray(log_prior, dtype=np.float64))
    logp = T.log_softmax(z, axis=1)
    return T.sum(T.mask_apply(logp, soft_labels)) * (-1.0 / logits.shape[0])


def total_loss(l_bce: Tensor, l_smc: Tensor, eta: float = 0.1) -> Tensor:
    if eta < 0:
        raise ContractViolation("eta must be nonnegative")
    return T.add(l_bce, T.multiply(l_smc, eta))
