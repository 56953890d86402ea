"""Contrastive and triplet losses with batch-online triplet mining."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class MiningError(ValueError):
    pass


class MiningMode(str, enum.Enum):
    SEMI_HARD = "semihard"
    HARD = "hard"
    ALL_VALID = "allvalid"


class TripletKind(str, enum.Enum):
    EASY = "easy"
    HARD = "hard"
    SEMI_HARD = "semihard"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    mining_mode: MiningMode = MiningMode.SEMI_HARD

    def __post_init__(self):
        object.__setattr__(self, "mining_mode", MiningMode(self.mining_mode))
        if not self.margin >= 0:
            raise ValueError("margin must be >= 0")


class Triplet(NamedTuple):
    anchor_idx: int
    positive_idx: int
    negative_idx: int


def pair_distance(e1, e2) -> float:
    """Squared Euclidean distance ``||e1 - e2||^2``."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError(f"dimension mismatch: {e1.shape} vs {e2.shape}")
    diff = e1 - e2
    return float(diff @ diff)


def pairwise_distances(emb: np.ndarray) -> np.ndarray:
    """All squared Euclidean distances between rows.

    Computed from explicit differences rather than the Gram expansion, so the
    diagonal is exactly zero and nothing goes negative.
    """
    diff = emb[:, None, :] - emb[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def contrastive_loss(d: float, y: int, cfg: LossConfig) -> float:
    """Contrastive loss for one pair at distance ``d``.

    ``y`` is 0 for a same-label pair and 1 for a different-label pair.
    """
    if y not in (0, 1):
        raise ValueError("pair label must be 0 (same class) or 1 (different class)")
    hinge = max(0.0, cfg.margin - d)
    return (1 - y) * d * d + y * hinge * hinge


def triplet_loss(d_ap: float, d_an: float, cfg: LossConfig) -> float:
    return max(d_ap - d_an + cfg.margin, 0.0)


def classify_triplet(d_ap: float, d_an: float, margin: float) -> TripletKind:
    """Place a triplet in the easy / hard / semi-hard taxonomy.

    Distances exactly on a category edge (``d_an == d_ap`` or
    ``d_an == d_ap + margin``) belong to none of the three and are reported
    as ``BOUNDARY``.
    """
    if d_ap + margin < d_an:
        return TripletKind.EASY
    if d_an < d_ap:
        return TripletKind.HARD
    if d_ap < d_an < d_ap + margin:
        return TripletKind.SEMI_HARD
    return TripletKind.BOUNDARY


def _label_keys(labels: Sequence) -> np.ndarray:
    keys = {}
    return np.array([keys.setdefault(lab, len(keys)) for lab in labels], dtype=np.int64)


def check_batch(labels: Sequence) -> np.ndarray:
    """Validate the batch composition and return integer label codes."""
    if len(labels) < 3:
        raise MiningError("batch needs at least 3 samples")
    codes = _label_keys(labels)
    counts = np.bincount(codes)
    if len(counts) < 2:
        raise MiningError("batch needs at least two distinct labels")
    if counts.max() < 2:
        raise MiningError("batch has no positive pairs")
    return codes


def select_triplets(dist: np.ndarray, labels: Sequence, mode: MiningMode) -> list[Triplet]:
    """Mine triplets from a precomputed squared-distance matrix.

    For every ordered (anchor, positive) pair with ``anchor != positive``:

    * ``SEMI_HARD`` keeps the closest negative that is still farther than
      the positive; when no such negative exists it falls back to the
      farthest remaining negative (the easiest hard one).
    * ``HARD`` keeps the closest negative.
    * ``ALL_VALID`` keeps every negative.

    Ties go to the lowest negative index.
    """
    mode = MiningMode(mode)
    codes = check_batch(labels)
    same = codes[:, None] == codes[None, :]
    pos_mask = same & ~np.eye(len(codes), dtype=bool)
    anchors, positives = np.nonzero(pos_mask)
    if mode is MiningMode.ALL_VALID:
        out = []
        for a, p in zip(anchors, positives):
            out.extend(Triplet(int(a), int(p), int(n)) for n in np.flatnonzero(~same[a]))
        return out

    # (pair, candidate negative) grid; non-negatives are masked to +/-inf
    d_an = dist[anchors]
    is_neg = ~same[anchors]
    if mode is MiningMode.HARD:
        chosen = np.argmin(np.where(is_neg, d_an, np.inf), axis=1)
    else:
        d_ap = dist[anchors, positives][:, None]
        farther = is_neg & (d_an > d_ap)
        semi = np.argmin(np.where(farther, d_an, np.inf), axis=1)
        fallback = np.argmax(np.where(is_neg, d_an, -np.inf), axis=1)
        chosen = np.where(farther.any(axis=1), semi, fallback)
    return [Triplet(int(a), int(p), int(n)) for a, p, n in zip(anchors, positives, chosen)]


def triplet_losses(dist: np.ndarray, triplets: Sequence[Triplet], margin: float) -> np.ndarray:
    if not triplets:
        return np.zeros(0)
    t = np.asarray(triplets, dtype=np.int64)
    return np.maximum(dist[t[:, 0], t[:, 1]] - dist[t[:, 0], t[:, 2]] + margin, 0.0)


def mine_batch(embeddings: np.ndarray, labels: Sequence, cfg: LossConfig) -> tuple[list[Triplet], float]:
    """Mine triplets from a batch of embeddings and return them with their mean loss."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(labels):
        raise MiningError("embeddings must be a (B, E) matrix with one label per row")
    dist = pairwise_distances(embeddings)
    triplets = select_triplets(dist, labels, cfg.mining_mode)
    return triplets, float(np.mean(triplet_losses(dist, triplets, cfg.margin)))
