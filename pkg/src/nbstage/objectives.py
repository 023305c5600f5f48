"""Training objectives and their weighted combination.

Every term is reduced with a mean over the cells of a batch.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .weak_label import N_STAGES, Stage

LOG_FLOOR = 1e-12
N_NEGATIVES = 5


@dataclass(frozen=True)
class LossWeights:
    weak: float = 0.1
    unique_stage: float = 0.3
    reconstruction: float = 1.0
    unique_topic: float = 1.0

    def __post_init__(self):
        if min(self.weak, self.unique_stage, self.reconstruction, self.unique_topic) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    total: float
    weak: float
    unique_stage: float
    reconstruction: float
    unique_topic: float
    batch_size: int
    n_supervised: int

    def to_log(self, step: int) -> dict:
        return {
            "step": step, "L": self.total, "L_ws": self.weak, "L_us": self.unique_stage,
            "L_rec": self.reconstruction, "L_ut": self.unique_topic,
        }


def _stage_targets(labels) -> np.ndarray:
    """One-hot rows; uncovered cells get an all-zero row."""
    stages = np.array([int(getattr(lab, "stage", lab)) for lab in labels])
    y = np.zeros((len(stages), N_STAGES))
    covered = stages != Stage.UNLABELED
    y[np.flatnonzero(covered), stages[covered]] = 1.0
    return y


def loss_weak(p_stage, labels, clamp_counter: list | None = None) -> Tensor:
    """Cross-entropy against weak labels; UNLABELED cells contribute zero."""
    p_stage = ad.as_tensor(p_stage)
    single = p_stage.ndim == 1
    if single:
        p_stage, labels = ad.reshape(p_stage, (1, -1)), [labels]
    y = _stage_targets(labels).astype(p_stage.dtype)
    hit = (p_stage.data < LOG_FLOOR) & (y > 0)
    if hit.any():
        if clamp_counter is not None:
            clamp_counter.append(int(hit.sum()))
        warnings.warn("probability of the labeled stage underflowed; log clamped", RuntimeWarning)
    per_cell = ad.sum(ad.log(p_stage, floor=LOG_FLOOR) * y, axis=-1) * -1.0
    return ad.mean(per_cell)


def loss_unique_stage(p_stage) -> Tensor:
    """Mean entropy of the stage distribution (natural log)."""
    p_stage = ad.as_tensor(p_stage)
    return ad.mean(ad.sum(ad.xlogx(p_stage), axis=-1) * -1.0)


def sample_negatives(batch_size: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """(batch_size, m) indices of other cells in the batch.

    Drawn without replacement when at least ``m`` other cells exist, with
    replacement otherwise.
    """
    if batch_size < 2:
        return np.zeros((batch_size, 0), dtype=np.int64)
    out = np.empty((batch_size, m), dtype=np.int64)
    for c in range(batch_size):
        others = np.delete(np.arange(batch_size), c)
        out[c] = rng.choice(others, size=m, replace=len(others) < m)
    return out


def loss_reconstruction(z, p_topic, R, negatives: np.ndarray, normalize: bool = True) -> Tensor:
    """Hinge loss pulling ``r = R p_topic`` toward ``z`` and away from other cells' ``r``.

    ``negatives[c]`` holds the batch indices of the negatives for cell ``c``.
    With ``normalize`` the dot products use unit vectors.
    """
    z, p_topic, R = (ad.as_tensor(t) for t in (z, p_topic, R))
    negatives = np.asarray(negatives, dtype=np.int64)
    if z.shape[0] < 2 or negatives.size == 0:
        warnings.warn("reconstruction loss needs at least two cells; returning 0", RuntimeWarning)
        return Tensor(np.zeros((), dtype=z.dtype))
    r = p_topic @ ad.transpose(R)
    if normalize:
        r, z = ad.l2_normalize(r), ad.l2_normalize(z)
    positive = ad.sum(r * z, axis=-1, keepdims=True)  # (B, 1)
    neg_r = r[negatives]  # (B, m, d)
    negative = ad.sum(neg_r * ad.reshape(r, (r.shape[0], 1, r.shape[1])), axis=-1)  # (B, m)
    hinge = ad.relu(1.0 - positive + negative)
    return ad.mean(ad.sum(hinge, axis=-1))


def loss_unique_topic(R) -> Tensor:
    """Frobenius distance of the normalized topic Gram matrix from the identity.

    Topic embeddings are the K columns of ``R`` (d_model x K).
    """
    R = ad.as_tensor(R)
    topics = ad.l2_normalize(ad.transpose(R))  # (K, d)
    gram = topics @ ad.transpose(topics)
    diff = gram - np.eye(gram.shape[0], dtype=gram.dtype)
    return ad.sqrt(ad.sum(diff * diff))


def total_loss(parts, weights: LossWeights = LossWeights()):
    """``weak, unique_stage, reconstruction, unique_topic`` combined by ``weights``."""
    weak, unique_stage, reconstruction, unique_topic = parts
    return (
        weights.weak * weak
        + weights.unique_stage * unique_stage
        + weights.reconstruction * reconstruction
        + weights.unique_topic * unique_topic
    )


def batch_objective(output, labels, R, negatives, weights: LossWeights,
                    normalize_hinge: bool = True):
    """Combined loss tensor and its report for one forward pass."""
    parts = (
        loss_weak(output.p_stage, labels),
        loss_unique_stage(output.p_stage),
        loss_reconstruction(output.z, output.p_topic, R, negatives, normalize_hinge),
        loss_unique_topic(R),
    )
    total = total_loss(parts, weights)
    report = LossReport(
        total=total.item(), weak=parts[0].item(), unique_stage=parts[1].item(),
        reconstruction=parts[2].item(), unique_topic=parts[3].item(),
        batch_size=len(labels),
        n_supervised=int(sum(getattr(lab, "stage", lab) != Stage.UNLABELED for lab in labels)),
    )
    return total, report

