"""Scalar training objectives.  Every loss is a mean over the batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from skd.errors import ConfigError, ContractError, DimensionError
from skd.tensor import Tensor, exp, gather, log_softmax, mul, softmax, sqrt

KD_DIRECTIONS = ("teacher_to_student", "student_to_teacher")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    beta: float = 0.1
    temperature: float = 4.0
    kd_direction: str = "teacher_to_student"
    kd_t2_scaling: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be nonnegative, got {self.alpha}, {self.beta}")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ConfigError(f"kd_direction must be one of {KD_DIRECTIONS}")


def _check_labels(logits: Tensor, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ContractError(f"labels must lie in [0, {n})")
    return labels


def cross_entropy(p: Tensor, y) -> Tensor:
    """Mean negative log-softmax at the true label."""
    y = _check_labels(p, y, p.shape[1])
    return -gather(log_softmax(p), y).mean()


def self_supervision_loss(q: Tensor, r) -> Tensor:
    """4-way softmax cross-entropy on the rotation (or quadrant) logits."""
    if q.ndim != 2 or q.shape[1] != 4:
        raise DimensionError(f"pretext logits must be [N,4], got {q.shape}")
    return cross_entropy(q, r)


def kd_loss(p_s: Tensor, p_t, temperature: float = 4.0,
            direction: str = "teacher_to_student", t2_scaling: bool = True) -> Tensor:
    """Batch-mean KL between temperature-softened teacher and student distributions.

    Teacher logits are treated as constants.  ``teacher_to_student`` computes
    KL(teacher || student).  With ``t2_scaling`` the result is multiplied by
    T**2 so gradient magnitudes do not shrink as T grows.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    t_data = p_t.data if isinstance(p_t, Tensor) else np.asarray(p_t, dtype=p_s.dtype)
    if t_data.shape != p_s.shape:
        raise DimensionError(f"student {p_s.shape} and teacher {t_data.shape} logits differ in shape")
    inv_t = 1.0 / temperature
    log_ps = log_softmax(mul(p_s, inv_t))
    t_scaled = t_data * inv_t
    log_pt = t_scaled - t_scaled.max(axis=1, keepdims=True)
    log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=1, keepdims=True))
    if direction == "teacher_to_student":
        pt = softmax(t_scaled)
        per_row = (mul(log_ps, -pt) + pt * log_pt).sum(axis=1)
    elif direction == "student_to_teacher":
        per_row = (exp(log_ps) * (log_ps - log_pt)).sum(axis=1)
    else:
        raise ContractError(f"unknown kd direction {direction!r}")
    loss = per_row.mean()
    return loss * (temperature ** 2) if t2_scaling else loss


def l2_pair_loss(p_s: Tensor, p_bar_s: Tensor) -> Tensor:
    """Batch mean of the Euclidean distance between paired rows."""
    if p_s.shape != p_bar_s.shape or p_s.ndim != 2:
        raise DimensionError(f"paired logits must share a 2-D shape, got {p_s.shape} and {p_bar_s.shape}")
    diff = p_s - p_bar_s
    return sqrt((diff * diff).sum(axis=1)).mean()


def gen0_terms(p_hat: Tensor, y_hat, q_hat: Tensor, r_hat, alpha: float) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, ce, ss); the pretext branch is skipped entirely when alpha == 0."""
    ce = cross_entropy(p_hat, y_hat)
    if p_hat.shape[0] != q_hat.shape[0]:
        raise DimensionError("class and pretext logits must cover the same batch")
    if alpha == 0:
        return ce, ce, None
    ss = self_supervision_loss(q_hat, r_hat)
    return ce + ss * alpha, ce, ss


def gen0_loss(p_hat: Tensor, y_hat, q_hat: Tensor, r_hat, alpha: float) -> Tensor:
    return gen0_terms(p_hat, y_hat, q_hat, r_hat, alpha)[0]


def gen1_terms(p_s: Tensor, p_t, p_bar_s: Tensor, beta: float, temperature: float,
               direction: str = "teacher_to_student", t2_scaling: bool = True) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, kd, l2); the pair term is skipped when beta == 0."""
    kd = kd_loss(p_s, p_t, temperature, direction, t2_scaling)
    if beta == 0:
        return kd, kd, None
    l2 = l2_pair_loss(p_s, p_bar_s)
    return kd + l2 * beta, kd, l2


def gen1_loss(p_s: Tensor, p_t, p_bar_s: Tensor, beta: float, temperature: float,
              direction: str = "teacher_to_student", t2_scaling: bool = True) -> Tensor:
    return gen1_terms(p_s, p_t, p_bar_s, beta, temperature, direction, t2_scaling)[0]
