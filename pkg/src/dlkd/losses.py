"""Teacher/student cross-entropy, soft-target KL and the weighted student total.

Batched inputs ([N,K] logits) reduce by the arithmetic mean over samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dlkd.errors import InputError, ParameterError, ShapeError
from dlkd.tensor import Tensor, _log_softmax_np, _softmax_np, as_tensor, log_softmax


@dataclass(frozen=True)
class LossWeights:
    """alpha scales the ground-truth term, beta the distillation term.

    No T**2 gradient rescaling is applied when temperature != 1.
    """

    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta > 0:
            raise ParameterError(f"need alpha, beta >= 0 with alpha + beta > 0, got {self.alpha}, {self.beta}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")


def cross_entropy(logits, labels):
    logits = as_tensor(logits)
    k = logits.shape[-1]
    labels_arr = np.asarray(labels)
    if labels_arr.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels_arr.shape} does not match logits {logits.shape}")
    if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= k):
        raise InputError(f"label out of range [0, {k}): {labels}")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return -logp[int(labels_arr)]
    picked = logp[np.arange(logits.shape[0]), labels_arr]
    return -picked.mean()


def kl_soft_targets(teacher_logits, student_logits, temperature=1.0):
    """KL(p_teacher || q_student) on temperature softmaxes; teacher side is a constant."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    student_logits = as_tensor(student_logits)
    teacher = np.asarray(
        teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
        dtype=student_logits.dtype,
    )
    if teacher.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {teacher.shape} vs student logits {student_logits.shape}")
    p = _softmax_np(teacher / temperature)
    log_p = _log_softmax_np(teacher / temperature)
    log_q = log_softmax(student_logits, temperature)
    per_class = (log_q * -1.0 + log_p) * p
    if student_logits.ndim == 1:
        return per_class.sum()
    return per_class.sum(axis=-1).mean()


def student_total_loss(l_ar, l_kd, weights):
    return l_ar * weights.alpha + l_kd * weights.beta
