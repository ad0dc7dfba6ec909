"""Off-diagonal similarity distillation from a frozen previous-stage teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import similarity_matrix
from .diffcore import (
    ParameterError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    log_softmax_array,
    mul,
    row_log_softmax,
    scalar_mul,
    sub,
    sum_all,
)
from .encoders import TeacherSnapshot, encode_images, encode_texts


@dataclass(frozen=True)
class DistillConfig:
    lambda_weight: float = 1.0
    distill_temperature: float = 1.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ParameterError("lambda_weight must be >= 0")
        if not self.distill_temperature > 0:
            raise ParameterError("distill_temperature must be > 0")


def teacher_similarity(teacher: TeacherSnapshot, images, texts) -> Tensor:
    """Similarity matrix through the frozen teacher; never on the tape."""
    p = teacher.params
    return similarity_matrix(encode_images(p, images), encode_texts(p, texts))


def row_correction(s_teacher, s_student) -> np.ndarray:
    """Replace teacher rows whose diagonal is not the row maximum.

    Replaced rows are copied from the student values and carry no gradient.
    A diagonal that ties with the maximum counts as maximal.
    """
    t = as_tensor(s_teacher).data
    s = as_tensor(s_student).data
    if t.shape != s.shape or t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ShapeError(f"row_correction: {t.shape} vs {s.shape}")
    diag_is_max = np.diagonal(t) >= t.max(axis=1)
    return np.where(diag_is_max[:, None], t, s)


def corrected_rows(s_teacher) -> np.ndarray:
    """Boolean mask of rows that row_correction would replace."""
    t = as_tensor(s_teacher).data
    return np.diagonal(t) < t.max(axis=1)


def odid_loss(s_student, s_teacher_corrected, distill_temperature: float = 1.0) -> Tensor:
    """Row-averaged KL(P || Q) between softmaxed teacher and student rows."""
    if not distill_temperature > 0:
        raise ParameterError(f"distill_temperature must be positive, got {distill_temperature}")
    s_student = as_tensor(s_student)
    target = as_tensor(s_teacher_corrected).data
    if target.shape != s_student.shape:
        raise ShapeError(f"odid_loss: {s_student.shape} vs {target.shape}")
    n = target.shape[0]
    inv_t = 1.0 / distill_temperature
    log_p = log_softmax_array(target * inv_t)
    p = np.exp(log_p)
    log_q = row_log_softmax(scalar_mul(s_student, inv_t))
    kl = sum_all(mul(Tensor(p), sub(Tensor(log_p), log_q)))
    return scalar_mul(kl, 1.0 / n)


def total_loss(clip: Tensor, odid: Tensor, cfg: DistillConfig) -> Tensor:
    return add(clip, scalar_mul(odid, cfg.lambda_weight))
