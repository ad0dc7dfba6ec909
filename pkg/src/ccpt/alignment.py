"""Cosine similarity matrix and the symmetric InfoNCE loss."""

from __future__ import annotations

from .diffcore import (
    ParameterError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    divide_by,
    l2_normalize_rows,
    matmul,
    row_log_softmax,
    scalar_mul,
    trace,
    transpose,
)


def similarity_matrix(images, texts) -> Tensor:
    """S[i, j] = cos(images[i], texts[j]) for two N x D embedding batches."""
    images, texts = as_tensor(images), as_tensor(texts)
    if images.shape != texts.shape or images.data.ndim != 2:
        raise ShapeError(f"similarity_matrix: {images.shape} vs {texts.shape}")
    return matmul(l2_normalize_rows(images), transpose(l2_normalize_rows(texts)))


def clip_loss(sim, tau) -> Tensor:
    """Mean of the image->text and text->image InfoNCE terms.

    ``tau`` is a positive float or a scalar tensor (learnable temperature).
    """
    sim = as_tensor(sim)
    n = sim.shape[0]
    if sim.data.ndim != 2 or sim.shape[1] != n:
        raise ShapeError(f"clip_loss expects a square matrix, got {sim.shape}")
    if isinstance(tau, Tensor):
        logits = divide_by(sim, tau)
    else:
        if not tau > 0:
            raise ParameterError(f"temperature must be positive, got {tau}")
        logits = scalar_mul(sim, 1.0 / tau)
    rows = trace(row_log_softmax(logits))
    cols = trace(row_log_softmax(transpose(logits)))
    return scalar_mul(add(rows, cols), -1.0 / (2 * n))
