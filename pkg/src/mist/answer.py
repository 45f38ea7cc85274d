"""Similarity-based answer head.

The pooled model output is matched against the answer bank by dot product
(optionally cosine), trained with softmax cross-entropy, and answered by
the argmax row. Ties resolve to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import AnswerBank
from .numerics import (
    ShapeMismatch,
    Tensor,
    cross_entropy,
    matmul,
    mul,
    power,
    reshape,
    tsum,
)


@dataclass
class Prediction:
    """Argmax answer with its score vector."""

    index: int
    label: str
    scores: np.ndarray


def _unit(x: Tensor, axis: int) -> Tensor:
    n2 = tsum(mul(x, x), axis=axis, keepdims=True)
    if np.any(n2.data <= 0):
        raise ValueError("cosine scoring needs non-zero vectors")
    return mul(x, power(n2, -0.5))


def score_answers(x_o: Tensor, bank: AnswerBank, cosine: bool = False) -> Tensor:
    """Dot product of the pooled output against every answer row, (A,)."""
    if x_o.data.ndim != 1:
        raise ShapeMismatch("pooled output must be a vector")
    d = x_o.shape[0]
    if bank.a.shape[1] != d:
        raise ShapeMismatch(f"answer bank width {bank.a.shape[1]} != output width {d}")
    out = x_o
    rows = bank.a
    if cosine:
        out = reshape(_unit(reshape(out, (1, d)), -1), (d,))
        rows = _unit(rows, -1)
    return reshape(matmul(rows, reshape(out, (d, 1))), (bank.a.shape[0],))


def qa_loss(scores: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy against the true answer index."""
    return cross_entropy(scores, label)


def predict(scores: Tensor, bank: AnswerBank) -> Prediction:
    """Highest-scoring answer; ties take the lowest index."""
    if scores.shape[0] != bank.a.shape[0]:
        raise ShapeMismatch("score vector does not match the answer bank")
    idx = int(np.argmax(scores.data))
    return Prediction(idx, bank.labels[idx], scores.data.copy())
