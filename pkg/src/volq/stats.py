"""Accuracy, confusion matrices and McNemar's test for paired classifiers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


@dataclass
class Confusion:
    accuracy: float
    # matrix[truth][prediction]
    matrix: list[list[int]]


def accuracy_confusion(preds: Sequence[int], truths: Sequence[int]) -> Confusion:
    p, t = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"need equal-length non-empty label vectors, got {p.shape} and {t.shape}")
    m = [[int(np.sum((t == i) & (p == j))) for j in (0, 1)] for i in (0, 1)]
    return Confusion(float(np.mean(p == t)), m)


@dataclass
class McNemarResult:
    b: int
    c: int
    statistic: float
    p_value: float
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


METHODS = ("exact", "chi2_corrected")


def mcnemar(b: int, c: int, method: str = "exact") -> McNemarResult:
    """McNemar's test on the discordant counts.

    ``b``: A right and B wrong; ``c``: A wrong and B right.

    exact
        Two-sided binomial test, ``p = min(1, 2 * P(X <= min(b, c)))`` with
        ``X ~ Bin(b + c, 1/2)``. The statistic is ``min(b, c)``.
    chi2_corrected
        ``max(|b - c| - 1, 0)^2 / (b + c)``, upper tail of chi-square with one
        degree of freedom via ``erfc(sqrt(x / 2))``.

    ``b = c = 0`` gives ``p = 1`` for both.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if method == "exact":
        if n == 0:
            return McNemarResult(b, c, 0.0, 1.0, method)
        k = min(b, c)
        tail = sum(math.comb(n, i) for i in range(k + 1))
        # int / int true division is correctly rounded even for huge n
        p = min(1.0, 2 * tail / 2 ** n)
        return McNemarResult(b, c, float(k), p, method)
    if method == "chi2_corrected":
        if n == 0:
            return McNemarResult(b, c, 0.0, 1.0, method)
        stat = max(abs(b - c) - 1, 0) ** 2 / n
        return McNemarResult(b, c, float(stat), float(math.erfc(math.sqrt(stat / 2))), method)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def discordant_counts(truth: Sequence[int], pred_a: Sequence[int], pred_b: Sequence[int]) -> tuple[int, int]:
    t, a, b = (np.asarray(v, dtype=np.int64) for v in (truth, pred_a, pred_b))
    if not (t.shape == a.shape == b.shape) or t.size == 0:
        raise ValueError("paired predictions must cover the same non-empty image set")
    for v in (t, a, b):
        if np.any((v != 0) & (v != 1)):
            raise ValueError("labels and predictions must be 0 or 1")
    ok_a, ok_b = a == t, b == t
    return int(np.sum(ok_a & ~ok_b)), int(np.sum(~ok_a & ok_b))


def compare(truth: Sequence[int], pred_a: Sequence[int], pred_b: Sequence[int],
            method: str = "exact") -> dict:
    """The comparison report: both accuracies plus the McNemar result."""
    b, c = discordant_counts(truth, pred_a, pred_b)
    res = mcnemar(b, c, method)
    return {
        "accuracy_a": accuracy_confusion(pred_a, truth).accuracy,
        "accuracy_b": accuracy_confusion(pred_b, truth).accuracy,
        **res.to_dict(),
    }
