"""External classification metrics with optimal label alignment."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError

BRUTE_FORCE_MAX = 8


@dataclass(frozen=True)
class ConfusionReport:
    """Aligned confusion matrix (rows: true classes, columns: matched predictions).

    ``purity`` averages, over non-empty true classes, the share of the class
    found in its matched predicted class.
    """

    matrix: np.ndarray
    misclassification: float
    purity: float
    ari: float
    true_classes: tuple
    predicted_classes: tuple

    @property
    def n(self) -> int:
        return int(self.matrix.sum())

    def per_class_error(self) -> np.ndarray:
        rows = self.matrix.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return 1.0 - np.diag(self.matrix)[: rows.size] / rows


def contingency(a, b):
    """Contingency table of two labelings plus the sorted class values."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("label vectors must be 1-d and of equal length")
    ca, ia = np.unique(a, return_inverse=True)
    cb, ib = np.unique(b, return_inverse=True)
    C = np.zeros((ca.size, cb.size), dtype=np.int64)
    np.add.at(C, (ia, ib), 1)
    return C, tuple(ca.tolist()), tuple(cb.tolist())


def best_permutation(C: np.ndarray) -> np.ndarray:
    """Column order maximizing the trace of a square matrix.

    Exhaustive for size <= 8, Hungarian assignment otherwise; ties resolve to
    the lexicographically first permutation in the exhaustive case.
    """
    C = np.asarray(C, dtype=float)
    m = C.shape[0]
    if C.shape != (m, m):
        raise InputError("best_permutation needs a square matrix")
    if m <= BRUTE_FORCE_MAX:
        best, best_val = None, -np.inf
        idx = np.arange(m)
        for perm in itertools.permutations(range(m)):
            val = C[idx, perm].sum()
            if val > best_val:
                best, best_val = perm, val
        return np.array(best, dtype=int)
    _, cols = linear_sum_assignment(-C)
    return cols


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table."""
    C, _, _ = contingency(a, b)
    n = C.sum()
    if n < 2:
        return 1.0
    index = _comb2(C).sum()
    sa = _comb2(C.sum(axis=1)).sum()
    sb = _comb2(C.sum(axis=0)).sum()
    expected = sa * sb / _comb2(n)
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def confusion_report(true_labels, predicted_labels) -> ConfusionReport:
    """Align predicted classes to true classes, then score the partition."""
    C, tc, pc = contingency(true_labels, predicted_labels)
    kt, kp = C.shape
    m = max(kt, kp)
    sq = np.zeros((m, m), dtype=np.int64)
    sq[:kt, :kp] = C
    perm = best_permutation(sq)
    aligned = sq[:, perm][:kt]
    n = int(C.sum())
    rows = aligned.sum(axis=1)
    diag = np.diag(aligned)
    nonempty = rows > 0
    purity = float(np.mean(diag[nonempty] / rows[nonempty]))
    pred_order = tuple(pc[j] if j < kp else None for j in perm)
    return ConfusionReport(
        matrix=aligned,
        misclassification=1.0 - diag.sum() / n,
        purity=purity,
        ari=adjusted_rand_index(true_labels, predicted_labels),
        true_classes=tc,
        predicted_classes=pred_order,
    )


def align_posteriors(reference: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Column order of ``other`` that best matches ``reference`` by soft overlap."""
    overlap = np.asarray(reference).T @ np.asarray(other)
    return best_permutation(overlap)
