"""Confidence-threshold selection from held-out classifier outputs.

For each component m the calibration set yields a table of (confidence,
correct) pairs. With T_m(d) the subset at confidence >= d, gamma_m(d) its
correct count, and alpha_m(d) = gamma/|T| (0 on the empty set), the threshold
for a tolerated accuracy drop eps is the smallest candidate d such that
alpha_m(d) >= alpha*_m - eps, where alpha*_m is the maximum of alpha over the
candidate grid. Candidates are the observed confidences plus 0; alpha is a
right-continuous step function, so nothing between observed values can do
better.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .cascade import CascadeModel, ThresholdVector, cascade_logits
from .nn import softmax

EVAL_BATCH = 512


@dataclass(frozen=True)
class CalibrationTable:
    """Sorted confidence/correctness statistics for one component.

    deltas holds the distinct observed confidences in descending order;
    counts[i] and corrects[i] are |T_m(deltas[i])| and gamma_m(deltas[i]),
    i.e. cumulative totals over everything at least as confident. Duplicate
    confidences are merged into one step.
    """
    deltas: np.ndarray    # float64, strictly descending
    counts: np.ndarray    # int64, strictly increasing
    corrects: np.ndarray  # int64, non-decreasing
    n: int

    @staticmethod
    def from_records(deltas: np.ndarray, correct: np.ndarray) -> "CalibrationTable":
        if deltas.size == 0:
            raise ValueError("calibration table needs at least one record")
        if deltas.shape != correct.shape:
            raise ValueError(f"{deltas.shape} confidences vs {correct.shape} flags")
        uniq, inverse = np.unique(np.asarray(deltas, dtype=np.float64),
                                  return_inverse=True)
        per_count = np.bincount(inverse, minlength=uniq.size)
        per_correct = np.bincount(inverse, weights=correct.astype(np.float64),
                                  minlength=uniq.size)
        desc = uniq[::-1]
        counts = np.cumsum(per_count[::-1])
        corrects = np.cumsum(per_correct[::-1]).astype(np.int64)
        return CalibrationTable(desc, counts.astype(np.int64), corrects,
                                int(deltas.size))

    def _step_index(self, delta: float) -> int:
        """Index of the smallest observed confidence >= delta, or -1 if none."""
        ascending = self.deltas[::-1]
        pos = int(np.searchsorted(ascending, delta, side="left"))
        if pos == ascending.size:
            return -1
        return self.deltas.size - 1 - pos

    def support(self, delta: float) -> int:
        i = self._step_index(delta)
        return 0 if i < 0 else int(self.counts[i])

    def alpha(self, delta: float) -> float:
        """Accuracy over the records at confidence >= delta; 0 if none qualify."""
        if not 0.0 <= delta <= 1.0:
            raise ValueError(f"delta must be in [0, 1], got {delta}")
        i = self._step_index(delta)
        if i < 0:
            return 0.0
        return float(self.corrects[i]) / float(self.counts[i])

    def _grid_alphas(self) -> np.ndarray:
        """alpha at every observed confidence, in the table's descending order.

        alpha(0) needs no extra entry: T(0) is the full set, which is exactly
        the last cumulative row.
        """
        return self.corrects.astype(np.float64) / self.counts.astype(np.float64)

    def alpha_star(self) -> float:
        return float(self._grid_alphas().max())

    def threshold_for_epsilon(self, epsilon: float) -> float:
        """Smallest candidate threshold keeping accuracy within epsilon of the peak."""
        if epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {epsilon}")
        alphas = self._grid_alphas()
        target = self.alpha_star() - epsilon
        if alphas[-1] >= target:  # the full set qualifies, so candidate 0 wins
            return 0.0
        feasible = np.flatnonzero(alphas >= target)
        # non-empty: the alpha*-attaining grid point always qualifies
        return float(self.deltas[feasible[-1]])

    def grid(self) -> np.ndarray:
        """The candidate thresholds: observed confidences plus 0, ascending."""
        return np.concatenate(([0.0], self.deltas[::-1]))


@dataclass(frozen=True)
class CalibrationResult:
    epsilon: float
    thresholds: ThresholdVector
    alpha_star: Tuple[float, ...]
    support_at_threshold: Tuple[int, ...]
    support_at_alpha_star: Tuple[int, ...]
    set_size: int
    grids: Tuple[np.ndarray, ...]

    def report_lines(self) -> List[str]:
        lines = [f"calibration set size: {self.set_size}",
                 f"epsilon: {self.epsilon:.9g}"]
        for m, thr in enumerate(self.thresholds.values):
            lines.append(
                f"component {m}: alpha_star={self.alpha_star[m]:.9g} "
                f"(support {self.support_at_alpha_star[m]}) "
                f"threshold={thr:.9g} (support {self.support_at_threshold[m]}, "
                f"grid size {self.grids[m].size})")
        return lines


def table_from_logits(logits: np.ndarray, labels: np.ndarray) -> CalibrationTable:
    probs = softmax(logits, axis=1)
    preds = np.argmax(probs, axis=1)
    deltas = probs[np.arange(len(preds)), preds]
    return CalibrationTable.from_records(deltas, preds == labels)


def build_table(model: CascadeModel, m: int, images: np.ndarray,
                labels: np.ndarray, batch_size: int = EVAL_BATCH) -> CalibrationTable:
    """Eval-mode (confidence, correctness) table for component m alone."""
    if images.shape[0] == 0:
        raise ValueError("calibration set is empty")
    logits = cascade_logits(model, images, batch_size, up_to=m)[m]
    return table_from_logits(logits, labels)


def build_tables(model: CascadeModel, images: np.ndarray, labels: np.ndarray,
                 batch_size: int = EVAL_BATCH) -> List[CalibrationTable]:
    """Tables for every component from one shared trunk pass."""
    if images.shape[0] == 0:
        raise ValueError("calibration set is empty")
    return [table_from_logits(z, labels)
            for z in cascade_logits(model, images, batch_size)]


def thresholds_from_tables(tables: List[CalibrationTable],
                           epsilon: float) -> Tuple[ThresholdVector, CalibrationResult]:
    """Pick per-component thresholds; the last component is pinned to 0."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    chosen = [t.threshold_for_epsilon(epsilon) for t in tables[:-1]] + [0.0]
    vec = ThresholdVector(tuple(chosen))
    stars = [t.alpha_star() for t in tables]
    star_support = [t.support(float(t.deltas[np.argmax(t._grid_alphas())]))
                    for t in tables]
    result = CalibrationResult(
        epsilon=epsilon, thresholds=vec, alpha_star=tuple(stars),
        support_at_threshold=tuple(t.support(d) for t, d in zip(tables, chosen)),
        support_at_alpha_star=tuple(star_support), set_size=tables[0].n,
        grids=tuple(t.grid() for t in tables))
    return vec, result


def calibrate(model: CascadeModel, images: np.ndarray, labels: np.ndarray,
              epsilon: float,
              batch_size: int = EVAL_BATCH) -> Tuple[ThresholdVector, CalibrationResult]:
    """Full calibration pass: build tables, then choose thresholds for epsilon.

    Model weights are read, never written; recalibrating for a different
    epsilon reuses the same tables via thresholds_from_tables.
    """
    tables = build_tables(model, images, labels, batch_size)
    return thresholds_from_tables(tables, epsilon)
