"""Cascade measurement: accuracy/speedup reports, epsilon sweeps, alpha
curves and confidence histograms, with CSV export.

Expected MACs are analytic counts from the spec's cost table, not wall-clock;
wall-clock is carried alongside as information only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import IO, List, Optional, Sequence, Tuple

import numpy as np

from .calibration import (CalibrationTable, build_table, build_tables,
                          thresholds_from_tables)
from .cascade import CascadeModel, ThresholdVector, cascade_logits
from .data import Dataset
from .nn import softmax

EVAL_BATCH = 512


@dataclass(frozen=True)
class CascadeEvalReport:
    thresholds: ThresholdVector
    accuracy: float
    expected_macs: float
    full_network_macs: int
    speedup: float
    exit_fractions: Tuple[float, ...]
    set_size: int
    epsilon: Optional[float] = None
    wall_clock_seconds: float = 0.0

    def report_lines(self) -> List[str]:
        lines = []
        if self.epsilon is not None:
            lines.append(f"epsilon: {self.epsilon:.9g}")
        lines.extend([
            f"thresholds: {tuple(self.thresholds.values)}",
            f"test accuracy: {self.accuracy:.9g}",
            f"expected MACs per inference: {self.expected_macs:.9g}",
            f"full-network MACs: {self.full_network_macs}",
            f"speedup: {self.speedup:.9g}",
            "exit fractions: " + ", ".join(
                f"component {m}: {f:.9g}" for m, f in enumerate(self.exit_fractions)),
            f"wall clock: {self.wall_clock_seconds:.3f}s",
        ])
        return lines


@dataclass(frozen=True)
class CurvePoint:
    epsilon: float
    accuracy: float
    expected_macs: float
    speedup: float


@dataclass(frozen=True)
class AlphaSample:
    delta: float
    alpha: float
    support: int


@dataclass(frozen=True)
class HistogramBin:
    component: int
    bin_lo: float
    bin_hi: float
    count: int


@dataclass(frozen=True)
class CascadeOutputs:
    """Per-input confidence and prediction of every component, eval mode.

    Row-for-row identical to what single-input runs produce, so exits under
    any threshold vector can be derived without re-running the network.
    """
    deltas: np.ndarray  # (N, n_m) float64
    preds: np.ndarray   # (N, n_m) int64

    @property
    def n(self) -> int:
        return self.deltas.shape[0]


def cascade_outputs(model: CascadeModel, images: np.ndarray,
                    batch_size: int = EVAL_BATCH) -> CascadeOutputs:
    all_logits = cascade_logits(model, images, batch_size)
    deltas = np.empty((images.shape[0], model.n_m), dtype=np.float64)
    preds = np.empty((images.shape[0], model.n_m), dtype=np.int64)
    for m, z in enumerate(all_logits):
        s = softmax(z, axis=1)
        preds[:, m] = np.argmax(s, axis=1)
        deltas[:, m] = s[np.arange(s.shape[0]), preds[:, m]]
    return CascadeOutputs(deltas, preds)


def exits_for(outputs: CascadeOutputs, thresholds: ThresholdVector) -> np.ndarray:
    """First component whose confidence reaches its threshold, per input."""
    n, n_m = outputs.deltas.shape
    if len(thresholds.values) != n_m:
        raise ValueError(f"{len(thresholds.values)} thresholds for {n_m} components")
    exits = np.full(n, n_m - 1, dtype=np.int64)
    undecided = np.ones(n, dtype=bool)
    for m, thr in enumerate(thresholds.values):
        fired = undecided & (outputs.deltas[:, m] >= thr)
        exits[fired] = m
        undecided &= ~fired
    return exits


def _report_from_exits(model: CascadeModel, thresholds: ThresholdVector,
                       outputs: CascadeOutputs, labels: np.ndarray,
                       epsilon: Optional[float], t0: float) -> CascadeEvalReport:
    table = model.mac_table()
    exits = exits_for(outputs, thresholds)
    final_preds = outputs.preds[np.arange(outputs.n), exits]
    accuracy = float((final_preds == labels).mean())
    per_exit = np.array([table.cumulative_macs(m) for m in range(model.n_m)],
                        dtype=np.int64)
    total_macs = int(per_exit[exits].sum())
    expected = total_macs / outputs.n
    fractions = tuple(float((exits == m).mean()) for m in range(model.n_m))
    return CascadeEvalReport(
        thresholds=thresholds, accuracy=accuracy, expected_macs=expected,
        full_network_macs=table.full_network_macs,
        speedup=table.full_network_macs / expected, exit_fractions=fractions,
        set_size=outputs.n, epsilon=epsilon,
        wall_clock_seconds=time.perf_counter() - t0)


def evaluate_cascade(model: CascadeModel, thresholds: ThresholdVector,
                     dataset: Dataset, batch_size: int = EVAL_BATCH,
                     epsilon: Optional[float] = None) -> CascadeEvalReport:
    """Early-termination accuracy, expected MACs and speedup over a set.

    Implemented by computing every component's output once and deriving the
    exits, which is arithmetic-identical to per-input early-exit runs.
    """
    if dataset.n == 0:
        raise ValueError("evaluation set is empty")
    t0 = time.perf_counter()
    outputs = cascade_outputs(model, dataset.images, batch_size)
    return _report_from_exits(model, thresholds, outputs, dataset.labels, epsilon, t0)


def sweep_epsilon(model: CascadeModel, calib_set: Dataset, test_set: Dataset,
                  epsilons: Sequence[float], batch_size: int = EVAL_BATCH,
                  ) -> List[Tuple[CurvePoint, ThresholdVector]]:
    """Calibrate and evaluate once per epsilon, in the order given.

    Calibration tables and test-set outputs are computed one time each; only
    the threshold selection and exit bookkeeping vary with epsilon.
    """
    if not len(epsilons):
        raise ValueError("epsilon list is empty")
    tables = build_tables(model, calib_set.images, calib_set.labels, batch_size)
    outputs = cascade_outputs(model, test_set.images, batch_size)
    points = []
    for eps in epsilons:
        t0 = time.perf_counter()
        vec, _ = thresholds_from_tables(tables, eps)
        report = _report_from_exits(model, vec, outputs, test_set.labels, eps, t0)
        points.append((CurvePoint(eps, report.accuracy, report.expected_macs,
                                  report.speedup), vec))
    return points


def alpha_curve(model: CascadeModel, m: int, dataset: Dataset, grid_size: int = 50,
                batch_size: int = EVAL_BATCH) -> List[AlphaSample]:
    """alpha_m(delta) on an even grid from 1/n_c to the highest observed
    confidence. Grid points with no qualifying inputs are omitted."""
    if grid_size < 2:
        raise ValueError(f"grid size must be >= 2, got {grid_size}")
    table = build_table(model, m, dataset.images, dataset.labels, batch_size)
    lo = 1.0 / model.n_c
    hi = float(table.deltas[0])
    grid = np.linspace(lo, min(max(hi, lo), 1.0), grid_size)
    samples = []
    for delta in grid:
        support = table.support(float(delta))
        if support == 0:
            continue
        samples.append(AlphaSample(float(delta), table.alpha(float(delta)), support))
    return samples


def confidence_histogram(model: CascadeModel, dataset: Dataset, bins: int = 20,
                         batch_size: int = EVAL_BATCH) -> List[HistogramBin]:
    """Counts of per-component confidences over equal bins spanning
    [1/n_c, 1], the range max-softmax values can occupy."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if dataset.n == 0:
        raise ValueError("evaluation set is empty")
    outputs = cascade_outputs(model, dataset.images, batch_size)
    lo = 1.0 / model.n_c
    edges = np.linspace(lo, 1.0, bins + 1)
    out = []
    for m in range(model.n_m):
        # float32 softmax can land a hair under 1/n_c; clip so every input lands in a bin
        deltas = np.clip(outputs.deltas[:, m], lo, 1.0)
        counts, _ = np.histogram(deltas, bins=edges)
        for b in range(bins):
            out.append(HistogramBin(m, float(edges[b]), float(edges[b + 1]),
                                    int(counts[b])))
    return out


# ---------------------------------------------------------------------------
# CSV export (9 significant digits, gnuplot-friendly layout)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_sweep_csv(points: Sequence[CurvePoint], out: IO[str]) -> None:
    out.write("epsilon,accuracy,expected_macs,speedup\n")
    for p in points:
        out.write(f"{_fmt(p.epsilon)},{_fmt(p.accuracy)},"
                  f"{_fmt(p.expected_macs)},{_fmt(p.speedup)}\n")


def write_alpha_csv(samples: Sequence[AlphaSample], out: IO[str]) -> None:
    out.write("delta,alpha,support\n")
    for s in samples:
        out.write(f"{_fmt(s.delta)},{_fmt(s.alpha)},{s.support}\n")


def write_hist_csv(hist: Sequence[HistogramBin], out: IO[str]) -> None:
    out.write("component,bin_lo,bin_hi,count\n")
    for b in hist:
        out.write(f"{b.component},{_fmt(b.bin_lo)},{_fmt(b.bin_hi)},{b.count}\n")
