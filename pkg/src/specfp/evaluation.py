"""Classification metrics, bootstrap confidence intervals, the factorial
configuration grid, and cross-configuration (out-of-distribution) evaluation.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .segmentation import SegmentationParams
from .traces import PacketTrace

METHODS = ("STFT", "CWT")
RESOLUTIONS = (16, 32, 64)
SWEEP_SEG_LENS = (100, 500)
SWEEP_OVERLAPS = (0.0, 0.5)
OOD_SEG_LENS = (100, 200, 500)
OOD_OVERLAPS = (0.0, 0.25, 0.5, 0.75)


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the method x resolution x seg_len x overlap factorial."""

    method: str
    resolution: int
    seg_len: int
    overlap: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method {self.method!r} not in {METHODS}")


def enumerate_configs() -> list[ExperimentConfig]:
    """Full factorial in fixed order: method (STFT then CWT), then R,
    seg_len, overlap, each ascending. 2*3*2*2 = 24 configs."""
    return [
        ExperimentConfig(method, r, seg_len, overlap)
        for method, r, seg_len, overlap in itertools.product(
            METHODS, RESOLUTIONS, SWEEP_SEG_LENS, SWEEP_OVERLAPS
        )
    ]


def _check_streams(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValidationError(
            f"prediction/label shape mismatch: {preds.shape} vs {labels.shape}"
        )
    if preds.size == 0:
        raise ValidationError("empty prediction stream")
    return preds, labels


def accuracy(preds, labels) -> float:
    """Percent correct."""
    preds, labels = _check_streams(preds, labels)
    return 100.0 * float((preds == labels).mean())


def confusion_matrix(preds, labels, num_classes: int | None = None) -> np.ndarray:
    """Rows = true class, columns = predicted class."""
    preds, labels = _check_streams(preds, labels)
    if num_classes is None:
        num_classes = int(max(preds.max(), labels.max())) + 1
    matrix = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(matrix, (labels, preds), 1)
    return matrix


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


def per_class_metrics(preds, labels, num_classes: int | None = None) -> list[ClassMetrics]:
    matrix = confusion_matrix(preds, labels, num_classes)
    out = []
    for c in range(matrix.shape[0]):
        tp = int(matrix[c, c])
        fp = int(matrix[:, c].sum()) - tp
        fn = int(matrix[c, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append(ClassMetrics(precision, recall, f1, support=tp + fn))
    return out


def weighted_f1(preds, labels) -> float:
    """Support-weighted mean of per-class F1 (weights n_c / N)."""
    preds, labels = _check_streams(preds, labels)
    metrics = per_class_metrics(preds, labels)
    n = preds.size
    return float(sum(m.support / n * m.f1 for m in metrics))


def bootstrap_ci(
    preds, labels, resamples: int = 1000, level: float = 0.95, seed: int = 0
) -> tuple[float, float, float]:
    """Percentile bootstrap over accuracy: (low, high, width), all in
    percentage points."""
    preds, labels = _check_streams(preds, labels)
    if resamples < 100:
        raise ValidationError(f"resamples {resamples} < 100")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level {level} outside (0, 1)")
    hits = (preds == labels).astype(np.float64)
    n = hits.size
    rng = np.random.Generator(np.random.PCG64(seed))
    accs = np.empty(resamples)
    for i in range(resamples):
        accs[i] = hits[rng.integers(0, n, n)].mean() * 100.0
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(accs, [tail, 100.0 - tail], method="linear")
    return float(low), float(high), float(high - low)


@dataclass(frozen=True, eq=False)
class EvalReport:
    accuracy_pct: float
    weighted_f1: float
    ci_low: float
    ci_high: float
    ci_width_pct: float
    per_class: tuple[ClassMetrics, ...]
    confusion: np.ndarray
    n_test: int


def evaluate(
    preds,
    labels,
    num_classes: int | None = None,
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> EvalReport:
    """Full report over a prediction stream for one configuration."""
    preds, labels = _check_streams(preds, labels)
    matrix = confusion_matrix(preds, labels, num_classes)
    low, high, width = bootstrap_ci(preds, labels, resamples, level, seed)
    return EvalReport(
        accuracy_pct=accuracy(preds, labels),
        weighted_f1=weighted_f1(preds, labels),
        ci_low=low,
        ci_high=high,
        ci_width_pct=width,
        per_class=tuple(per_class_metrics(preds, labels, matrix.shape[0])),
        confusion=matrix,
        n_test=preds.size,
    )


def write_report_csv(report: EvalReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["accuracy_pct", "weighted_f1", "ci_low", "ci_high",
                     "ci_width_pct", "n_test"])
    writer.writerow([repr(report.accuracy_pct), repr(report.weighted_f1),
                     repr(report.ci_low), repr(report.ci_high),
                     repr(report.ci_width_pct), report.n_test])


def write_per_class_csv(report: EvalReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["class", "precision", "recall", "f1", "support"])
    for c, m in enumerate(report.per_class):
        writer.writerow([c, f"{m.precision:.6f}", f"{m.recall:.6f}",
                         f"{m.f1:.6f}", m.support])


def write_confusion_csv(report: EvalReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    size = report.confusion.shape[0]
    writer.writerow(["true\\pred"] + [str(c) for c in range(size)])
    for c in range(size):
        writer.writerow([c] + [int(v) for v in report.confusion[c]])


@dataclass(frozen=True)
class SweepRow:
    """One factorial-sweep result, percent units throughout."""

    config: ExperimentConfig
    train_pct: float
    val_pct: float
    test_pct: float
    weighted_f1: float
    ci_width_pct: float


def write_sweep_csv(rows: Sequence[SweepRow], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["method", "resolution", "seg_len", "overlap",
                     "train_pct", "val_pct", "test_pct", "weighted_f1",
                     "ci_width_pct"])
    for row in rows:
        c = row.config
        writer.writerow([c.method, c.resolution, c.seg_len, repr(c.overlap),
                         f"{row.train_pct:.4f}", f"{row.val_pct:.4f}",
                         f"{row.test_pct:.4f}", f"{row.weighted_f1:.6f}",
                         f"{row.ci_width_pct:.4f}"])


@dataclass(frozen=True)
class CrossCell:
    seg_len: int
    overlap: float
    n_segments: int
    accuracy_pct: float
    matched: bool


@dataclass(frozen=True)
class CrossConfigReport:
    cells: tuple[CrossCell, ...]
    max_gap: float  # max - min accuracy over all cells
    spread_by_seg_len: tuple[tuple[int, float], ...]  # per-row overlap spread


def cross_config_eval(
    pipeline,
    traces: Sequence[PacketTrace],
    ood_start: Mapping[int, int] | int,
    seg_lens: Sequence[int] = OOD_SEG_LENS,
    overlaps: Sequence[float] = OOD_OVERLAPS,
) -> CrossConfigReport:
    """Evaluate a trained pipeline on every (seg_len, overlap) cell using
    trace suffixes starting at ood_start, which must lie at or past the end
    of the region the pipeline was fitted on.

    The pipeline keeps its trained method/resolution, percentile bounds and
    channel stats; only segmentation changes per cell.
    """
    starts: dict[int, int] = {}
    for trace in traces:
        start = ood_start if isinstance(ood_start, int) else ood_start[trace.device_id]
        fitted_end = pipeline.main_region_end.get(trace.device_id)
        if fitted_end is None:
            raise ValidationError(f"pipeline never saw device {trace.device_id}")
        if start < fitted_end:
            raise ValidationError(
                f"device {trace.device_id}: OOD region starts at {start}, "
                f"inside the fitted region [0, {fitted_end})"
            )
        if trace.count - start < max(seg_lens):
            raise ValidationError(
                f"device {trace.device_id}: OOD region too short "
                f"({trace.count - start} packets, need >= {max(seg_lens)})"
            )
        starts[trace.device_id] = start

    trained = pipeline.seg_params
    cells = []
    for seg_len in seg_lens:
        for overlap in overlaps:
            params = SegmentationParams(seg_len=seg_len, overlap=overlap)
            preds = []
            labels = []
            for trace in traces:
                suffix = PacketTrace(
                    device_id=trace.device_id,
                    device_name=trace.device_name,
                    lengths=trace.lengths[starts[trace.device_id] :],
                )
                p = pipeline.classify_trace(suffix, params)
                preds.append(p)
                labels.append(np.full(p.size, trace.device_id))
            preds = np.concatenate(preds)
            labels = np.concatenate(labels)
            cells.append(CrossCell(
                seg_len=seg_len,
                overlap=overlap,
                n_segments=preds.size,
                accuracy_pct=accuracy(preds, labels),
                matched=(seg_len == trained.seg_len and overlap == trained.overlap),
            ))
    accs = [c.accuracy_pct for c in cells]
    spreads = []
    for seg_len in seg_lens:
        row = [c.accuracy_pct for c in cells if c.seg_len == seg_len]
        spreads.append((seg_len, max(row) - min(row)))
    return CrossConfigReport(
        cells=tuple(cells),
        max_gap=max(accs) - min(accs),
        spread_by_seg_len=tuple(spreads),
    )


def write_crossconfig_grid_csv(report: CrossConfigReport, stream: IO[str]) -> None:
    """Table-style grid: one accuracy column per (seg_len, overlap) cell,
    plus a marker naming the in-distribution cell."""
    writer = csv.writer(stream, lineterminator="\n")
    header = [f"L{c.seg_len}_p{int(round(c.overlap * 100))}" for c in report.cells]
    matched = [h for h, c in zip(header, report.cells) if c.matched]
    writer.writerow(header + ["matched_cell"])
    writer.writerow([f"{c.accuracy_pct:.4f}" for c in report.cells]
                    + [matched[0] if matched else "none"])


def write_crossconfig_cells_csv(report: CrossConfigReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["seg_len", "overlap", "n_segments", "accuracy_pct", "matched"])
    for c in report.cells:
        writer.writerow([c.seg_len, c.overlap, c.n_segments,
                         f"{c.accuracy_pct:.4f}", int(c.matched)])
    writer.writerow([])
    writer.writerow(["summary", "max_gap", f"{report.max_gap:.4f}", "", ""])
    for seg_len, spread in report.spread_by_seg_len:
        writer.writerow(["summary", f"spread_L{seg_len}", f"{spread:.4f}", "", ""])
