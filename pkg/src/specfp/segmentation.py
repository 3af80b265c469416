"""Fixed-length overlapping windows over a trace, with per-window mean removal."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .errors import ValidationError
from .traces import PacketTrace


def stride_for(seg_len: int, overlap: float) -> int:
    """stride = round(seg_len * (1 - overlap)), floored at 1.

    Rounding is half-up so that the stride is stable across platforms.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValidationError(f"overlap {overlap} outside [0, 1)")
    if seg_len < 1:
        raise ValidationError(f"seg_len {seg_len} < 1")
    return max(1, int(math.floor(seg_len * (1.0 - overlap) + 0.5)))


@dataclass(frozen=True)
class SegmentationParams:
    seg_len: int
    overlap: float

    def __post_init__(self):
        stride_for(self.seg_len, self.overlap)  # validates both fields

    @property
    def stride(self) -> int:
        return stride_for(self.seg_len, self.overlap)


@dataclass(frozen=True, eq=False)
class Segment:
    device_id: int
    segment_index: int
    start: int
    values: np.ndarray
    centered: bool = False
    segment_mean: float | None = None


def segment_count(n: int, params: SegmentationParams) -> int:
    return (n - params.seg_len) // params.stride + 1


def segment_trace(trace: PacketTrace, params: SegmentationParams) -> list[Segment]:
    """Windows [i*stride, i*stride + seg_len) for i = 0..floor((N-L)/s).

    Trailing packets that do not fill a window are dropped.
    """
    n = trace.count
    if n < params.seg_len:
        raise ValidationError(
            f"trace too short: {n} packets < seg_len {params.seg_len}"
        )
    data = np.asarray(trace.lengths, dtype=np.float64)
    stride = params.stride
    segments = []
    for i in range(segment_count(n, params)):
        start = i * stride
        segments.append(
            Segment(
                device_id=trace.device_id,
                segment_index=i,
                start=start,
                values=data[start : start + params.seg_len].copy(),
            )
        )
    return segments


def mean_center(segment: Segment) -> Segment:
    """Subtract the window's own mean. Centering twice is a pipeline bug."""
    if segment.centered:
        raise ValidationError(
            f"segment {segment.device_id}/{segment.segment_index} already centered"
        )
    mean = float(segment.values.mean())
    return Segment(
        device_id=segment.device_id,
        segment_index=segment.segment_index,
        start=segment.start,
        values=segment.values - mean,
        centered=True,
        segment_mean=mean,
    )


def write_segment_manifest(segments: Iterable[Segment], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["device_id", "segment_index", "start", "mean"])
    for seg in segments:
        mean = seg.segment_mean if seg.centered else float(seg.values.mean())
        writer.writerow([seg.device_id, seg.segment_index, seg.start, f"{mean:.6f}"])
