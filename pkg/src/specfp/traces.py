"""Packet-length trace ingestion.

The on-disk format is a trace CSV with the exact header
``device_id,device_name,packet_index,length_bytes`` and one row per packet.
Rows for one device must appear in ascending packet_index order; devices may
interleave. Device ids must be dense 0..n_devices-1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable

from .errors import ParseError, ValidationError

TRACE_HEADER = ("device_id", "device_name", "packet_index", "length_bytes")


@dataclass(frozen=True)
class PacketTrace:
    """One device's ordered packet-length sequence, lengths in bytes."""

    device_id: int
    device_name: str
    lengths: tuple[int, ...]

    def __post_init__(self):
        if self.device_id < 0:
            raise ValidationError(f"device_id {self.device_id} is negative")
        if len(self.lengths) == 0:
            raise ValidationError(f"device {self.device_id}: empty trace")
        if min(self.lengths) < 1:
            raise ValidationError(
                f"device {self.device_id}: packet lengths must be >= 1 byte"
            )

    @property
    def count(self) -> int:
        return len(self.lengths)


@dataclass(frozen=True)
class TraceStats:
    """Per-device summary in the shape of a device-statistics table row."""

    device_id: int
    device_name: str
    count: int
    mean_bytes: float
    std_bytes: float
    cv: float
    min_bytes: int
    max_bytes: int


def parse_traces(stream: Iterable[str]) -> list[PacketTrace]:
    """Parse a trace-CSV text stream into one PacketTrace per device.

    Raises ParseError naming the offending line, or ValidationError for
    structural problems (non-dense device ids, empty devices).
    """
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input, expected trace-CSV header", line=1)
    if tuple(h.strip() for h in header) != TRACE_HEADER:
        raise ParseError(
            f"bad header {header!r}, expected {','.join(TRACE_HEADER)}", line=1
        )

    names: dict[int, str] = {}
    lengths: dict[int, list[int]] = {}
    last_index: dict[int, int] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", line=line)
        try:
            dev = int(row[0])
            idx = int(row[2])
            size = int(row[3])
        except ValueError as exc:
            raise ParseError(f"non-integer field: {exc}", line=line) from None
        if size < 1:
            raise ParseError(f"length_bytes {size} < 1", line=line)
        if dev in last_index and idx <= last_index[dev]:
            raise ParseError(
                f"packet_index {idx} not ascending for device {dev}", line=line
            )
        last_index[dev] = idx
        names.setdefault(dev, row[1])
        lengths.setdefault(dev, []).append(size)

    if not lengths:
        return []
    ids = sorted(lengths)
    if ids != list(range(len(ids))):
        raise ValidationError(f"device ids {ids} are not dense 0..{len(ids) - 1}")
    return [
        PacketTrace(device_id=d, device_name=names[d], lengths=tuple(lengths[d]))
        for d in ids
    ]


def load_traces(path) -> list[PacketTrace]:
    with open(path, newline="") as fh:
        return parse_traces(fh)


def write_traces(traces: Iterable[PacketTrace], stream: IO[str]) -> None:
    """Serialize traces to trace-CSV with LF line endings."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for trace in traces:
        for i, size in enumerate(trace.lengths):
            writer.writerow([trace.device_id, trace.device_name, i, size])


def save_traces(traces: Iterable[PacketTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        write_traces(traces, fh)


def trace_stats(trace: PacketTrace) -> TraceStats:
    """Summary statistics over one trace. Std is the population form."""
    n = trace.count
    if n < 2:
        raise ValidationError(
            f"device {trace.device_id}: insufficient data ({n} packets, need >= 2)"
        )
    mean = math.fsum(trace.lengths) / n
    var = math.fsum((v - mean) ** 2 for v in trace.lengths) / n
    std = math.sqrt(var)
    return TraceStats(
        device_id=trace.device_id,
        device_name=trace.device_name,
        count=n,
        mean_bytes=mean,
        std_bytes=std,
        cv=std / mean,
        min_bytes=min(trace.lengths),
        max_bytes=max(trace.lengths),
    )


def write_stats_csv(stats: Iterable[TraceStats], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(
        ["device_id", "device_name", "count", "mean_bytes", "std_bytes",
         "cv", "min_bytes", "max_bytes"]
    )
    for s in stats:
        writer.writerow(
            [s.device_id, s.device_name, s.count,
             f"{s.mean_bytes:.6f}", f"{s.std_bytes:.6f}", f"{s.cv:.6f}",
             s.min_bytes, s.max_bytes]
        )
