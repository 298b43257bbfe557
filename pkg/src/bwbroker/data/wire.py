"""Byte-level encodings of broker messages.

All messages are little-endian. Usage reports and fabric limit pushes
share a 16-byte header::

    magic     u32   0x45455132 ("EEQ2")
    sender    u32   machine id (rack reports) or rack id (fabric messages)
    timestamp u64   microseconds

A usage report then carries a tx section and an rx section, each a u16
count followed by 8-byte entries of (service id u32, bits/s f32). A
limit push carries a single such section. Feedback packets are a fixed
16 bytes: (destination host u32, service id u32, rate in Kb/s u64). The
meter's own host is the packet's source address and is not repeated.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from bwbroker.core.machine_shaper import FeedbackPacket
from bwbroker.errors import MalformedReport
from bwbroker.utils.constants import (
    FEEDBACK_BYTES,
    KBPS,
    REPORT_ENTRY_BYTES,
    REPORT_HEADER_BYTES,
    REPORT_MAGIC,
)

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<IIQ")
_COUNT = struct.Struct("<H")
_FEEDBACK = struct.Struct("<IIQ")
_ENTRY = np.dtype([("service", "<u4"), ("value", "<f4")])

_MAX_ENTRIES = 0xFFFF

Entries = tuple[tuple[int, float], ...]


def _normalize(entries: Iterable[tuple[int, float]], what: str) -> Entries:
    # Values are carried as f32 on the wire; store them that way so that
    # decoding an encoded message gives back an equal object.
    items = sorted((int(service), float(np.float32(value))) for service, value in entries)
    services = [service for service, _ in items]
    if len(set(services)) != len(services):
        raise ValueError(f"Duplicate service ids in {what}")
    if any(not value >= 0 for _, value in items):
        raise ValueError(f"Negative or NaN rate in {what}")
    if len(items) > _MAX_ENTRIES:
        raise ValueError(f"{what} has {len(items)} entries, at most {_MAX_ENTRIES} fit")
    return tuple(items)


@dataclass(frozen=True)
class UsageReport:
    """Per-service usage measured over one broker interval.

    Attributes:
        sender: Reporting machine (or rack, for fabric reports).
        timestamp_us: Measurement time in microseconds.
        tx: (service, bits/s) sent, ascending by service.
        rx: (service, bits/s) received, ascending by service.
    """

    sender: int
    timestamp_us: int
    tx: Entries = ()
    rx: Entries = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tx", _normalize(self.tx, "tx section"))
        object.__setattr__(self, "rx", _normalize(self.rx, "rx section"))

    def tx_usage(self) -> dict[int, float]:
        return dict(self.tx)

    def rx_usage(self) -> dict[int, float]:
        return dict(self.rx)

    def to_bytes(self) -> bytes:
        return encode_report(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> UsageReport:
        return decode_report(data)


@dataclass(frozen=True)
class FabricLimits:
    """Per-service limits pushed by the fabric broker to one rack."""

    rack: int
    timestamp_us: int
    limits: Entries = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "limits", _normalize(self.limits, "limit push"))


def _encode_section(entries: Entries) -> bytes:
    arr = np.array(list(entries), dtype=_ENTRY) if entries else np.empty(0, dtype=_ENTRY)
    return _COUNT.pack(len(entries)) + arr.tobytes()


def _decode_section(data: bytes, offset: int) -> tuple[Entries, int]:
    if len(data) < offset + _COUNT.size:
        raise MalformedReport(f"Truncated section count at byte {offset}")
    (count,) = _COUNT.unpack_from(data, offset)
    offset += _COUNT.size
    end = offset + count * REPORT_ENTRY_BYTES
    if len(data) < end:
        raise MalformedReport(
            f"Section declares {count} entries but only {len(data) - offset} bytes remain"
        )
    arr = np.frombuffer(data, dtype=_ENTRY, count=count, offset=offset)
    return tuple((int(s), float(v)) for s, v in zip(arr["service"], arr["value"])), end


def _decode_header(data: bytes) -> tuple[int, int]:
    if len(data) < REPORT_HEADER_BYTES:
        raise MalformedReport(f"Message of {len(data)} bytes is shorter than its header")
    magic, sender, timestamp = _HEADER.unpack_from(data, 0)
    if magic != REPORT_MAGIC:
        raise MalformedReport(f"Bad magic 0x{magic:08x}")
    return sender, timestamp


def encode_report(report: UsageReport) -> bytes:
    return (
        _HEADER.pack(REPORT_MAGIC, report.sender, report.timestamp_us)
        + _encode_section(report.tx)
        + _encode_section(report.rx)
    )


def decode_report(data: bytes) -> UsageReport:
    """Parse a usage report.

    Raises:
        MalformedReport: On truncation, bad magic, trailing bytes or bad entries.
    """
    sender, timestamp = _decode_header(data)
    tx, offset = _decode_section(data, REPORT_HEADER_BYTES)
    rx, offset = _decode_section(data, offset)
    if offset != len(data):
        raise MalformedReport(f"{len(data) - offset} trailing bytes after report")
    try:
        return UsageReport(sender, timestamp, tx, rx)
    except ValueError as e:
        logger.error("Rejecting report from %d: %s", sender, e)
        raise MalformedReport(str(e)) from e


def encode_limits(push: FabricLimits) -> bytes:
    return _HEADER.pack(REPORT_MAGIC, push.rack, push.timestamp_us) + _encode_section(push.limits)


def decode_limits(data: bytes) -> FabricLimits:
    rack, timestamp = _decode_header(data)
    limits, offset = _decode_section(data, REPORT_HEADER_BYTES)
    if offset != len(data):
        raise MalformedReport(f"{len(data) - offset} trailing bytes after limit push")
    try:
        return FabricLimits(rack, timestamp, limits)
    except ValueError as e:
        raise MalformedReport(str(e)) from e


def encode_feedback(fb: FeedbackPacket) -> bytes:
    """Pack ``fb``; rates below 1Kb/s are sent as 1Kb/s."""
    kbps = max(1, int(round(fb.advertised / KBPS)))
    return _FEEDBACK.pack(fb.src, fb.meter_service, kbps)


def decode_feedback(data: bytes, meter_host: int = 0) -> FeedbackPacket:
    """Unpack a feedback payload sent by ``meter_host``.

    The payload does not name the meter's host; it is the source address
    of the packet that carried it.
    """
    if len(data) != FEEDBACK_BYTES:
        raise MalformedReport(f"Feedback must be {FEEDBACK_BYTES} bytes, got {len(data)}")
    src, service, kbps = _FEEDBACK.unpack(data)
    try:
        return FeedbackPacket(
            src=src, meter_service=service, advertised=float(kbps * KBPS), meter_host=meter_host
        )
    except ValueError as e:
        raise MalformedReport(str(e)) from e


def report_size(tx_entries: int, rx_entries: int = 0) -> int:
    """Encoded size in bytes of a report with the given section sizes."""
    return REPORT_HEADER_BYTES + 2 * _COUNT.size + REPORT_ENTRY_BYTES * (tx_entries + rx_entries)


def report_overhead_bps(entries: int, peers: int, interval_s: float) -> float:
    """Bits/s one machine sends when unicasting its report to ``peers`` every interval."""
    return report_size(entries) * 8.0 * peers / interval_s

