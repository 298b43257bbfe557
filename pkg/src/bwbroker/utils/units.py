"""Bandwidth units and the ``UNLIMITED`` sentinel."""

from __future__ import annotations

import enum
import re
from typing import Union

from bwbroker.utils.constants import GBPS, KBPS, MBPS


class Unlimited(enum.Enum):
    """Marker for a maximum bandwidth with no limit."""

    UNLIMITED = "unlimited"

    def __repr__(self) -> str:
        return "UNLIMITED"


UNLIMITED = Unlimited.UNLIMITED

MaxBandwidth = Union[int, Unlimited]
"""A maximum bandwidth: integer bits/s or :data:`UNLIMITED`."""

_UNIT_SCALE: dict[str, int] = {
    "": 1,
    "k": KBPS,
    "m": MBPS,
    "g": GBPS,
    "t": 1000 * GBPS,
}

_BANDWIDTH_RE = re.compile(
    r"^\s*(?P<value>[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*"
    r"(?P<prefix>[kKmMgGtT]?)(?:b/s|bps|bit/s)?\s*$"
)


def parse_bandwidth(value: str | int | float) -> int:
    """Parse a bandwidth such as ``"6Gb/s"``, ``"500 Mbps"`` or ``1e9``.

    Args:
        value: A number of bits/s or a string with an optional unit.

    Returns:
        Integer bits per second.

    Raises:
        ValueError: If the value cannot be parsed or is negative.
    """
    if isinstance(value, bool):
        raise ValueError(f"Invalid bandwidth: {value!r}")
    if isinstance(value, (int, float)):
        if value < 0 or value != value:
            raise ValueError(f"Invalid bandwidth: {value!r}")
        return int(round(value))
    match = _BANDWIDTH_RE.match(value)
    if match is None:
        raise ValueError(f"Invalid bandwidth: {value!r}")
    scale = _UNIT_SCALE[match.group("prefix").lower()]
    return int(round(float(match.group("value")) * scale))


def parse_max_bandwidth(value: str | int | float | None) -> MaxBandwidth:
    """Like :func:`parse_bandwidth`, but ``None`` and ``"unlimited"`` give UNLIMITED."""
    if value is None:
        return UNLIMITED
    if isinstance(value, str) and value.strip().lower() in ("unlimited", "inf", "none"):
        return UNLIMITED
    return parse_bandwidth(value)


def format_bandwidth(bps: float) -> str:
    """Render bits/s with the largest unit that keeps the value >= 1."""
    if bps != bps:
        return "nan"
    if bps == float("inf"):
        return "unlimited"
    for unit, scale in (("Gb/s", GBPS), ("Mb/s", MBPS), ("Kb/s", KBPS)):
        if abs(bps) >= scale:
            return f"{bps / scale:.3f}{unit}"
    return f"{bps:.0f}b/s"


def cap_value(cap: MaxBandwidth) -> float:
    """Numeric value of a maximum, with UNLIMITED as +inf."""
    return float("inf") if cap is UNLIMITED else float(cap)
