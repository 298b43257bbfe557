"""Window-based AIMD transport with ECN echo, and flow records.

The model is deliberately coarse: slow start until the first congestion
signal, then one segment per RTT of additive increase and a halving on
ECN echo at most once per RTT. A lost segment is noticed after a
retransmission timeout and counts as a congestion signal.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

from bwbroker.utils.constants import (
    INITIAL_WINDOW_SEGMENTS,
    MAX_WINDOW_SEGMENTS,
    MIN_RTO_S,
    MSS_BYTES,
    NS_PER_S,
)

logger = logging.getLogger(__name__)

_MAX_RTO_BACKOFF = 6


class Phase(enum.Enum):
    SLOW_START = "slow_start"
    CONGESTION_AVOIDANCE = "congestion_avoidance"


@dataclass
class AimdState:
    """Congestion state of one flow; the window is counted in segments.

    Attributes:
        cwnd: Congestion window.
        phase: Slow start until the first mark or loss.
        srtt_ns: Smoothed RTT; zero until the first sample.
        last_decrease_ns: Time of the last window cut, or None.
        min_window: Floor of the window.
        max_window: Ceiling of the window.
        rto_backoff: Consecutive timeouts; each one doubles the timeout.
    """

    cwnd: float = float(INITIAL_WINDOW_SEGMENTS)
    phase: Phase = Phase.SLOW_START
    srtt_ns: int = 0
    last_decrease_ns: int | None = None
    min_window: float = 1.0
    max_window: float = float(MAX_WINDOW_SEGMENTS)
    rto_backoff: int = 0
    decreases: int = field(default=0, repr=False)

    @property
    def window(self) -> int:
        return max(1, int(self.cwnd))

    def rto_ns(self, min_rto_s: float = MIN_RTO_S) -> int:
        base = max(int(min_rto_s * NS_PER_S), 2 * self.srtt_ns)
        return base << min(self.rto_backoff, _MAX_RTO_BACKOFF)

    def sample_rtt(self, rtt_ns: int) -> None:
        if self.srtt_ns == 0:
            self.srtt_ns = rtt_ns
        else:
            self.srtt_ns = (7 * self.srtt_ns + rtt_ns) // 8


def _decrease(state: AimdState, now_ns: int) -> bool:
    if state.last_decrease_ns is not None and now_ns - state.last_decrease_ns < state.srtt_ns:
        return False
    state.cwnd = max(state.min_window, state.cwnd / 2.0)
    state.phase = Phase.CONGESTION_AVOIDANCE
    state.last_decrease_ns = now_ns
    state.decreases += 1
    return True


def transport_on_ack(state: AimdState) -> None:
    """Grow the window for one acknowledged segment without an ECN echo."""
    state.rto_backoff = 0
    if state.phase is Phase.SLOW_START:
        state.cwnd += 1.0
    else:
        state.cwnd += 1.0 / state.cwnd
    state.cwnd = min(state.cwnd, state.max_window)


def transport_on_mark(state: AimdState, now_ns: int) -> bool:
    """Halve the window for an ECN echo, at most once per RTT.

    Returns True if the window was cut.
    """
    state.rto_backoff = 0
    return _decrease(state, now_ns)


def transport_on_timeout(state: AimdState, now_ns: int) -> None:
    """A segment was lost: cut the window and back off the timer."""
    _decrease(state, now_ns)
    state.rto_backoff += 1


def segments_for(size_bytes: float) -> float:
    """Segments needed for a transfer; infinite transfers never end."""
    if math.isinf(size_bytes):
        return math.inf
    return max(1, math.ceil(size_bytes / MSS_BYTES))


def segment_bytes(seq: int, size_bytes: float) -> int:
    """Payload of segment ``seq``; the last one carries the remainder."""
    if math.isinf(size_bytes):
        return MSS_BYTES
    return int(min(MSS_BYTES, size_bytes - seq * MSS_BYTES))


@dataclass
class FlowRecord:
    """Start and finish of one transfer.

    A transfer that has not finished by the horizon has no finish time
    and an infinite FCT.
    """

    flow: int
    workload: str
    service: int
    src: int
    dst: int
    size_bytes: float
    start_ns: int
    finish_ns: int | None = None
    delivered_bytes: int = 0

    @property
    def finished(self) -> bool:
        return self.finish_ns is not None

    @property
    def start_s(self) -> float:
        return self.start_ns / NS_PER_S

    @property
    def finish_s(self) -> float:
        return math.inf if self.finish_ns is None else self.finish_ns / NS_PER_S

    @property
    def fct_s(self) -> float:
        if self.finish_ns is None:
            return math.inf
        return (self.finish_ns - self.start_ns) / NS_PER_S

    def complete(self, now_ns: int) -> bool:
        """Record the finish time; later calls are ignored.

        Raises:
            ValueError: If ``now_ns`` is before the start.
        """
        if self.finish_ns is not None:
            return False
        if now_ns < self.start_ns:
            raise ValueError(f"Flow {self.flow} cannot finish before it starts")
        self.finish_ns = now_ns
        return True
