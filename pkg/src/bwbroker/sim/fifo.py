"""Work-conserving FIFO replay of flow arrivals.

Each flow's bytes arrive at its start time and are served in arrival
order at a constant capacity, so a flow finishes at
``max(start, previous finish) + size / capacity``.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bwbroker.core.params import seconds_to_ns
from bwbroker.errors import UnsortedTrace
from bwbroker.sim.transport import FlowRecord

logger = logging.getLogger(__name__)


def fifo_finish_times(
    start_s: ArrayLike, size_bits: ArrayLike, capacity: float
) -> NDArray[np.float64]:
    """Finish time of every arrival in a FIFO served at ``capacity`` bits/s.

    Raises:
        UnsortedTrace: If start times decrease.
        ValueError: If ``capacity`` is not positive.
    """
    if capacity <= 0:
        raise ValueError(f"FIFO capacity must be positive, got {capacity}")
    t = np.asarray(start_s, dtype=np.float64)
    service = np.asarray(size_bits, dtype=np.float64) / capacity
    if t.size and np.any(np.diff(t) < 0):
        raise UnsortedTrace("FIFO arrivals must be sorted by start time")
    done = np.cumsum(service)
    # Lindley recursion in closed form: the queue last emptied at the
    # arrival j that maximises t_j - work served before j.
    before = done - service
    return done + np.maximum.accumulate(t - before)


def replay_fifo(flows: Sequence[FlowRecord], capacity: float) -> list[FlowRecord]:
    """Complete ``flows`` as a FIFO at ``capacity`` would; returns them in service order."""
    ordered = sorted(flows, key=lambda f: (f.start_ns, f.flow))
    finish = fifo_finish_times(
        [f.start_s for f in ordered], [f.size_bytes * 8.0 for f in ordered], capacity
    )
    for flow, end in zip(ordered, finish):
        flow.complete(max(flow.start_ns, seconds_to_ns(float(end))))
        flow.delivered_bytes = int(flow.size_bytes)
    logger.debug("replayed %d flows at %.0f b/s", len(ordered), capacity)
    return ordered
