"""Traffic generators and their random streams.

Every traffic source gets its own counter-based (Philox) stream keyed
by the scenario seed, the workload name and the source index, so adding
or removing a workload leaves the others' randomness untouched.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections.abc import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from bwbroker.data.config import EventSpec, Scenario, Topology, WorkloadSpec

logger = logging.getLogger(__name__)

_CHUNK = 4096


def source_rng(seed: int, workload: str, index: int = 0) -> np.random.Generator:
    """Random stream of one traffic source."""
    key = (zlib.crc32(workload.encode()), index)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def mean_interarrival_s(size_bytes: float, load: float, capacity: float) -> float:
    """t_mu = Z * 8 / (rho * C); infinite for zero load."""
    if load <= 0:
        return math.inf
    return size_bytes * 8.0 / (load * capacity)


def rpc_workload(
    size_bytes: float,
    load: float,
    capacity: float,
    rng: np.random.Generator,
    start_s: float = 0.0,
    stop_s: float = math.inf,
) -> Iterator[float]:
    """RPC start times with i.i.d. Uniform(0, 2 t_mu) gaps.

    The long-run offered load is ``load * capacity``. Zero load gives an
    empty stream.

    Raises:
        ValueError: If ``load`` is outside [0, 1.5] or size or capacity
            is not positive.
    """
    if not 0 <= load <= 1.5:
        raise ValueError(f"RPC load must be in [0, 1.5], got {load}")
    if size_bytes <= 0 or capacity <= 0:
        raise ValueError("RPC size and capacity must be positive")
    t_mu = mean_interarrival_s(size_bytes, load, capacity)
    if math.isinf(t_mu):
        return
    now = start_s
    while True:
        times = now + np.cumsum(rng.uniform(0.0, 2.0 * t_mu, _CHUNK))
        for t in times:
            if t >= stop_s:
                return
            yield float(t)
        now = float(times[-1])


def rpc_arrivals(
    size_bytes: float,
    load: float,
    capacity: float,
    horizon_s: float,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """All RPC start times in [0, horizon_s) as an array."""
    t_mu = mean_interarrival_s(size_bytes, load, capacity)
    if math.isinf(t_mu):
        return np.empty(0)
    chunk = max(_CHUNK, int(horizon_s / t_mu))
    chunks: list[NDArray[np.float64]] = []
    last = 0.0
    while last < horizon_s:
        times = last + np.cumsum(rng.uniform(0.0, 2.0 * t_mu, chunk))
        chunks.append(times)
        last = float(times[-1])
    arrivals = np.concatenate(chunks)
    return arrivals[arrivals < horizon_s]


def pair_destination(
    src: int, dsts: Sequence[int], start: int, topology: Topology
) -> int:
    """Destination of a source, walking ``dsts`` from ``start``.

    The first host in another rack wins; failing that, the first host
    other than the source; failing that, the source itself.
    """
    n = len(dsts)
    ordered = [dsts[(start + k) % n] for k in range(n)]
    rack = topology.rack_of(src)
    for dst in ordered:
        if topology.rack_of(dst) != rack:
            return dst
    for dst in ordered:
        if dst != src:
            return dst
    return ordered[0]


def flow_pairs(spec: WorkloadSpec, topology: Topology) -> list[tuple[int, int]]:
    """(src, dst) of every long-lived flow or constant-rate stream of a workload."""
    count = spec.flows if spec.kind == "long_lived" else 1
    return [
        (src, pair_destination(src, spec.dst, i * count + k, topology))
        for i, src in enumerate(spec.src)
        for k in range(count)
    ]


def on_phase(spec: WorkloadSpec, t_s: float, origin_s: float) -> bool:
    """Whether an on-off source started at ``origin_s`` is in an on period."""
    if spec.kind != "on_off":
        return True
    period = spec.on_s + spec.off_s
    return (t_s - origin_s) % period < spec.on_s


def workload_events(scenario: Scenario) -> list[EventSpec]:
    """Scenario events plus the start and stop of every scheduled workload, in time order."""
    events: list[EventSpec] = []
    for spec in scenario.workloads:
        if spec.start_s is not None:
            events.append(EventSpec(spec.start_s, "start_workload", {"workload": spec.name}))
        if spec.stop_s is not None:
            events.append(EventSpec(spec.stop_s, "stop_workload", {"workload": spec.name}))
    events.extend(scenario.events)
    return sorted(events, key=lambda e: e.at_s)


class WorkloadState:
    """Which workloads are running, since when, and in which incarnation.

    A stopped workload bumps its generation so that sources launched
    before the stop notice it even if the workload is started again.
    """

    def __init__(self, specs: Sequence[WorkloadSpec]) -> None:
        self.origin: dict[str, float | None] = {spec.name: None for spec in specs}
        self.generation: dict[str, int] = {spec.name: 0 for spec in specs}

    def start(self, name: str, t_s: float) -> bool:
        if self.origin[name] is not None:
            return False
        self.origin[name] = t_s
        logger.debug("workload %s started at %.3fs", name, t_s)
        return True

    def stop(self, name: str) -> bool:
        if self.origin[name] is None:
            return False
        self.origin[name] = None
        self.generation[name] += 1
        return True

    def running(self, name: str, generation: int) -> bool:
        return self.origin[name] is not None and self.generation[name] == generation

    def sending(self, spec: WorkloadSpec, t_s: float) -> bool:
        origin = self.origin[spec.name]
        return origin is not None and on_phase(spec, t_s, origin)
