"""Cluster-wide caps split across racks.

A service can carry a global cap on its fabric usage. The leader of each
rack sends the rack's per-service usage to the fabric broker every
fabric interval; the broker water-fills each capped service's global cap
over the racks' demands and pushes a limit to every rack that would
otherwise exceed its share. Racks fold the limit into their uplink policy
and drop it again when the broker goes quiet.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from bwbroker.core.allocator import estimate_demand, water_fill
from bwbroker.core.params import BrokerParams, seconds_to_ns
from bwbroker.core.rack_broker import AllocationRecord
from bwbroker.data.wire import FabricLimits, UsageReport
from bwbroker.errors import EmptyRack, UnknownRack
from bwbroker.utils.constants import NS_PER_S, NS_PER_US
from bwbroker.utils.units import format_bandwidth

logger = logging.getLogger(__name__)

_SATISFIED_TOLERANCE_BPS = 1.0


def leader_for(machines: Iterable[int]) -> int:
    """The rack leader: the lowest id among the live machines given.

    Raises:
        EmptyRack: If no machine is given.
    """
    pool = list(machines)
    if not pool:
        raise EmptyRack("Rack has no live machines")
    return min(pool)


@dataclass
class _RackReport:
    usage: dict[int, float]
    timestamp_us: int
    last_seen_ns: int


@dataclass
class FabricBroker:
    """The cluster's fabric broker.

    Attributes:
        racks: Known rack ids.
        caps: Global cap per fabric-limited service, bits/s.
        rack_capacity: Largest rate one rack can push into the fabric.
        params: Fabric interval and timeout, demand headroom.
    """

    racks: frozenset[int]
    caps: dict[int, float] = field(default_factory=dict)
    rack_capacity: float = float("inf")
    params: BrokerParams = field(default_factory=BrokerParams)
    record_trace: bool = True
    trace: list[AllocationRecord] = field(default_factory=list, init=False)
    _reports: dict[int, _RackReport] = field(default_factory=dict, init=False, repr=False)
    _previous: dict[tuple[int, int], tuple[float, bool]] = field(
        default_factory=dict, init=False, repr=False
    )

    def __post_init__(self) -> None:
        self.racks = frozenset(self.racks)
        self.caps = dict(self.caps)

    def set_cap(self, service: int, cap: float | None) -> None:
        """Change or, with None, remove the global cap of ``service``."""
        if cap is None:
            self.caps.pop(service, None)
            logger.info("fabric: service %d uncapped", service)
            return
        if cap < 0:
            raise ValueError(f"Cap must be non-negative, got {cap}")
        self.caps[service] = float(cap)
        logger.info("fabric: service %d capped at %s", service, format_bandwidth(cap))

    def on_rack_report(self, report: UsageReport, now_ns: int) -> bool:
        """Store a rack's usage; returns False for a report older than the stored one.

        Raises:
            UnknownRack: If the reporting rack is unknown.
        """
        if report.sender not in self.racks:
            logger.error("fabric: report from unknown rack %d", report.sender)
            raise UnknownRack(f"Unknown rack {report.sender}")
        current = self._reports.get(report.sender)
        if current is not None and report.timestamp_us <= current.timestamp_us:
            return False
        self._reports[report.sender] = _RackReport(report.tx_usage(), report.timestamp_us, now_ns)
        return True

    def fabric_tick(self, now_ns: int) -> dict[tuple[int, int], float]:
        """Split every capped service's cap across racks.

        Returns the limit of every (rack, service) pair that is limited;
        racks whose demand fits their share get no limit.
        """
        timeout = seconds_to_ns(self.params.fabric_timeout_s)
        live = sorted(
            rack for rack, rep in self._reports.items() if now_ns - rep.last_seen_ns <= timeout
        )
        limits: dict[tuple[int, int], float] = {}
        if not live:
            return limits
        for service, cap in sorted(self.caps.items()):
            demands = np.array([self._demand(rack, service) for rack in live])
            n = len(live)
            ceiling = np.full(n, self.rack_capacity)
            alloc = water_fill(demands, np.ones(n), np.zeros(n), ceiling, cap)
            for rack, demand, rate in zip(live, demands, alloc):
                limited = bool(rate < demand - _SATISFIED_TOLERANCE_BPS)
                self._previous[(rack, service)] = (float(rate), limited)
                if limited:
                    limits[(rack, service)] = float(rate)
                if self.record_trace:
                    self.trace.append(
                        AllocationRecord(now_ns / NS_PER_S, "fabric", rack, service, "tx",
                                         float(demand), float(rate), limited)
                    )
            logger.debug("fabric: service %d demand %s over %d racks, cap %s", service,
                         format_bandwidth(float(demands.sum())), n, format_bandwidth(cap))
        return limits

    def _demand(self, rack: int, service: int) -> float:
        measured = self._reports[rack].usage.get(service, 0.0)
        previous = self._previous.get((rack, service))
        if previous is None:
            return measured
        rate, limited = previous
        return estimate_demand(measured, rate, limited, self.params.demand_headroom)

    def push_for(
        self, rack: int, limits: dict[tuple[int, int], float], now_ns: int
    ) -> FabricLimits:
        """The limit message for one rack; empty when none of its services are limited."""
        if rack not in self.racks:
            raise UnknownRack(f"Unknown rack {rack}")
        entries = tuple(
            (service, limit) for (r, service), limit in sorted(limits.items()) if r == rack
        )
        return FabricLimits(rack, now_ns // NS_PER_US, entries)
