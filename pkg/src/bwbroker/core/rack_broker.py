"""Rack-level allocation from exchanged usage reports.

Every machine in a rack runs a broker. Each interval a broker reads its
shaper's per-service usage, unicasts it to the other machines of the
rack, and water-fills the rack's uplink and downlink policies over the
latest report from every machine that is still alive. All brokers see
the same reports and so compute the same allocation; each installs only
the caps of its own machine's services.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

from bwbroker.core.allocator import (
    NodeAllocation,
    aggregate_demands,
    distribute,
    estimate_demand,
    runtime_from_allocation,
)
from bwbroker.core.machine_shaper import MachineShaper
from bwbroker.core.params import BrokerParams, seconds_to_ns
from bwbroker.core.policy import Direction, Endpoint, PolicyTree, RuntimePolicy, validate_tree
from bwbroker.data.wire import FabricLimits, UsageReport
from bwbroker.errors import UnknownMachine
from bwbroker.utils.constants import NS_PER_S, NS_PER_US
from bwbroker.utils.units import format_bandwidth

logger = logging.getLogger(__name__)


class AllocationRecord(NamedTuple):
    """One row of the allocation trace."""

    time_s: float
    scope: str
    machine: int
    service: int
    direction: str
    demand: float
    allocation: float
    limited: bool


def collect_local_usage(shaper: MachineShaper, interval_s: float, now_ns: int) -> UsageReport:
    """Usage report of one machine over the interval that just ended.

    Reading the usage resets the shaper's byte counters. Services with no
    traffic are left out, so an idle machine sends empty sections.
    """
    tx, rx = shaper.take_usage(interval_s)
    return UsageReport(shaper.host, now_ns // NS_PER_US, tuple(tx.items()), tuple(rx.items()))


@dataclass
class _PeerReport:
    report: UsageReport
    last_seen_ns: int


@dataclass
class RackBroker:
    """Broker of one machine.

    Attributes:
        machine: Machine the broker runs on.
        rack: Rack id, used as the sender of fabric reports.
        machines: All machines of the rack.
        shaper: The local machine's shaper.
        up_tree: Rack uplink policy (tx), if any.
        down_tree: Rack downlink policy (rx), if any.
        params: Intervals, timeouts and demand headroom.
    """

    machine: int
    rack: int
    machines: frozenset[int]
    shaper: MachineShaper
    up_tree: PolicyTree | None = None
    down_tree: PolicyTree | None = None
    params: BrokerParams = field(default_factory=BrokerParams)
    record_trace: bool = True
    trace: list[AllocationRecord] = field(default_factory=list, init=False)
    fabric_reverted_ns: int | None = field(default=None, init=False)
    _reports: dict[int, _PeerReport] = field(default_factory=dict, init=False, repr=False)
    _previous: dict[Direction, RuntimePolicy] = field(default_factory=dict, init=False, repr=False)
    _fabric_limits: dict[int, float] = field(default_factory=dict, init=False, repr=False)
    _last_fabric_ns: int | None = field(default=None, init=False, repr=False)
    _window: dict[int, float] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self.machines = frozenset(self.machines)
        if self.machine not in self.machines:
            raise UnknownMachine(f"Machine {self.machine} is not in rack {self.rack}")
        for tree in (self.up_tree, self.down_tree):
            if tree is not None:
                validate_tree(tree).raise_for_violations()

    @property
    def fabric_limits(self) -> dict[int, float]:
        return dict(self._fabric_limits)

    def collect(self, now_ns: int) -> UsageReport:
        """Read local usage, refresh machine-level caps and keep the report.

        Returns the report to unicast to the other machines of the rack.
        """
        report = collect_local_usage(self.shaper, self.params.rack_interval_s, now_ns)
        self.shaper.refresh_machine_policy(report.tx_usage(), report.rx_usage(), now_ns)
        self.on_report(report, now_ns)
        return report

    def on_report(self, report: UsageReport, now_ns: int) -> bool:
        """Store a peer report; older reports than the stored one are dropped.

        Returns True if the report was stored.

        Raises:
            UnknownMachine: If the sender is not in this rack.
        """
        if report.sender not in self.machines:
            logger.error("Rack %d got a report from foreign machine %d", self.rack, report.sender)
            raise UnknownMachine(f"Machine {report.sender} is not in rack {self.rack}")
        current = self._reports.get(report.sender)
        if current is not None and report.timestamp_us <= current.report.timestamp_us:
            logger.debug("machine %d: dropping stale report from %d", self.machine, report.sender)
            return False
        self._reports[report.sender] = _PeerReport(report, now_ns)
        return True

    def live_reports(self, now_ns: int) -> dict[int, UsageReport]:
        """Latest report of every machine heard from within the rack timeout."""
        timeout = seconds_to_ns(self.params.rack_timeout_s)
        return {
            machine: peer.report
            for machine, peer in sorted(self._reports.items())
            if now_ns - peer.last_seen_ns <= timeout
        }

    def uplink_tree(self) -> PolicyTree | None:
        """Uplink policy with the current fabric limits folded in."""
        tree = self.up_tree
        if tree is None:
            return None
        for service, limit in sorted(self._fabric_limits.items()):
            tree = tree.with_service_cap(service, limit)
        return tree

    def tick(self, now_ns: int) -> RuntimePolicy:
        """Allocate the rack and install this machine's caps.

        Returns the runtime policy of the local machine's services.
        """
        self._expire_fabric_limits(now_ns)
        live = self.live_reports(now_ns)
        local = RuntimePolicy({})
        for direction, tree in ((Direction.TX, self.uplink_tree()), (Direction.RX, self.down_tree)):
            if tree is None:
                continue
            usage = _endpoint_usage(live, direction)
            demands = self._leaf_demands(tree, usage, direction)
            allocation = distribute(tree, aggregate_demands(tree, demands))
            policy = runtime_from_allocation(tree, allocation)
            self._previous[direction] = policy
            if self.record_trace:
                self._record(now_ns, tree, allocation, direction)
            local = local.merge(policy.for_machine(self.machine))
        self.shaper.install_rack_policy(local, now_ns)
        for service, rate in _service_totals(live.values()).items():
            self._window[service] = max(self._window.get(service, 0.0), rate)
        logger.debug("machine %d: rack %d allocation over %d live machines",
                     self.machine, self.rack, len(live))
        return local

    def _leaf_demands(
        self, tree: PolicyTree, usage: Mapping[Endpoint, float], direction: Direction
    ) -> dict[int, float]:
        previous = self._previous.get(direction)
        demands: dict[int, float] = {}
        for leaf in tree.leaves:
            endpoint = tree.endpoint(leaf)
            measured = usage.get(endpoint, 0.0)
            runtime = previous.get(endpoint) if previous is not None else None
            if runtime is None:
                demands[leaf] = measured
                continue
            limited = runtime.tx_limited if direction is Direction.TX else runtime.rx_limited
            demands[leaf] = estimate_demand(
                measured, runtime.capacity(direction), limited, self.params.demand_headroom
            )
        return demands

    def _record(
        self,
        now_ns: int,
        tree: PolicyTree,
        allocation: Mapping[int, NodeAllocation],
        direction: Direction,
    ) -> None:
        for leaf in tree.leaves:
            endpoint = tree.endpoint(leaf)
            if endpoint.machine != self.machine:
                continue
            alloc = allocation[leaf]
            self.trace.append(
                AllocationRecord(
                    now_ns / NS_PER_S, f"rack{self.rack}", endpoint.machine, endpoint.service,
                    direction.value, alloc.demand, alloc.rate, alloc.limited,
                )
            )

    def apply_fabric_limit(self, push: FabricLimits | Mapping[int, float], now_ns: int) -> None:
        """Install (rack, service) limits from the fabric broker.

        Limits take effect at the next tick; services absent from the push
        go back to their static uplink policy.
        """
        limits = dict(push.limits) if isinstance(push, FabricLimits) else dict(push)
        if limits != self._fabric_limits:
            logger.info(
                "rack %d: fabric limits %s", self.rack,
                {s: format_bandwidth(v) for s, v in sorted(limits.items())},
            )
        self._fabric_limits = limits
        self._last_fabric_ns = now_ns
        self.fabric_reverted_ns = None

    def _expire_fabric_limits(self, now_ns: int) -> None:
        if self._last_fabric_ns is None or not self._fabric_limits:
            return
        if now_ns - self._last_fabric_ns < seconds_to_ns(self.params.fabric_timeout_s):
            return
        logger.warning(
            "rack %d: no fabric limits for %.1fs, reverting to static policy",
            self.rack, (now_ns - self._last_fabric_ns) / NS_PER_S,
        )
        self._fabric_limits = {}
        self._last_fabric_ns = None
        self.fabric_reverted_ns = now_ns

    def fabric_report(self, now_ns: int) -> UsageReport:
        """Peak per-service rack tx usage since the last fabric report.

        The peak over rack intervals is reported rather than the mean so
        that short bursts inside a fabric interval stay visible.
        """
        report = UsageReport(self.rack, now_ns // NS_PER_US, tuple(self._window.items()))
        self._window = {}
        return report


def _endpoint_usage(
    reports: Mapping[int, UsageReport], direction: Direction
) -> dict[Endpoint, float]:
    usage: dict[Endpoint, float] = {}
    for machine, report in reports.items():
        entries = report.tx if direction is Direction.TX else report.rx
        for service, rate in entries:
            usage[Endpoint(machine, service)] = rate
    return usage


def _service_totals(reports: Iterable[UsageReport]) -> dict[int, float]:
    totals: dict[int, float] = {}
    for report in reports:
        for service, rate in report.tx:
            totals[service] = totals.get(service, 0.0) + rate
    return totals
