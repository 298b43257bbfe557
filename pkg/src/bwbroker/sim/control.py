"""Broker orchestration shared by both engines.

The engines own the data plane and call :meth:`ControlPlane.step` at
every rack interval. At a time where both are due, the fabric tick runs
before the rack ticks and its limits are delivered at once, so racks
allocate with the limits computed at the same instant.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Callable, Iterable
from typing import Any

from bwbroker.core.fabric_broker import FabricBroker, leader_for
from bwbroker.core.machine_shaper import MachineShaper
from bwbroker.core.params import seconds_to_ns
from bwbroker.core.policy import ContentionPoint
from bwbroker.core.rack_broker import AllocationRecord, RackBroker
from bwbroker.data.config import EventSpec, PlacedPolicy, Scenario, place_policies
from bwbroker.errors import ScenarioInvalid
from bwbroker.sim.workload import workload_events
from bwbroker.utils.constants import NS_PER_S
from bwbroker.utils.units import parse_bandwidth

logger = logging.getLogger(__name__)

CONTROL, EVENT, SAMPLE = 0, 1, 2
"""Order of scheduled actions falling on the same instant."""

Action = tuple[int, int, int, Any]


def build_shapers(scenario: Scenario) -> dict[int, MachineShaper]:
    """One shaper per host, carrying the host's machine-level trees."""
    topology = scenario.topology
    shapers = {
        host: MachineShaper(host=host, line_rate=topology.nic_rate, params=scenario.params)
        for host in range(topology.hosts)
    }
    for placed in scenario.policies:
        if placed.host is not None:
            _install_machine_tree(shapers[placed.host], placed)
    return shapers


def _install_machine_tree(shaper: MachineShaper, placed: PlacedPolicy) -> None:
    if placed.tree.contention_point is ContentionPoint.MACHINE_TX:
        shaper.tx_tree = placed.tree
    elif placed.tree.contention_point is ContentionPoint.MACHINE_RX:
        shaper.rx_tree = placed.tree


class ControlPlane:
    """Rack brokers on every host, one fabric broker, and their failures."""

    def __init__(self, scenario: Scenario, shapers: dict[int, MachineShaper]) -> None:
        self.scenario = scenario
        self.topology = scenario.topology
        self.params = scenario.params
        self.shapers = shapers
        self.brokers: dict[int, RackBroker] = {}
        self.fabric: FabricBroker | None = None
        self.fabric_alive = False
        self.fabric_reverts: dict[int, float] = {}
        self.alive: set[int] = set()
        self._next_fabric_ns = self.params.fabric_interval_ns
        if not scenario.brokers:
            return
        up: dict[int, PlacedPolicy] = {}
        down: dict[int, PlacedPolicy] = {}
        for placed in scenario.policies:
            if placed.rack is None:
                continue
            point = placed.tree.contention_point
            target = up if point is ContentionPoint.RACK_UP else down
            target[placed.rack] = placed
        for rack in range(self.topology.racks):
            machines = frozenset(self.topology.hosts_in(rack))
            for host in machines:
                self.brokers[host] = RackBroker(
                    machine=host,
                    rack=rack,
                    machines=machines,
                    shaper=shapers[host],
                    up_tree=up[rack].tree if rack in up else None,
                    down_tree=down[rack].tree if rack in down else None,
                    params=self.params,
                )
        if scenario.fabric_caps:
            capacity = scenario.fabric_rack_capacity or self.topology.uplink_rate
            self.fabric = FabricBroker(
                racks=frozenset(range(self.topology.racks)),
                caps=dict(scenario.fabric_caps),
                rack_capacity=capacity,
                params=self.params,
            )
            self.fabric_alive = True
        self.alive = set(self.brokers)

    @property
    def trace(self) -> list[AllocationRecord]:
        rows: list[AllocationRecord] = []
        for host in sorted(self.brokers):
            rows.extend(self.brokers[host].trace)
        if self.fabric is not None:
            rows.extend(self.fabric.trace)
        rows.sort(key=lambda r: (r.time_s, r.scope, r.machine, r.service, r.direction))
        return rows

    def live_machines(self, rack: int) -> list[int]:
        return [h for h in self.topology.hosts_in(rack) if h in self.brokers and h in self.alive]

    def step(self, now_ns: int) -> None:
        """Run every broker tick due at ``now_ns``."""
        if self.brokers and now_ns >= self._next_fabric_ns:
            self._fabric_tick(now_ns)
            self._next_fabric_ns += self.params.fabric_interval_ns
        for rack in range(self.topology.racks):
            self._rack_tick(rack, now_ns)

    def _rack_tick(self, rack: int, now_ns: int) -> None:
        interval = self.params.rack_interval_s
        live = self.live_machines(rack)
        for host in self.topology.hosts_in(rack):
            if host not in live:
                self.shapers[host].local_tick(now_ns, interval)
        reports = [self.brokers[host].collect(now_ns) for host in live]
        for host in live:
            broker = self.brokers[host]
            for report in reports:
                if report.sender != host:
                    broker.on_report(report, now_ns)
        for host in live:
            broker = self.brokers[host]
            broker.tick(now_ns)
            for limiter in broker.shaper.limiters.values():
                limiter.collect_garbage(now_ns)
            if broker.fabric_reverted_ns == now_ns:
                self.fabric_reverts.setdefault(rack, now_ns / NS_PER_S)

    def _fabric_tick(self, now_ns: int) -> None:
        leaders: dict[int, RackBroker] = {}
        for rack in range(self.topology.racks):
            live = self.live_machines(rack)
            if not live:
                continue
            leader = leader_for(live)
            for host in live:
                report = self.brokers[host].fabric_report(now_ns)
                if host == leader:
                    leaders[rack] = self.brokers[host]
                    if self.fabric is not None and self.fabric_alive:
                        self.fabric.on_rack_report(report, now_ns)
        if self.fabric is None or not self.fabric_alive:
            return
        limits = self.fabric.fabric_tick(now_ns)
        for rack in leaders:
            push = self.fabric.push_for(rack, limits, now_ns)
            for host in self.live_machines(rack):
                self.brokers[host].apply_fabric_limit(push, now_ns)

    def kill_broker(self, target: str | int | Iterable[int], now_ns: int) -> None:
        """Stop the fabric broker (``"fabric"``) or the rack brokers of some hosts."""
        if target == "fabric":
            if self.fabric is None:
                raise ScenarioInvalid("kill_broker: scenario has no fabric broker")
            self.fabric_alive = False
            logger.info("fabric broker killed at %.3fs", now_ns / NS_PER_S)
            return
        if isinstance(target, str):
            raise ScenarioInvalid(f"kill_broker: unknown target {target!r}")
        hosts = [target] if isinstance(target, int) else [int(h) for h in target]
        for host in hosts:
            if host not in self.brokers:
                raise ScenarioInvalid(f"kill_broker: host {host} runs no broker")
            self.alive.discard(host)
        logger.info("rack brokers of hosts %s killed at %.3fs", hosts, now_ns / NS_PER_S)

    def install_policy(self, placed: PlacedPolicy) -> None:
        """Replace a rack or machine policy from now on."""
        if placed.host is not None:
            _install_machine_tree(self.shapers[placed.host], placed)
            return
        if placed.rack is None:
            raise ScenarioInvalid("policy_change needs a rack or host")
        for host in self.topology.hosts_in(placed.rack):
            broker = self.brokers.get(host)
            if broker is None:
                continue
            if placed.tree.contention_point is ContentionPoint.RACK_UP:
                broker.up_tree = placed.tree
            else:
                broker.down_tree = placed.tree
        logger.info("rack %d: %s policy replaced", placed.rack,
                    placed.tree.contention_point.value)

    def set_cap(self, service: int, cap: float | None) -> None:
        if self.fabric is None:
            raise ScenarioInvalid("cap_change: scenario has no fabric broker")
        self.fabric.set_cap(service, cap)

    def set_meter_interval(self, interval_s: float) -> None:
        self.params = dataclasses.replace(self.params, meter_interval_s=interval_s)
        for shaper in self.shapers.values():
            shaper.params = self.params
            for meter in shaper.meters.values():
                meter.set_interval(interval_s)
        for broker in self.brokers.values():
            broker.params = self.params
        logger.info("meter interval set to %gs", interval_s)


def action_schedule(scenario: Scenario) -> list[Action]:
    """Broker ticks, events and trace samples up to the horizon, in execution order.

    Entries are ``(time_ns, kind, sequence, payload)``; broker ticks are
    only scheduled when shaping is on.
    """
    horizon_ns = seconds_to_ns(scenario.horizon_s)
    actions: list[Action] = []
    if scenario.shaping:
        step = scenario.params.rack_interval_ns
        actions += [(t, CONTROL, 0, None) for t in range(step, horizon_ns + 1, step)]
    for i, event in enumerate(workload_events(scenario)):
        at_ns = seconds_to_ns(event.at_s)
        if at_ns <= horizon_ns:
            actions.append((at_ns, EVENT, i, event))
    sample = seconds_to_ns(scenario.sample_interval_s)
    actions += [(t, SAMPLE, 0, None) for t in range(sample, horizon_ns + 1, sample)]
    return sorted(actions, key=lambda a: a[:3])


def apply_control_event(
    control: ControlPlane,
    scenario: Scenario,
    event: EventSpec,
    now_ns: int,
    link_toggle: Callable[[str, bool], None],
) -> None:
    """Apply a broker, policy or link event.

    Workload events belong to the engines and are ignored here.

    Raises:
        ScenarioInvalid: If the event refers to something the run lacks.
        UnknownLink: If a toggled link does not exist.
    """
    args = event.args
    try:
        if event.kind == "kill_broker":
            control.kill_broker(args.get("target", "fabric"), now_ns)
        elif event.kind == "cap_change":
            cap = args.get("cap")
            service = _service_id(scenario, args["service"])
            control.set_cap(service, None if cap is None else float(parse_bandwidth(cap)))
        elif event.kind == "policy_change":
            for placed in place_policies(args["policy"], scenario.topology, scenario.services):
                control.install_policy(placed)
        elif event.kind == "link_toggle":
            link_toggle(str(args["link"]), bool(args.get("up", False)))
        elif event.kind == "meter_interval":
            control.set_meter_interval(float(args["interval_s"]))
    except KeyError as e:
        raise ScenarioInvalid(f"{event.kind} event at {event.at_s}s lacks {e}") from e


def _service_id(scenario: Scenario, value: Any) -> int:
    if isinstance(value, str) and value in scenario.services:
        return scenario.services[value]
    return int(value)
