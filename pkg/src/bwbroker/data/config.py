"""JSON loaders for policies, demand files and simulation scenarios.

Bandwidths may be numbers of bits/s or strings such as ``"6Gb/s"``;
maxima also accept ``"unlimited"``. Times are seconds.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from bwbroker.core.latency import fct_bound_from_convergence
from bwbroker.core.params import BrokerParams
from bwbroker.core.policy import ContentionPoint, Direction, PolicyNode, PolicyTree, validate_tree
from bwbroker.errors import InvalidEnvelope, PolicyError, ScenarioInvalid
from bwbroker.utils.constants import (
    ECN_THRESHOLD_BYTES,
    HOSTS_PER_RACK,
    METER_INTERVAL_S,
    MIN_RTO_S,
    NIC_RATE_BPS,
    PROPAGATION_DELAY_NS,
    QUEUE_LIMIT_BYTES,
    RACK_UPLINK_BPS,
    RACKS,
    SAMPLE_INTERVAL_S,
    SPINE_LINKS,
)
from bwbroker.utils.units import parse_bandwidth, parse_max_bandwidth

logger = logging.getLogger(__name__)

LEAF_ID_STRIDE = 100_000
"""Leaves generated for a node with ``machines`` get id ``node_id * LEAF_ID_STRIDE + host``."""

ENGINES = ("packet", "fluid")
WORKLOAD_KINDS = ("rpc", "long_lived", "udp", "on_off", "steady")
EVENT_KINDS = (
    "policy_change", "link_toggle", "cap_change", "kill_broker",
    "stop_workload", "start_workload", "meter_interval",
)
METRICS = ("util_mean", "util_all", "fct_p99", "fct_max", "jain", "queue_p99", "drop_fraction")

_HOST_SELECTOR = re.compile(r"^(?P<kind>rack|host)(?P<first>\d+)(?:-(?P<last>\d+))?$")


@dataclass(frozen=True)
class Topology:
    """Racks of hosts behind rackswitches joined by a spine.

    Attributes:
        racks: Number of racks.
        hosts_per_rack: Hosts under each rackswitch.
        nic_rate: Host link rate, bits/s, each direction.
        uplink_rate: Aggregate rack uplink (and downlink) rate, bits/s.
        spine_links: Links making up each rack's uplink.
        propagation_delay_ns: Delay per hop.
        ecn_threshold_bytes: Marking threshold of every queue.
        queue_limit_bytes: Hard limit of every queue.
    """

    racks: int = RACKS
    hosts_per_rack: int = HOSTS_PER_RACK
    nic_rate: float = NIC_RATE_BPS
    uplink_rate: float = RACK_UPLINK_BPS
    spine_links: int = SPINE_LINKS
    propagation_delay_ns: int = PROPAGATION_DELAY_NS
    ecn_threshold_bytes: int = ECN_THRESHOLD_BYTES
    queue_limit_bytes: int = QUEUE_LIMIT_BYTES

    def __post_init__(self) -> None:
        if self.racks < 1 or self.hosts_per_rack < 1 or self.spine_links < 1:
            raise ScenarioInvalid("Topology needs at least one rack, host and spine link")
        if self.nic_rate <= 0 or self.uplink_rate <= 0:
            raise ScenarioInvalid("Link rates must be positive")
        if self.ecn_threshold_bytes < 0 or self.queue_limit_bytes <= 0:
            raise ScenarioInvalid("Queue thresholds must be positive")

    @property
    def hosts(self) -> int:
        return self.racks * self.hosts_per_rack

    @property
    def oversubscription(self) -> float:
        return self.hosts_per_rack * self.nic_rate / self.uplink_rate

    def rack_of(self, host: int) -> int:
        return host // self.hosts_per_rack

    def hosts_in(self, rack: int) -> range:
        return range(rack * self.hosts_per_rack, (rack + 1) * self.hosts_per_rack)


@dataclass(frozen=True)
class PlacedPolicy:
    """A policy tree bound to the rack or host that enforces it."""

    tree: PolicyTree
    rack: int | None = None
    host: int | None = None


@dataclass(frozen=True)
class WorkloadSpec:
    """A traffic source.

    Attributes:
        name: Unique workload name.
        kind: One of ``rpc``, ``long_lived``, ``udp``, ``on_off``, ``steady``.
        service: Service the traffic is charged to.
        src: Sending hosts.
        dst: Receiving hosts.
        rate: Per-source rate for ``udp``, ``on_off`` and ``steady``, bits/s.
        flows: Long-lived flows per source host.
        size_bytes: Mean RPC size.
        load: RPC offered load as a fraction of ``capacity``.
        capacity: Reference capacity of the RPC load, bits/s.
        on_s: On period of ``on_off`` sources.
        off_s: Off period of ``on_off`` sources.
        start_s: Start time, or None to wait for a ``start_workload`` event.
        stop_s: Stop time, or None to run to the horizon.
    """

    name: str
    kind: str
    service: int
    src: tuple[int, ...]
    dst: tuple[int, ...]
    rate: float = 0.0
    flows: int = 1
    size_bytes: int = 0
    load: float = 0.0
    capacity: float = 0.0
    on_s: float = 0.0
    off_s: float = 0.0
    start_s: float | None = 0.0
    stop_s: float | None = None


@dataclass(frozen=True)
class EventSpec:
    at_s: float
    kind: str
    args: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class AssertionSpec:
    """Expected range of one metric; see :data:`METRICS`."""

    metric: str
    scope: str | None = None
    service: int | None = None
    services: tuple[int, ...] = ()
    workload: str | None = None
    link: str | None = None
    from_s: float = 0.0
    to_s: float = float("inf")
    min: float | None = None
    max: float | None = None
    skip_zero: bool = False

    @property
    def label(self) -> str:
        target = self.workload or self.link or self.scope or ""
        service = "" if self.service is None else f"/service {self.service}"
        return f"{self.metric}[{target}{service} {self.from_s:g}-{self.to_s:g}s]"


@dataclass(frozen=True)
class Scenario:
    """A complete, validated simulation scenario."""

    name: str
    engine: str = "packet"
    seed: int = 0
    horizon_s: float = 10.0
    sample_interval_s: float = SAMPLE_INTERVAL_S
    brokers: bool = True
    shaping: bool = True
    rto_s: float = MIN_RTO_S
    topology: Topology = field(default_factory=Topology)
    services: Mapping[str, int] = field(default_factory=dict)
    params: BrokerParams = field(default_factory=BrokerParams)
    policies: tuple[PlacedPolicy, ...] = ()
    fabric_caps: Mapping[int, float] = field(default_factory=dict)
    fabric_rack_capacity: float | None = None
    workloads: tuple[WorkloadSpec, ...] = ()
    events: tuple[EventSpec, ...] = ()
    assertions: tuple[AssertionSpec, ...] = ()

    def workload(self, name: str) -> WorkloadSpec:
        for workload in self.workloads:
            if workload.name == name:
                return workload
        raise ScenarioInvalid(f"Unknown workload {name!r}")


def _require(data: Mapping[str, Any], key: str, where: str) -> Any:
    try:
        return data[key]
    except KeyError:
        raise ScenarioInvalid(f"{where}: missing {key!r}") from None


def _bandwidth(value: Any, where: str) -> float:
    try:
        return float(parse_bandwidth(value))
    except (TypeError, ValueError) as e:
        raise ScenarioInvalid(f"{where}: {e}") from e


def _service_id(value: Any, services: Mapping[str, int], where: str) -> int:
    if isinstance(value, bool):
        raise ScenarioInvalid(f"{where}: invalid service {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        if value in services:
            return services[value]
        if value.isdigit():
            return int(value)
    raise ScenarioInvalid(f"{where}: unknown service {value!r}")


def parse_policy(
    data: Mapping[str, Any],
    services: Mapping[str, int] | None = None,
    hosts: Sequence[int] = (),
) -> PolicyTree:
    """Build and validate a policy tree from its JSON object.

    A node may list ``machines`` (host ids, or ``"rack"`` or ``"host"`` for
    ``hosts``, the members the policy is placed on);
    it then gets one leaf child per machine, tagged with the node's service.

    Raises:
        PolicyError: If the tree breaks a policy rule.
        ScenarioInvalid: If the document is malformed.
    """
    services = services or {}
    try:
        point = ContentionPoint(_require(data, "contention_point", "policy"))
        direction = Direction(data["direction"]) if "direction" in data else None
    except ValueError as e:
        raise ScenarioInvalid(f"policy: {e}") from e
    capacity = int(_bandwidth(_require(data, "capacity", "policy"), "policy capacity"))

    nodes: list[PolicyNode] = []
    for raw in _require(data, "nodes", "policy"):
        where = f"policy node {raw.get('id', '?')}"
        try:
            node_id = int(_require(raw, "id", where))
            parent = raw.get("parent")
            service = raw.get("service")
            node = PolicyNode(
                id=node_id,
                parent=None if parent is None else int(parent),
                min_bw=int(_bandwidth(raw.get("min", 0), where)),
                max_bw=parse_max_bandwidth(raw.get("max")),
                weight=float(raw.get("weight", 1.0)),
                name=str(raw.get("name", "")),
                machine=None if raw.get("machine") is None else int(raw["machine"]),
                service=None if service is None else _service_id(service, services, where),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, (PolicyError, ScenarioInvalid)):
                raise
            raise ScenarioInvalid(f"{where}: {e}") from e
        nodes.append(node)
        machines = raw.get("machines")
        if machines is not None:
            members = list(hosts) if machines in ("rack", "host") else [int(m) for m in machines]
            for machine in members:
                nodes.append(
                    PolicyNode(
                        id=node_id * LEAF_ID_STRIDE + machine,
                        parent=node_id,
                        name=f"{node.label}@{machine}",
                        machine=machine,
                        service=node.service if node.service is not None else node_id,
                    )
                )

    tree = PolicyTree(point, capacity, tuple(nodes), direction)
    validate_tree(tree).raise_for_violations()
    return tree


def _read_json(path: str | Path) -> Any:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioInvalid(f"{path}: invalid JSON: {e}") from e


def load_policy(path: str | Path) -> PolicyTree:
    """Load a policy file; see :func:`parse_policy`."""
    data = _read_json(path)
    services = {str(k): int(v) for k, v in data.get("services", {}).items()}
    return parse_policy(data, services)


def load_demands(path: str | Path | None, tree: PolicyTree) -> dict[int, float]:
    """Leaf demands keyed by leaf id from a JSON object keyed by leaf name or id.

    Leaves not listed demand nothing. ``"unlimited"`` or ``"inf"`` means
    an unbounded demand.

    Raises:
        ScenarioInvalid: On a key that matches no leaf or a bad value.
    """
    demands = {leaf: 0.0 for leaf in tree.leaves}
    if path is None:
        return demands
    data = _read_json(path)
    by_name = {tree.node(leaf).name: leaf for leaf in tree.leaves if tree.node(leaf).name}
    for key, value in data.items():
        if key in by_name:
            leaf = by_name[key]
        elif key.isdigit() and int(key) in demands:
            leaf = int(key)
        else:
            raise ScenarioInvalid(f"Demand for unknown leaf {key!r}")
        limit = parse_max_bandwidth(value)
        demands[leaf] = float("inf") if not isinstance(limit, int) else float(limit)
    return demands


def resolve_hosts(value: Any, topology: Topology, where: str) -> tuple[int, ...]:
    """Host ids from ints and selectors like ``"rack0"``, ``"rack1-8"`` or ``"host3"``."""
    items = value if isinstance(value, list) else [value]
    hosts: list[int] = []
    for item in items:
        if isinstance(item, int) and not isinstance(item, bool):
            hosts.append(item)
            continue
        match = _HOST_SELECTOR.match(str(item))
        if match is None:
            raise ScenarioInvalid(f"{where}: bad host selector {item!r}")
        first = int(match.group("first"))
        last = int(match.group("last") or first)
        if match.group("kind") == "host":
            hosts.extend(range(first, last + 1))
        else:
            for rack in range(first, last + 1):
                hosts.extend(topology.hosts_in(rack))
    for host in hosts:
        if not 0 <= host < topology.hosts:
            raise ScenarioInvalid(f"{where}: host {host} outside topology")
    return tuple(hosts)


def _topology(data: Mapping[str, Any]) -> Topology:
    values: dict[str, Any] = {}
    for key in ("racks", "hosts_per_rack", "spine_links", "ecn_threshold_bytes",
                "queue_limit_bytes"):
        if key in data:
            values[key] = int(data[key])
    for key in ("nic_rate", "uplink_rate"):
        if key in data:
            values[key] = _bandwidth(data[key], f"topology {key}")
    if "propagation_delay_us" in data:
        values["propagation_delay_ns"] = int(round(float(data["propagation_delay_us"]) * 1000))
    unknown = set(data) - set(values) - {"propagation_delay_us"}
    if unknown:
        raise ScenarioInvalid(f"topology: unknown keys {sorted(unknown)}")
    return Topology(**values)


def _workload(
    data: Mapping[str, Any], topology: Topology, services: Mapping[str, int]
) -> WorkloadSpec:
    name = str(_require(data, "name", "workload"))
    where = f"workload {name!r}"
    kind = _require(data, "kind", where)
    if kind not in WORKLOAD_KINDS:
        raise ScenarioInvalid(f"{where}: unknown kind {kind!r}")
    spec = WorkloadSpec(
        name=name,
        kind=kind,
        service=_service_id(_require(data, "service", where), services, where),
        src=resolve_hosts(_require(data, "src", where), topology, where),
        dst=resolve_hosts(_require(data, "dst", where), topology, where),
        rate=_bandwidth(data.get("rate", 0), where),
        flows=int(data.get("flows", 1)),
        size_bytes=int(data.get("size_bytes", 0)),
        load=float(data.get("load", 0.0)),
        capacity=_bandwidth(data.get("capacity", topology.nic_rate), where),
        on_s=float(data.get("on_s", 0.0)),
        off_s=float(data.get("off_s", 0.0)),
        start_s=None if data.get("start_s", 0.0) is None else float(data.get("start_s", 0.0)),
        stop_s=None if data.get("stop_s") is None else float(data["stop_s"]),
    )
    if not spec.src or not spec.dst:
        raise ScenarioInvalid(f"{where}: needs source and destination hosts")
    if kind == "rpc" and (spec.size_bytes <= 0 or not 0 <= spec.load <= 1.5):
        raise ScenarioInvalid(f"{where}: rpc needs size_bytes > 0 and load in [0, 1.5]")
    if kind in ("udp", "on_off", "steady") and spec.rate <= 0:
        raise ScenarioInvalid(f"{where}: {kind} needs a positive rate")
    if kind == "on_off" and (spec.on_s <= 0 or spec.off_s < 0):
        raise ScenarioInvalid(f"{where}: on_off needs on_s > 0 and off_s >= 0")
    if kind == "long_lived" and spec.flows < 1:
        raise ScenarioInvalid(f"{where}: long_lived needs flows >= 1")
    return spec


def _bound(value: Any, metric: str, where: str) -> float | None:
    if value is None:
        return None
    if metric.startswith("util") and isinstance(value, str):
        return _bandwidth(value, where)
    return float(value)


def _fct_bound(
    data: Mapping[str, Any], workload: WorkloadSpec | None, interval_s: float, where: str
) -> float:
    """Envelope FCT bound for the asserted workload's flow size.

    ``capacity`` defaults to the workload's and ``interval_s`` to the
    scenario's meter interval.
    """
    if workload is None or workload.size_bytes <= 0:
        raise ScenarioInvalid(f"{where}: max_fct_bound needs a workload with size_bytes")
    try:
        return fct_bound_from_convergence(
            int(_require(data, "conv_iters", where)),
            float(data.get("interval_s", interval_s)),
            _bandwidth(data.get("capacity", workload.capacity), where),
            float(_require(data, "rho", where)),
            workload.size_bytes * 8.0,
            int(data.get("burst_bytes", 0)) * 8.0,
        )
    except InvalidEnvelope as e:
        raise ScenarioInvalid(f"{where}: {e}") from e


def _assertion(
    data: Mapping[str, Any],
    services: Mapping[str, int],
    workloads: Sequence[WorkloadSpec] = (),
    meter_interval_s: float = METER_INTERVAL_S,
) -> AssertionSpec:
    metric = _require(data, "metric", "assertion")
    if metric not in METRICS:
        raise ScenarioInvalid(f"assertion: unknown metric {metric!r}")
    where = f"assertion {metric}"
    service = data.get("service")
    upper = _bound(data.get("max"), metric, where)
    if "max_fct_bound" in data:
        if upper is not None or not metric.startswith("fct"):
            raise ScenarioInvalid(f"{where}: max_fct_bound replaces max on fct metrics only")
        named = {w.name: w for w in workloads}
        upper = _fct_bound(
            data["max_fct_bound"], named.get(data.get("workload", "")), meter_interval_s, where
        )
    return AssertionSpec(
        metric=metric,
        scope=data.get("scope"),
        service=None if service is None else _service_id(service, services, where),
        services=tuple(_service_id(s, services, where) for s in data.get("services", ())),
        workload=data.get("workload"),
        link=data.get("link"),
        from_s=float(data.get("from_s", 0.0)),
        to_s=float(data.get("to_s", float("inf"))),
        min=_bound(data.get("min"), metric, where),
        max=upper,
        skip_zero=bool(data.get("skip_zero", False)),
    )


def place_policies(
    data: Mapping[str, Any], topology: Topology, services: Mapping[str, int]
) -> list[PlacedPolicy]:
    """Parse a scenario policy and bind it to its rack or host.

    ``"rack": "all"`` places one copy of the tree in every rack. A host
    selector such as ``"host4-23"`` places one copy on every selected host.
    """
    host = data.get("host")
    if isinstance(host, (str, list)):
        return [
            place_policy({**data, "host": h}, topology, services)
            for h in resolve_hosts(host, topology, "policy host")
        ]
    if data.get("rack") == "all":
        return [
            place_policy({**data, "rack": rack}, topology, services)
            for rack in range(topology.racks)
        ]
    return [place_policy(data, topology, services)]


def place_policy(
    data: Mapping[str, Any], topology: Topology, services: Mapping[str, int]
) -> PlacedPolicy:
    rack = data.get("rack")
    host = data.get("host")
    members: Sequence[int] = ()
    if rack is not None:
        if not 0 <= int(rack) < topology.racks:
            raise ScenarioInvalid(f"policy: rack {rack} outside topology")
        members = topology.hosts_in(int(rack))
    elif host is not None:
        if not 0 <= int(host) < topology.hosts:
            raise ScenarioInvalid(f"policy: host {host} outside topology")
        members = (int(host),)
    tree = parse_policy(data, services, members)
    point = tree.contention_point
    if point in (ContentionPoint.RACK_UP, ContentionPoint.RACK_DOWN) and rack is None:
        raise ScenarioInvalid(f"policy: {point.value} policy needs a rack")
    if point in (ContentionPoint.MACHINE_TX, ContentionPoint.MACHINE_RX) and host is None:
        raise ScenarioInvalid(f"policy: {point.value} policy needs a host")
    return PlacedPolicy(
        tree, None if rack is None else int(rack), None if host is None else int(host)
    )


def parse_scenario(data: Mapping[str, Any]) -> Scenario:
    """Build a :class:`Scenario` from its JSON object.

    Raises:
        ScenarioInvalid: On any schema or reference error.
        PolicyError: If a policy tree is invalid.
    """
    try:
        topology = _topology(data.get("topology", {}))
        services = {str(k): int(v) for k, v in data.get("services", {}).items()}
        engine = data.get("engine", "packet")
        if engine not in ENGINES:
            raise ScenarioInvalid(f"Unknown engine {engine!r}")
        policies = tuple(
            placed
            for raw in data.get("policies", ())
            for placed in place_policies(raw, topology, services)
        )
        workloads = tuple(_workload(w, topology, services) for w in data.get("workloads", ()))
        names = [w.name for w in workloads]
        if len(set(names)) != len(names):
            raise ScenarioInvalid("Workload names must be unique")
        events = []
        for raw in data.get("events", ()):
            kind = _require(raw, "kind", "event")
            if kind not in EVENT_KINDS:
                raise ScenarioInvalid(f"event: unknown kind {kind!r}")
            args = {k: v for k, v in raw.items() if k not in ("at_s", "kind")}
            if kind in ("stop_workload", "start_workload") and args.get("workload") not in names:
                raise ScenarioInvalid(f"event: {kind} of unknown workload {args.get('workload')!r}")
            events.append(EventSpec(float(_require(raw, "at_s", "event")), kind, args))
        fabric = data.get("fabric", {})
        caps = {
            _service_id(s, services, "fabric cap"): _bandwidth(v, "fabric cap")
            for s, v in fabric.get("caps", {}).items()
        }
        rack_capacity = fabric.get("rack_capacity")
        if rack_capacity is not None:
            rack_capacity = _bandwidth(rack_capacity, "fabric rack_capacity")
        params = BrokerParams.from_mapping(data.get("params", {}))
        scenario = Scenario(
            name=str(data.get("name", "scenario")),
            engine=engine,
            seed=int(data.get("seed", 0)),
            horizon_s=float(_require(data, "horizon_s", "scenario")),
            sample_interval_s=float(data.get("sample_interval_s", SAMPLE_INTERVAL_S)),
            brokers=bool(data.get("brokers", True)),
            shaping=bool(data.get("shaping", True)),
            rto_s=float(data.get("rto_s", MIN_RTO_S)),
            topology=topology,
            services=services,
            params=params,
            policies=policies,
            fabric_caps=caps,
            fabric_rack_capacity=rack_capacity,
            workloads=workloads,
            events=tuple(sorted(events, key=lambda e: e.at_s)),
            assertions=tuple(
                _assertion(a, services, workloads, params.meter_interval_s)
                for a in data.get("assertions", ())
            ),
        )
    except (KeyError, TypeError, AttributeError) as e:
        raise ScenarioInvalid(f"Malformed scenario: {e}") from e
    if scenario.horizon_s <= 0 or scenario.sample_interval_s <= 0:
        raise ScenarioInvalid("horizon_s and sample_interval_s must be positive")
    return scenario


def bundled_scenarios() -> list[str]:
    """Names of the scenarios shipped with the package."""
    root = resources.files("bwbroker.data").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_scenario_path(name_or_path: str | Path) -> Path:
    """A scenario file path; bare names resolve to bundled scenarios.

    Raises:
        FileNotFoundError: If neither a file nor a bundled scenario matches.
    """
    path = Path(name_or_path)
    if path.is_file():
        return path
    bundled = resources.files("bwbroker.data").joinpath("scenarios", f"{path.stem}.json")
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"No scenario file or bundled scenario named {str(name_or_path)!r}")


def load_scenario(name_or_path: str | Path) -> Scenario:
    path = resolve_scenario_path(name_or_path)
    logger.info("Loading scenario %s", path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ScenarioInvalid(f"{path}: scenario must be a JSON object")
    return parse_scenario(data)
