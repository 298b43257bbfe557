"""Static sharing policies and the runtime policies derived from them.

A policy is a tree of service nodes for one contention point and one
direction. Each node carries a guaranteed minimum, a maximum and a weight
for sharing excess bandwidth. Leaves are the enforceable endpoints, a
(machine, service) pair. Trees are immutable and safe to share.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

from bwbroker.errors import (
    CycleDetected,
    GuaranteeOvercommit,
    MinExceedsMax,
    OrphanNode,
    PolicyError,
    UnknownLeaf,
)
from bwbroker.utils.units import UNLIMITED, MaxBandwidth, cap_value, format_bandwidth

logger = logging.getLogger(__name__)


class ContentionPoint(enum.Enum):
    """Where demand can exceed capacity."""

    MACHINE_TX = "MachineTx"
    MACHINE_RX = "MachineRx"
    RACK_UP = "RackUp"
    RACK_DOWN = "RackDown"
    FABRIC = "Fabric"

    @property
    def default_direction(self) -> Direction:
        if self in (ContentionPoint.MACHINE_RX, ContentionPoint.RACK_DOWN):
            return Direction.RX
        return Direction.TX


class Direction(enum.Enum):
    TX = "tx"
    RX = "rx"


class Endpoint(NamedTuple):
    """A (machine, service) pair; the unit a shaper enforces."""

    machine: int
    service: int


@dataclass(frozen=True)
class PolicyNode:
    """One service in a policy hierarchy.

    Attributes:
        id: Service id, unique within the tree (u32).
        parent: Parent id, or None for the root.
        min_bw: Guaranteed bandwidth in bits/s.
        max_bw: Bandwidth limit in bits/s, or UNLIMITED.
        weight: Share of excess bandwidth relative to siblings.
        name: Optional display label.
        machine: Machine the node is bound to (leaves only).
        service: Service the node belongs to, for tagging and fabric caps.
    """

    id: int
    parent: int | None = None
    min_bw: int = 0
    max_bw: MaxBandwidth = UNLIMITED
    weight: float = 1.0
    name: str = ""
    machine: int | None = None
    service: int | None = None

    @property
    def label(self) -> str:
        return self.name or str(self.id)

    @property
    def cap(self) -> float:
        return cap_value(self.max_bw)


@dataclass(frozen=True)
class PolicyTree:
    """A rooted service hierarchy for one contention point and direction.

    Attributes:
        contention_point: The resource being shared.
        capacity: Capacity of the resource in bits/s.
        nodes: All nodes, root included.
        direction: TX or RX; defaults from the contention point.
    """

    contention_point: ContentionPoint
    capacity: int
    nodes: tuple[PolicyNode, ...]
    direction: Direction | None = None

    def __post_init__(self) -> None:
        if self.direction is None:
            object.__setattr__(self, "direction", self.contention_point.default_direction)
        if not isinstance(self.nodes, tuple):
            object.__setattr__(self, "nodes", tuple(self.nodes))

    @cached_property
    def _index(self) -> dict[int, PolicyNode]:
        return {node.id: node for node in self.nodes}

    @cached_property
    def _children(self) -> dict[int, tuple[int, ...]]:
        children: dict[int, list[int]] = {node.id: [] for node in self.nodes}
        for node in self.nodes:
            if node.parent is not None and node.parent in children:
                children[node.parent].append(node.id)
        return {nid: tuple(sorted(kids)) for nid, kids in children.items()}

    @cached_property
    def _endpoints(self) -> dict[Endpoint, int]:
        return {self.endpoint(leaf): leaf for leaf in self.leaves}

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._index

    def node(self, node_id: int) -> PolicyNode:
        try:
            return self._index[node_id]
        except KeyError:
            raise UnknownLeaf(f"Unknown node {node_id}", node=node_id) from None

    def children(self, node_id: int) -> tuple[int, ...]:
        return self._children.get(node_id, ())

    @property
    def root(self) -> int:
        roots = [node.id for node in self.nodes if node.parent is None]
        if len(roots) != 1:
            raise PolicyError(f"Tree has {len(roots)} roots, expected exactly one")
        return roots[0]

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        return tuple(sorted(nid for nid, kids in self._children.items() if not kids))

    def ancestors(self, node_id: int) -> Iterator[int]:
        """Yield the ids above ``node_id``, nearest first."""
        seen = {node_id}
        parent = self.node(node_id).parent
        while parent is not None and parent not in seen:
            seen.add(parent)
            yield parent
            parent = self._index[parent].parent if parent in self._index else None

    def post_order(self) -> list[int]:
        """Node ids with every child before its parent, siblings by id."""
        order: list[int] = []
        stack: list[tuple[int, bool]] = [(self.root, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                order.append(nid)
                continue
            stack.append((nid, True))
            for child in reversed(self.children(nid)):
                stack.append((child, False))
        return order

    def endpoint(self, leaf: int) -> Endpoint:
        node = self.node(leaf)
        machine = node.machine if node.machine is not None else 0
        service = node.service if node.service is not None else node.id
        return Endpoint(machine, service)

    def leaf_for(self, endpoint: Endpoint) -> int | None:
        return self._endpoints.get(endpoint)

    def endpoints(self) -> list[Endpoint]:
        return [self.endpoint(leaf) for leaf in self.leaves]

    def with_service_cap(self, service: int, cap: float) -> PolicyTree:
        """Copy of the tree with the top-most nodes of ``service`` capped at ``cap``.

        The new maximum never drops below a node's own guarantee.
        """
        nodes = []
        for node in self.nodes:
            parent = self._index.get(node.parent) if node.parent is not None else None
            top_most = node.service == service and (parent is None or parent.service != service)
            if top_most and cap < node.cap:
                limit = max(cap, float(node.min_bw))
                if limit > cap:
                    logger.debug(
                        "Cap %s for service %d held at guarantee of node %s",
                        format_bandwidth(cap), service, node.label,
                    )
                node = dataclasses.replace(node, max_bw=int(limit))
            nodes.append(node)
        return dataclasses.replace(self, nodes=tuple(nodes))


class ViolationKind(enum.Enum):
    EMPTY_TREE = "EmptyTree"
    DUPLICATE_ID = "DuplicateId"
    ORPHAN_NODE = "OrphanNode"
    MULTIPLE_ROOTS = "MultipleRoots"
    CYCLE_DETECTED = "CycleDetected"
    MIN_EXCEEDS_MAX = "MinExceedsMax"
    NON_POSITIVE_WEIGHT = "NonPositiveWeight"
    GUARANTEE_OVERCOMMIT = "GuaranteeOvercommit"


_VIOLATION_ERRORS: dict[ViolationKind, type[PolicyError]] = {
    ViolationKind.ORPHAN_NODE: OrphanNode,
    ViolationKind.CYCLE_DETECTED: CycleDetected,
    ViolationKind.MIN_EXCEEDS_MAX: MinExceedsMax,
    ViolationKind.GUARANTEE_OVERCOMMIT: GuaranteeOvercommit,
}


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    node: int | None
    message: str


@dataclass(frozen=True)
class ValidationResult:
    """Outcome of :func:`validate_tree`; empty ``violations`` means Ok."""

    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[ViolationKind]:
        return {v.kind for v in self.violations}

    def raise_for_violations(self) -> None:
        if self.ok:
            return
        first = self.violations[0]
        error = _VIOLATION_ERRORS.get(first.kind, PolicyError)
        message = "; ".join(v.message for v in self.violations)
        logger.error("Invalid policy: %s", message)
        raise error(message, node=first.node)


def validate_tree(tree: PolicyTree) -> ValidationResult:
    """Check structure and admission rules of a policy tree.

    Reports every violation rather than stopping at the first one. The
    result depends only on the tree.
    """
    if not tree.nodes:
        return ValidationResult((Violation(ViolationKind.EMPTY_TREE, None, "Tree has no nodes"),))

    violations: list[Violation] = []
    seen: set[int] = set()
    for node in tree.nodes:
        if node.id in seen:
            violations.append(
                Violation(ViolationKind.DUPLICATE_ID, node.id, f"Duplicate node id {node.id}")
            )
        seen.add(node.id)

    by_id = {node.id: node for node in tree.nodes}
    for node in sorted(by_id.values(), key=lambda n: n.id):
        if node.parent is not None and node.parent not in by_id:
            violations.append(
                Violation(
                    ViolationKind.ORPHAN_NODE, node.id,
                    f"Node {node.label} has unknown parent {node.parent}",
                )
            )
        if node.weight <= 0:
            violations.append(
                Violation(
                    ViolationKind.NON_POSITIVE_WEIGHT, node.id,
                    f"Node {node.label} has weight {node.weight}",
                )
            )
        if node.min_bw < 0 or node.min_bw > node.cap:
            violations.append(
                Violation(
                    ViolationKind.MIN_EXCEEDS_MAX, node.id,
                    f"Node {node.label} min {format_bandwidth(node.min_bw)} "
                    f"exceeds max {format_bandwidth(node.cap)}",
                )
            )

    roots = sorted(nid for nid, node in by_id.items() if node.parent is None)
    if len(roots) > 1:
        violations.append(
            Violation(ViolationKind.MULTIPLE_ROOTS, roots[1], f"Tree has roots {roots}")
        )

    in_cycle: set[int] = set()
    for start in sorted(by_id):
        path: list[int] = []
        on_path: set[int] = set()
        current: int | None = start
        while current is not None and current in by_id and current not in in_cycle:
            if current in on_path:
                cycle = path[path.index(current):]
                in_cycle.update(cycle)
                violations.append(
                    Violation(
                        ViolationKind.CYCLE_DETECTED, min(cycle),
                        f"Cycle through nodes {sorted(cycle)}",
                    )
                )
                break
            path.append(current)
            on_path.add(current)
            current = by_id[current].parent

    children: dict[int, list[PolicyNode]] = {}
    for node in by_id.values():
        if node.parent is not None:
            children.setdefault(node.parent, []).append(node)
    for parent_id, kids in sorted(children.items()):
        if parent_id not in by_id:
            continue
        guaranteed = sum(kid.min_bw for kid in kids)
        parent = by_id[parent_id]
        if parent.parent is None:
            budget = min(float(tree.capacity), parent.cap)
            where = "capacity"
        else:
            budget = float(parent.min_bw)
            where = "guarantee"
        if guaranteed > budget:
            violations.append(
                Violation(
                    ViolationKind.GUARANTEE_OVERCOMMIT, parent_id,
                    f"Children of {parent.label} guarantee {format_bandwidth(guaranteed)}, "
                    f"above its {where} {format_bandwidth(budget)}",
                )
            )

    return ValidationResult(tuple(violations))


def effective_cap(tree: PolicyTree, leaf: int) -> int:
    """Most constrained maximum over ``leaf`` and its ancestors, within capacity.

    Raises:
        UnknownLeaf: If ``leaf`` is not in the tree.
    """
    if leaf not in tree:
        raise UnknownLeaf(f"Unknown leaf {leaf}", node=leaf)
    cap = min(float(tree.capacity), tree.node(leaf).cap)
    for ancestor in tree.ancestors(leaf):
        cap = min(cap, tree.node(ancestor).cap)
    return int(cap)


@dataclass(frozen=True)
class LeafRuntime:
    """Runtime capacities of one endpoint.

    A direction left as None is not governed by the policy that produced it.
    """

    tx_capacity: float | None = None
    rx_capacity: float | None = None
    tx_limited: bool = False
    rx_limited: bool = False

    @property
    def limited(self) -> bool:
        return self.tx_limited or self.rx_limited

    def capacity(self, direction: Direction) -> float | None:
        return self.tx_capacity if direction is Direction.TX else self.rx_capacity

    def merge(self, other: LeafRuntime) -> LeafRuntime:
        """Combine two runtimes; where both govern a direction the tighter wins."""
        return LeafRuntime(
            tx_capacity=_tighter(self.tx_capacity, other.tx_capacity),
            rx_capacity=_tighter(self.rx_capacity, other.rx_capacity),
            tx_limited=self.tx_limited or other.tx_limited,
            rx_limited=self.rx_limited or other.rx_limited,
        )


def _tighter(a: float | None, b: float | None) -> float | None:
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


@dataclass(frozen=True)
class RuntimePolicy:
    """Dynamically computed per-endpoint capacities that are actually enforced."""

    leaves: Mapping[Endpoint, LeafRuntime] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.leaves)

    def __iter__(self) -> Iterator[Endpoint]:
        return iter(sorted(self.leaves))

    def __getitem__(self, endpoint: Endpoint) -> LeafRuntime:
        return self.leaves[endpoint]

    def get(self, endpoint: Endpoint) -> LeafRuntime | None:
        return self.leaves.get(endpoint)

    def merge(self, other: RuntimePolicy) -> RuntimePolicy:
        merged = dict(self.leaves)
        for endpoint, runtime in other.leaves.items():
            merged[endpoint] = merged[endpoint].merge(runtime) if endpoint in merged else runtime
        return RuntimePolicy(merged)

    def for_machine(self, machine: int) -> RuntimePolicy:
        return RuntimePolicy({ep: rt for ep, rt in self.leaves.items() if ep.machine == machine})


def static_runtime_policy(tree: PolicyTree) -> RuntimePolicy:
    """The runtime policy a shaper falls back to: every leaf at its effective cap."""
    leaves = {}
    for leaf in tree.leaves:
        cap = float(effective_cap(tree, leaf))
        if tree.direction is Direction.TX:
            leaves[tree.endpoint(leaf)] = LeafRuntime(tx_capacity=cap)
        else:
            leaves[tree.endpoint(leaf)] = LeafRuntime(rx_capacity=cap)
    return RuntimePolicy(leaves)


def enforced_rate(
    policy: RuntimePolicy, endpoints: Iterable[Endpoint], direction: Direction
) -> float:
    """Rate for traffic charged to several services: the minimum of their capacities."""
    rate = float("inf")
    for endpoint in endpoints:
        runtime = policy.get(endpoint)
        if runtime is None:
            continue
        capacity = runtime.capacity(direction)
        if capacity is not None:
            rate = min(rate, capacity)
    return rate
