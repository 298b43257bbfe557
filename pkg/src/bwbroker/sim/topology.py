"""Links, routes and FIFO queues of the simulated cluster.

Every host has an egress link (host to rackswitch) and an ingress link
(rackswitch to host). Each rack has a pooled uplink and downlink made
of ``spine_links`` equal links; ECMP is modelled as ideal per-packet
balancing, so the pool behaves as one link of the summed rate. Traffic
inside a rack never touches the pool.

Link names:

- ``host{h}_tx`` / ``host{h}_rx``: a host's egress and ingress link.
- ``rack{r}_up`` / ``rack{r}_down``: a rack's pooled spine links.
- ``rack{r}_spine{i}``: one spine link of a rack, both directions.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import simpy

from bwbroker.data.config import Topology
from bwbroker.errors import UnknownLink
from bwbroker.utils.constants import NS_PER_S

logger = logging.getLogger(__name__)

_LINK_RE = re.compile(r"^(?:host(?P<host>\d+)_(?P<hdir>tx|rx)"
                      r"|rack(?P<rack>\d+)_(?:(?P<rdir>up|down)|spine(?P<spine>\d+)))$")


@dataclass(slots=True)
class Packet:
    """A data packet in flight.

    ``flow`` is -1 for packets of non-reactive sources.
    """

    flow: int
    seq: int
    src: int
    dst: int
    service: int
    size: int
    sent_ns: int
    weight: float = 1.0
    ecn: bool = False
    attempt: int = 0
    hop: int = 0


class LinkTable:
    """Capacity of every link, including spine and whole-link outages."""

    def __init__(self, topology: Topology) -> None:
        self.topology = topology
        self._base: dict[str, float] = {}
        for host in range(topology.hosts):
            self._base[f"host{host}_tx"] = topology.nic_rate
            self._base[f"host{host}_rx"] = topology.nic_rate
        for rack in range(topology.racks):
            self._base[f"rack{rack}_up"] = topology.uplink_rate
            self._base[f"rack{rack}_down"] = topology.uplink_rate
        self._down: set[str] = set()
        self._spines_down: dict[int, set[int]] = {}

    @property
    def names(self) -> list[str]:
        return list(self._base)

    def capacity(self, name: str) -> float:
        if name not in self._base:
            raise UnknownLink(f"Unknown link {name!r}")
        if name in self._down:
            return 0.0
        if name.startswith("rack"):
            rack = int(name[4:name.index("_")])
            up = self.topology.spine_links - len(self._spines_down.get(rack, ()))
            return self._base[name] * up / self.topology.spine_links
        return self._base[name]

    def toggle(self, name: str, up: bool) -> list[str]:
        """Take a link down or bring it back; returns the pooled links affected.

        Raises:
            UnknownLink: If ``name`` matches no link of the topology.
        """
        match = _LINK_RE.match(name)
        if match is None:
            raise UnknownLink(f"Unknown link {name!r}")
        if match.group("spine") is not None:
            rack, spine = int(match.group("rack")), int(match.group("spine"))
            if rack >= self.topology.racks or spine >= self.topology.spine_links:
                raise UnknownLink(f"Unknown link {name!r}")
            down = self._spines_down.setdefault(rack, set())
            if up:
                down.discard(spine)
            else:
                down.add(spine)
            affected = [f"rack{rack}_up", f"rack{rack}_down"]
        else:
            if name not in self._base:
                raise UnknownLink(f"Unknown link {name!r}")
            if up:
                self._down.discard(name)
            else:
                self._down.add(name)
            affected = [name]
        logger.info("link %s %s", name, "up" if up else "down")
        return affected

    def path(self, src: int, dst: int) -> tuple[str, ...]:
        """Links a packet from ``src`` to ``dst`` crosses, in order."""
        rack_src = self.topology.rack_of(src)
        rack_dst = self.topology.rack_of(dst)
        if rack_src == rack_dst:
            return (f"host{src}_tx", f"host{dst}_rx")
        return (f"host{src}_tx", f"rack{rack_src}_up", f"rack{rack_dst}_down", f"host{dst}_rx")


@dataclass
class QueueStats:
    """Counters of one queue over a sample interval."""

    lengths: list[int] = field(default_factory=list)
    enqueued: int = 0
    marked: int = 0
    dropped: int = 0
    service_bytes: dict[int, int] = field(default_factory=dict)

    def summary(self) -> tuple[int, float]:
        """Largest and 99th-percentile queue length seen at enqueue, bytes."""
        if not self.lengths:
            return 0, 0.0
        arr = np.asarray(self.lengths)
        return int(arr.max()), float(np.percentile(arr, 99))


class LinkQueue:
    """Work-conserving FIFO in front of one link.

    A packet is ECN-marked on enqueue iff the bytes already queued exceed
    the marking threshold, and dropped iff it would push the queue past
    the hard limit. Bytes of the packet being transmitted count as queued.
    """

    def __init__(
        self,
        env: simpy.Environment,
        name: str,
        capacity: float,
        ecn_threshold: int,
        limit: int,
        propagation_ns: int,
        forward: Callable[[Packet], None],
    ) -> None:
        self.env = env
        self.name = name
        self.capacity = capacity
        self.ecn_threshold = ecn_threshold
        self.limit = limit
        self.propagation_ns = propagation_ns
        self.forward = forward
        self.bytes_queued = 0
        self.delivered_bytes = 0
        self.stats = QueueStats()
        self._fifo: simpy.Store = simpy.Store(env)
        env.process(self._serve())

    def enqueue(self, pkt: Packet) -> bool:
        """Offer a packet; returns False if it was dropped."""
        self.stats.lengths.append(self.bytes_queued)
        if self.capacity <= 0 or self.bytes_queued + pkt.size > self.limit:
            self.stats.dropped += 1
            return False
        if self.bytes_queued > self.ecn_threshold:
            pkt.ecn = True
            self.stats.marked += 1
        self.stats.enqueued += 1
        self.bytes_queued += pkt.size
        self._fifo.put(pkt)
        return True

    def set_capacity(self, capacity: float) -> None:
        self.capacity = capacity
        if capacity <= 0 and self._fifo.items:
            lost = len(self._fifo.items)
            for pkt in self._fifo.items:
                self.bytes_queued -= pkt.size
            self.stats.dropped += lost
            self._fifo.items.clear()
            logger.debug("%s down: dropped %d queued packets", self.name, lost)

    def take_stats(self) -> QueueStats:
        stats, self.stats = self.stats, QueueStats()
        return stats

    def _serve(self) -> Any:
        while True:
            pkt = yield self._fifo.get()
            if self.capacity <= 0:
                self.bytes_queued -= pkt.size
                self.stats.dropped += 1
                continue
            yield self.env.timeout(max(1, round(pkt.size * 8 * NS_PER_S / self.capacity)))
            self.bytes_queued -= pkt.size
            self.delivered_bytes += pkt.size
            self.stats.service_bytes[pkt.service] = (
                self.stats.service_bytes.get(pkt.service, 0) + pkt.size
            )
            self.env.timeout(self.propagation_ns).callbacks.append(
                lambda _, p=pkt: self.forward(p)
            )


class Network:
    """Queues of every link, wired along :meth:`LinkTable.path` routes."""

    def __init__(
        self,
        env: simpy.Environment,
        topology: Topology,
        deliver: Callable[[Packet], None],
    ) -> None:
        self.env = env
        self.topology = topology
        self.links = LinkTable(topology)
        self.deliver = deliver
        self.queues = {
            name: LinkQueue(
                env, name, self.links.capacity(name), topology.ecn_threshold_bytes,
                topology.queue_limit_bytes, topology.propagation_delay_ns, self._next_hop,
            )
            for name in self.links.names
        }
        self._paths: dict[tuple[int, int], tuple[LinkQueue, ...]] = {}

    def _route(self, src: int, dst: int) -> tuple[LinkQueue, ...]:
        route = self._paths.get((src, dst))
        if route is None:
            route = tuple(self.queues[name] for name in self.links.path(src, dst))
            self._paths[(src, dst)] = route
        return route

    def hops(self, src: int, dst: int) -> int:
        return len(self._route(src, dst))

    def send(self, pkt: Packet) -> bool:
        """Hand a packet to its source host's egress queue."""
        pkt.hop = 0
        return self._route(pkt.src, pkt.dst)[0].enqueue(pkt)

    def _next_hop(self, pkt: Packet) -> None:
        route = self._route(pkt.src, pkt.dst)
        pkt.hop += 1
        if pkt.hop == len(route):
            self.deliver(pkt)
        else:
            route[pkt.hop].enqueue(pkt)

    def link_toggle(self, name: str, up: bool) -> None:
        """Change a link's state now; packets queued on a downed link are lost.

        Raises:
            UnknownLink: If ``name`` matches no link.
        """
        for affected in self.links.toggle(name, up):
            self.queues[affected].set_capacity(self.links.capacity(affected))
