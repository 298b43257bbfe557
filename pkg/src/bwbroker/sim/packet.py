"""Packet-level engine on simpy with an integer-nanosecond clock.

Senders pass every packet through their service's rate limiter; a
transfer whose packet is held back waits for the limiter, while a
constant-rate source drops the packet locally. Receivers account each
delivered packet to their service meter and send the resulting feedback
back to the sender's limiter after the path's propagation delay. ACKs
and feedback travel on propagation delay alone.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import Any

import simpy

from bwbroker.core.machine_shaper import DelayUntil
from bwbroker.core.params import seconds_to_ns
from bwbroker.data.config import EventSpec, Scenario, WorkloadSpec
from bwbroker.sim.control import (
    CONTROL,
    EVENT,
    ControlPlane,
    action_schedule,
    apply_control_event,
    build_shapers,
)
from bwbroker.sim.topology import Network, Packet
from bwbroker.sim.trace import QueueSample, TraceSet, UtilSample, rack_util_samples
from bwbroker.sim.transport import (
    AimdState,
    FlowRecord,
    segment_bytes,
    segments_for,
    transport_on_ack,
    transport_on_mark,
    transport_on_timeout,
)
from bwbroker.sim.workload import (
    WorkloadState,
    flow_pairs,
    rpc_workload,
    source_rng,
)
from bwbroker.utils.constants import MSS_BYTES, NS_PER_S

logger = logging.getLogger(__name__)


@dataclass
class _Transfer:
    record: FlowRecord
    weight: float
    segments: float
    aimd: AimdState = field(default_factory=AimdState)
    next_seq: int = 0
    inflight: dict[int, int] = field(default_factory=dict)
    retransmit: deque[int] = field(default_factory=deque)
    received: set[int] = field(default_factory=set)
    acked: int = 0
    attempts: int = 0
    done: bool = False
    wake: simpy.Event | None = None

    def next_segment(self) -> int | None:
        if self.done or len(self.inflight) >= self.aimd.window:
            return None
        if self.retransmit:
            return self.retransmit[0]
        if self.next_seq < self.segments:
            return self.next_seq
        return None

    def take(self, seq: int) -> int:
        if self.retransmit and self.retransmit[0] == seq:
            self.retransmit.popleft()
        else:
            self.next_seq += 1
        self.attempts += 1
        self.inflight[seq] = self.attempts
        return self.attempts

    def notify(self) -> None:
        if self.wake is not None and not self.wake.triggered:
            self.wake.succeed()


class PacketEngine:
    """One packet-level run of a scenario."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.topology = scenario.topology
        self.env = simpy.Environment()
        self.shaping = scenario.shaping
        self.shapers = build_shapers(scenario)
        self.control = ControlPlane(scenario, self.shapers)
        self.network = Network(self.env, self.topology, self._deliver)
        self.workloads = WorkloadState(scenario.workloads)
        self.transfers: list[_Transfer] = []
        self.local_drops: dict[str, int] = {}
        self.util: list[UtilSample] = []
        self.queue_samples: list[QueueSample] = []
        self._by_workload: dict[str, list[_Transfer]] = {}
        self._services = sorted(
            set(scenario.services.values()) | {w.service for w in scenario.workloads}
        ) or [0]

    @property
    def now(self) -> int:
        return int(self.env.now)

    def run(self) -> TraceSet:
        horizon_ns = seconds_to_ns(self.scenario.horizon_s)
        self.env.process(self._clock())
        logger.info("packet engine: %s, horizon %.3fs", self.scenario.name,
                    self.scenario.horizon_s)
        self.env.run(until=horizon_ns + 1)
        trace = TraceSet(
            scenario=self.scenario.name,
            seed=self.scenario.seed,
            engine="packet",
            sample_interval_s=self.scenario.sample_interval_s,
            util=self.util,
            flows=[t.record for t in self.transfers],
            alloc=self.control.trace,
            queues=self.queue_samples,
            fabric_reverts=dict(self.control.fabric_reverts),
            local_drops=dict(sorted(self.local_drops.items())),
        )
        logger.info("packet engine: %d transfers, %d util rows", len(trace.flows), len(trace.util))
        return trace

    def _after(self, delay_ns: int, action: Callable[[], None]) -> None:
        self.env.timeout(delay_ns).callbacks.append(lambda _: action())

    def _clock(self) -> Iterator[Any]:
        for time_ns, kind, _, payload in action_schedule(self.scenario):
            if time_ns > self.now:
                yield self.env.timeout(time_ns - self.now)
            if kind == CONTROL:
                self.control.step(time_ns)
            elif kind == EVENT:
                self._apply_event(payload)
            else:
                self._sample(time_ns)

    def _apply_event(self, event: EventSpec) -> None:
        logger.info("t=%.3fs %s %s", event.at_s, event.kind, dict(event.args))
        if event.kind == "start_workload":
            spec = self.scenario.workload(event.args["workload"])
            if self.workloads.start(spec.name, self.now / NS_PER_S):
                self._launch(spec)
        elif event.kind == "stop_workload":
            spec = self.scenario.workload(event.args["workload"])
            if self.workloads.stop(spec.name):
                for transfer in self._by_workload.get(spec.name, ()):
                    if math.isinf(transfer.segments):
                        transfer.done = True
                        transfer.notify()
        else:
            apply_control_event(self.control, self.scenario, event, self.now,
                                self.network.link_toggle)

    def _sample(self, time_ns: int) -> None:
        interval_s = self.scenario.sample_interval_s
        start_s = (time_ns - seconds_to_ns(interval_s)) / NS_PER_S
        carried = {name: q.stats.service_bytes for name, q in self.network.queues.items()}
        self.util.extend(
            rack_util_samples(start_s, interval_s, self.topology.racks, self._services, carried)
        )
        for name, queue in self.network.queues.items():
            stats = queue.take_stats()
            if stats.enqueued or stats.dropped:
                max_bytes, p99 = stats.summary()
                self.queue_samples.append(
                    QueueSample(start_s, name, max_bytes, p99, stats.enqueued, stats.marked,
                                stats.dropped)
                )

    def _launch(self, spec: WorkloadSpec) -> None:
        generation = self.workloads.generation[spec.name]
        if spec.kind == "rpc":
            self.env.process(self._rpc_source(spec, generation))
        elif spec.kind == "long_lived":
            for src, dst in flow_pairs(spec, self.topology):
                self._open(spec, src, dst, math.inf)
        else:
            for index, (src, dst) in enumerate(flow_pairs(spec, self.topology)):
                self.env.process(self._stream(spec, generation, index, src, dst))

    def _open(self, spec: WorkloadSpec, src: int, dst: int, size: float) -> _Transfer:
        record = FlowRecord(len(self.transfers), spec.name, spec.service, src, dst, size, self.now)
        weight = self.shapers[src].sender_weight(spec.service)
        transfer = _Transfer(record, weight, segments_for(size))
        self.transfers.append(transfer)
        self._by_workload.setdefault(spec.name, []).append(transfer)
        self.env.process(self._send(transfer))
        return transfer

    def _rpc_source(self, spec: WorkloadSpec, generation: int) -> Iterator[Any]:
        seed = self.scenario.seed
        arrivals = rpc_workload(
            spec.size_bytes, spec.load, spec.capacity,
            source_rng(seed, spec.name, 2 * generation), self.now / NS_PER_S,
        )
        picks = source_rng(seed, spec.name, 2 * generation + 1)
        for t in arrivals:
            yield self.env.timeout(max(0, seconds_to_ns(t) - self.now))
            if not self.workloads.running(spec.name, generation):
                return
            src = spec.src[int(picks.integers(len(spec.src)))]
            choices = [d for d in spec.dst if d != src] or list(spec.dst)
            dst = choices[int(picks.integers(len(choices)))]
            self._open(spec, src, dst, float(spec.size_bytes))

    def _stream(
        self, spec: WorkloadSpec, generation: int, index: int, src: int, dst: int
    ) -> Iterator[Any]:
        gap = max(1, round(MSS_BYTES * 8 * NS_PER_S / spec.rate))
        rng = source_rng(self.scenario.seed, spec.name, index)
        yield self.env.timeout(int(rng.integers(gap)))
        targets = [dst]
        if spec.kind == "udp":
            others = [d for d in spec.dst if d != src] or [dst]
            shift = index % len(others)
            targets = others[shift:] + others[:shift]
        shaper = self.shapers[src]
        weight = shaper.sender_weight(spec.service)
        sent = 0
        while self.workloads.running(spec.name, generation):
            if self.workloads.sending(spec, self.now / NS_PER_S):
                target = targets[sent % len(targets)]
                sent += 1
                allowed = True
                if self.shaping:
                    limiter = shaper.limiter(spec.service)
                    allowed = not isinstance(limiter.try_send(target, MSS_BYTES, self.now),
                                             DelayUntil)
                if allowed:
                    shaper.record_tx(spec.service, MSS_BYTES)
                    self.network.send(
                        Packet(-1, sent, src, target, spec.service, MSS_BYTES, self.now, weight)
                    )
                else:
                    self.local_drops[spec.name] = self.local_drops.get(spec.name, 0) + 1
            yield self.env.timeout(gap)

    def _send(self, transfer: _Transfer) -> Iterator[Any]:
        record = transfer.record
        shaper = self.shapers[record.src]
        limiter = shaper.limiter(record.service) if self.shaping else None
        rto_s = self.scenario.rto_s
        while not transfer.done:
            seq = transfer.next_segment()
            if seq is None:
                transfer.wake = self.env.event()
                yield transfer.wake
                transfer.wake = None
                continue
            size = segment_bytes(seq, record.size_bytes)
            if limiter is not None:
                decision = limiter.try_send(record.dst, size, self.now)
                if isinstance(decision, DelayUntil):
                    yield self.env.timeout(decision.time_ns - self.now)
                    continue
            attempt = transfer.take(seq)
            shaper.record_tx(record.service, size)
            self.network.send(Packet(record.flow, seq, record.src, record.dst, record.service,
                                     size, self.now, transfer.weight, attempt=attempt))
            self._after(transfer.aimd.rto_ns(rto_s),
                        lambda t=transfer, s=seq, a=attempt: self._on_timeout(t, s, a))

    def _deliver(self, pkt: Packet) -> None:
        receiver = self.shapers[pkt.dst]
        receiver.record_rx(pkt.service, pkt.size)
        delay = self.network.hops(pkt.src, pkt.dst) * self.topology.propagation_delay_ns
        if self.shaping:
            meter = receiver.meter(pkt.service)
            for fb in meter.on_packet_received(pkt.src, pkt.size, pkt.ecn, self.now, pkt.weight):
                limiter = self.shapers[pkt.src].limiter(fb.meter_service)
                self._after(delay, lambda lim=limiter, f=fb: lim.on_feedback(f, self.now))
        if pkt.flow < 0:
            return
        transfer = self.transfers[pkt.flow]
        if pkt.seq not in transfer.received:
            transfer.received.add(pkt.seq)
            transfer.record.delivered_bytes += pkt.size
            if len(transfer.received) == transfer.segments:
                transfer.record.complete(self.now)
        self._after(delay, lambda: self._on_ack(transfer, pkt))

    def _on_ack(self, transfer: _Transfer, pkt: Packet) -> None:
        if transfer.inflight.get(pkt.seq) != pkt.attempt:
            return
        del transfer.inflight[pkt.seq]
        transfer.acked += 1
        transfer.aimd.sample_rtt(self.now - pkt.sent_ns)
        if pkt.ecn:
            transport_on_mark(transfer.aimd, self.now)
        else:
            transport_on_ack(transfer.aimd)
        if transfer.acked >= transfer.segments:
            transfer.done = True
        transfer.notify()

    def _on_timeout(self, transfer: _Transfer, seq: int, attempt: int) -> None:
        if transfer.done or transfer.inflight.get(seq) != attempt:
            return
        del transfer.inflight[seq]
        transfer.retransmit.append(seq)
        transport_on_timeout(transfer.aimd, self.now)
        logger.debug("flow %d: segment %d timed out", transfer.record.flow, seq)
        transfer.notify()
