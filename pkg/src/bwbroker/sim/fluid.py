"""Flow-level engine for broker-timescale experiments.

Time advances in fixed steps of a tenth of the rack interval. In every
step the active flows share the links by weighted max-min fairness, with
each host's service caps acting as extra virtual links: one per
(sender, service) for the transmit cap and one per (receiver, service)
for the receive cap. Rate meters and per-destination limiters are not
modelled; the receive cap stands in for the meter's converged rate.

Workload lifecycle, broker ticks and samples follow the same schedule
as the packet engine. Events falling inside a step are applied at the
next step boundary, and RPCs that arrive inside a step start sending at
the next boundary (their FCT counts from the arrival).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bwbroker.core.params import seconds_to_ns
from bwbroker.core.policy import Direction
from bwbroker.data.config import EventSpec, Scenario, WorkloadSpec
from bwbroker.sim.control import (
    CONTROL,
    EVENT,
    ControlPlane,
    action_schedule,
    apply_control_event,
    build_shapers,
)
from bwbroker.sim.topology import LinkTable
from bwbroker.sim.trace import TraceSet, UtilSample, rack_util_samples
from bwbroker.sim.transport import FlowRecord
from bwbroker.sim.workload import WorkloadState, flow_pairs, rpc_workload, source_rng
from bwbroker.utils.constants import FLUID_STEPS_PER_RACK_INTERVAL, MSS_BYTES, NS_PER_S

logger = logging.getLogger(__name__)

_RELATIVE_EPS = 1e-9


def max_min_rates(
    incidence: ArrayLike,
    capacity: ArrayLike,
    demand: ArrayLike,
    weight: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Weighted max-min fair rates of flows over shared links.

    Progressive filling: all unfrozen flows grow in proportion to their
    weights until a link saturates or a flow meets its demand; flows on
    saturated links and satisfied flows freeze, and the rest keep
    growing.

    Args:
        incidence: (links, flows) boolean matrix; True where the flow
            crosses the link.
        capacity: Capacity of every link, bits/s.
        demand: Offered rate of every flow; ``inf`` for backlogged flows.
        weight: Positive flow weights; all ones by default.

    Returns:
        Rate of every flow, bits/s.

    Raises:
        ValueError: If shapes disagree, a weight is not positive, or a
            backlogged flow crosses no link.
    """
    a = np.asarray(incidence, dtype=bool)
    cap = np.asarray(capacity, dtype=np.float64)
    want = np.asarray(demand, dtype=np.float64)
    n_links, n_flows = a.shape if a.ndim == 2 else (0, 0)
    if a.ndim != 2 or cap.shape != (n_links,) or want.shape != (n_flows,):
        raise ValueError(
            f"Shapes disagree: incidence {a.shape}, capacity {cap.shape}, demand {want.shape}"
        )
    w = np.ones(n_flows) if weight is None else np.asarray(weight, dtype=np.float64)
    if w.shape != (n_flows,) or np.any(w <= 0):
        raise ValueError("Weights must be positive, one per flow")
    if np.any(np.isinf(want) & ~a.any(axis=0)):
        raise ValueError("A backlogged flow must cross at least one link")

    matrix = a.astype(np.float64)
    rates = np.zeros(n_flows)
    remaining = np.maximum(cap, 0.0)
    active = want > 0
    saturated_links = remaining <= 0
    active &= ~a[saturated_links].any(axis=0)
    while active.any():
        w_active = np.where(active, w, 0.0)
        link_weight = matrix @ w_active
        loaded = link_weight > 0
        with np.errstate(divide="ignore"):
            link_level = np.where(loaded, remaining / np.where(loaded, link_weight, 1.0), np.inf)
        flow_level = np.where(active, (want - rates) / w, np.inf)
        level = min(float(link_level.min(initial=np.inf)), float(flow_level.min()))
        growth = level * w_active
        rates += growth
        remaining = np.maximum(remaining - matrix @ growth, 0.0)
        full = loaded & (remaining <= _RELATIVE_EPS * np.maximum(cap, 1.0))
        done = rates >= want - _RELATIVE_EPS * np.where(np.isinf(want), 1.0, np.abs(want))
        active &= ~(done | a[full].any(axis=0))
    return rates


@dataclass
class _FluidFlow:
    workload: str
    service: int
    src: int
    dst: int
    weight: float
    offered: float
    spec: WorkloadSpec | None = None
    record: FlowRecord | None = None
    remaining_bytes: float = math.inf
    delivered: float = 0.0


@dataclass
class _RpcSource:
    spec: WorkloadSpec
    arrivals: Iterator[float]
    picks: np.random.Generator
    next_s: float | None


class FluidEngine:
    """One flow-level run of a scenario."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.topology = scenario.topology
        self.shaping = scenario.shaping
        self.shapers = build_shapers(scenario)
        self.control = ControlPlane(scenario, self.shapers)
        self.links = LinkTable(self.topology)
        self.capacity = {name: self.links.capacity(name) for name in self.links.names}
        self.workloads = WorkloadState(scenario.workloads)
        self.flows: list[_FluidFlow] = []
        self.records: list[FlowRecord] = []
        self.rpc: dict[str, _RpcSource] = {}
        self.util: list[UtilSample] = []
        self.carried: dict[str, dict[int, float]] = {}
        self.local_drops: dict[str, float] = {}
        self.step_ns = max(1, scenario.params.rack_interval_ns // FLUID_STEPS_PER_RACK_INTERVAL)
        self.now = 0
        self._services = sorted(
            set(scenario.services.values()) | {w.service for w in scenario.workloads}
        ) or [0]

    def run(self) -> TraceSet:
        horizon_ns = seconds_to_ns(self.scenario.horizon_s)
        logger.info("fluid engine: %s, horizon %.3fs, step %.4fs", self.scenario.name,
                    self.scenario.horizon_s, self.step_ns / NS_PER_S)
        actions = action_schedule(self.scenario)
        pending = 0
        while True:
            while pending < len(actions) and actions[pending][0] <= self.now:
                time_ns, kind, _, payload = actions[pending]
                pending += 1
                if kind == CONTROL:
                    self.control.step(time_ns)
                elif kind == EVENT:
                    self._apply_event(payload)
                else:
                    self._sample(time_ns)
            if self.now >= horizon_ns:
                break
            step = min(self.step_ns, horizon_ns - self.now)
            self._admit_rpcs(self.now)
            self._advance(step)
            self.now += step
        trace = TraceSet(
            scenario=self.scenario.name,
            seed=self.scenario.seed,
            engine="fluid",
            sample_interval_s=self.scenario.sample_interval_s,
            util=self.util,
            flows=self.records,
            alloc=self.control.trace,
            fabric_reverts=dict(self.control.fabric_reverts),
            local_drops={k: int(v) for k, v in sorted(self.local_drops.items()) if int(v)},
        )
        logger.info("fluid engine: %d transfers, %d util rows", len(trace.flows), len(trace.util))
        return trace

    def _apply_event(self, event: EventSpec) -> None:
        logger.info("t=%.3fs %s %s", event.at_s, event.kind, dict(event.args))
        if event.kind == "start_workload":
            spec = self.scenario.workload(event.args["workload"])
            if self.workloads.start(spec.name, self.now / NS_PER_S):
                self._launch(spec)
        elif event.kind == "stop_workload":
            spec = self.scenario.workload(event.args["workload"])
            if self.workloads.stop(spec.name):
                self.rpc.pop(spec.name, None)
                self.flows = [
                    f for f in self.flows
                    if f.workload != spec.name or not math.isinf(f.remaining_bytes)
                ]
        else:
            apply_control_event(self.control, self.scenario, event, self.now, self._toggle)

    def _toggle(self, name: str, up: bool) -> None:
        for affected in self.links.toggle(name, up):
            self.capacity[affected] = self.links.capacity(affected)

    def _launch(self, spec: WorkloadSpec) -> None:
        if spec.kind == "rpc":
            generation = self.workloads.generation[spec.name]
            seed = self.scenario.seed
            arrivals = rpc_workload(
                spec.size_bytes, spec.load, spec.capacity,
                source_rng(seed, spec.name, 2 * generation), self.now / NS_PER_S,
            )
            source = _RpcSource(spec, arrivals, source_rng(seed, spec.name, 2 * generation + 1),
                                next(arrivals, None))
            self.rpc[spec.name] = source
            return
        for src, dst in flow_pairs(spec, self.topology):
            if spec.kind == "long_lived":
                self._open(spec, src, dst, math.inf)
                continue
            weight = self.shapers[src].sender_weight(spec.service)
            targets = [dst]
            if spec.kind == "udp":
                targets = [d for d in spec.dst if d != src] or [dst]
            share = spec.rate / len(targets)
            for target in targets:
                self.flows.append(
                    _FluidFlow(spec.name, spec.service, src, target, weight, share, spec)
                )

    def _open(self, spec: WorkloadSpec, src: int, dst: int, size: float) -> None:
        record = FlowRecord(len(self.records), spec.name, spec.service, src, dst, size, self.now)
        self.records.append(record)
        weight = self.shapers[src].sender_weight(spec.service)
        self.flows.append(
            _FluidFlow(spec.name, spec.service, src, dst, weight, math.inf, record=record,
                       remaining_bytes=size)
        )

    def _admit_rpcs(self, now_ns: int) -> None:
        for source in self.rpc.values():
            spec = source.spec
            while source.next_s is not None and seconds_to_ns(source.next_s) <= now_ns:
                src = spec.src[int(source.picks.integers(len(spec.src)))]
                choices = [d for d in spec.dst if d != src] or list(spec.dst)
                dst = choices[int(source.picks.integers(len(choices)))]
                record = FlowRecord(len(self.records), spec.name, spec.service, src, dst,
                                    float(spec.size_bytes), seconds_to_ns(source.next_s))
                self.records.append(record)
                weight = self.shapers[src].sender_weight(spec.service)
                self.flows.append(
                    _FluidFlow(spec.name, spec.service, src, dst, weight, math.inf,
                               record=record, remaining_bytes=float(spec.size_bytes))
                )
                source.next_s = next(source.arrivals, None)

    def _offered(self, flow: _FluidFlow, mid_s: float) -> float:
        if flow.spec is None:
            return flow.offered
        return flow.offered if self.workloads.sending(flow.spec, mid_s) else 0.0

    def _rates(self, flows: list[_FluidFlow], offered: NDArray[np.float64]) -> NDArray[np.float64]:
        rows: dict[object, int] = {}
        capacity: list[float] = []
        cells: list[tuple[int, int]] = []

        def row(key: object, cap: float) -> int:
            index = rows.get(key)
            if index is None:
                index = rows[key] = len(capacity)
                capacity.append(cap)
            return index

        for column, flow in enumerate(flows):
            for name in self.links.path(flow.src, flow.dst):
                cells.append((row(name, self.capacity[name]), column))
            if self.shaping:
                tx = self.shapers[flow.src].cap(flow.service, Direction.TX)
                rx = self.shapers[flow.dst].cap(flow.service, Direction.RX)
                cells.append((row(("tx", flow.src, flow.service), tx), column))
                cells.append((row(("rx", flow.dst, flow.service), rx), column))
        incidence = np.zeros((len(capacity), len(flows)), dtype=bool)
        for r, c in cells:
            incidence[r, c] = True
        weights = np.array([f.weight for f in flows])
        return max_min_rates(incidence, np.array(capacity), offered, weights)

    def _advance(self, step_ns: int) -> None:
        if not self.flows:
            return
        dt = step_ns / NS_PER_S
        mid_s = (self.now + step_ns / 2) / NS_PER_S
        offered = np.array([self._offered(f, mid_s) for f in self.flows])
        rates = self._rates(self.flows, offered)
        finished: list[_FluidFlow] = []
        for flow, want, rate in zip(self.flows, offered, rates):
            if self.shaping and math.isfinite(want) and rate < want:
                drops = self.local_drops.get(flow.workload, 0.0)
                self.local_drops[flow.workload] = drops + (want - rate) * dt / 8.0 / MSS_BYTES
            if rate <= 0:
                continue
            nbytes = rate * dt / 8.0
            if nbytes >= flow.remaining_bytes:
                nbytes = flow.remaining_bytes
                finished.append(flow)
                if flow.record is not None:
                    flow.record.complete(self.now + round(nbytes * 8.0 / rate * NS_PER_S))
            flow.remaining_bytes -= nbytes
            flow.delivered += nbytes
            if flow.record is not None:
                flow.record.delivered_bytes = int(flow.delivered)
            self.shapers[flow.src].record_tx(flow.service, nbytes)
            self.shapers[flow.dst].record_rx(flow.service, nbytes)
            for name in self.links.path(flow.src, flow.dst):
                link = self.carried.setdefault(name, {})
                link[flow.service] = link.get(flow.service, 0.0) + nbytes
        if finished:
            done = {id(f) for f in finished}
            self.flows = [f for f in self.flows if id(f) not in done]

    def _sample(self, time_ns: int) -> None:
        interval_s = self.scenario.sample_interval_s
        start_s = (time_ns - seconds_to_ns(interval_s)) / NS_PER_S
        self.util.extend(
            rack_util_samples(start_s, interval_s, self.topology.racks, self._services,
                              self.carried)
        )
        self.carried = {}
