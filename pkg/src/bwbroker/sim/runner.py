"""Run a scenario on its engine and check its assertions."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable

import numpy as np
from numpy.typing import NDArray

from bwbroker.core.allocator import jain_index
from bwbroker.data.config import AssertionSpec, Scenario
from bwbroker.errors import ScenarioInvalid
from bwbroker.sim.fluid import FluidEngine
from bwbroker.sim.packet import PacketEngine
from bwbroker.sim.trace import AssertionResult, TraceSet, percentile
from bwbroker.utils.units import parse_bandwidth

logger = logging.getLogger(__name__)

CONVERGENCE_TOLERANCE = 0.10
"""Relative band around a new fabric cap that counts as converged."""


def run(scenario: Scenario) -> TraceSet:
    """Simulate ``scenario`` to its horizon and evaluate its assertions.

    Raises:
        ScenarioInvalid: If the scenario refers to something the run lacks.
    """
    started = time.perf_counter()
    if scenario.engine == "fluid":
        trace = FluidEngine(scenario).run()
    elif scenario.engine == "packet":
        trace = PacketEngine(scenario).run()
    else:
        raise ScenarioInvalid(f"Unknown engine {scenario.engine!r}")
    trace.convergence_s = convergence_times(scenario, trace)
    trace.assertions = [evaluate(spec, scenario, trace) for spec in scenario.assertions]
    failed = [a.label for a in trace.assertions if not a.passed]
    logger.info("%s: %d assertions, %d failed, %.2fs wall clock", scenario.name,
                len(trace.assertions), len(failed), time.perf_counter() - started)
    for label in failed:
        logger.warning("assertion failed: %s", label)
    return trace


def convergence_times(scenario: Scenario, trace: TraceSet) -> dict[str, float]:
    """Seconds from each fabric cap change until the service's fabric usage settles.

    Usage has settled at the first sample after which every non-zero
    fabric sample of the service stays within 10% of the new cap until the
    next change of that service's cap. A change that never settles maps
    to ``inf``; changes that remove a cap are skipped.
    """
    changes: dict[int, list[tuple[float, float | None]]] = {}
    for event in scenario.events:
        if event.kind != "cap_change":
            continue
        service = event.args.get("service")
        if service is None:
            raise ScenarioInvalid(f"cap_change event at {event.at_s}s lacks a service")
        if isinstance(service, str) and service in scenario.services:
            service = scenario.services[service]
        cap = event.args.get("cap")
        changes.setdefault(int(service), []).append(
            (event.at_s, None if cap is None else float(parse_bandwidth(cap)))
        )
    result: dict[str, float] = {}
    for service, steps in sorted(changes.items()):
        times, values = trace.util_series("fabric", service)
        for i, (at_s, cap) in enumerate(steps):
            if cap is None:
                continue
            end_s = steps[i + 1][0] if i + 1 < len(steps) else math.inf
            window = (times >= at_s) & (times < end_s)
            t, v = times[window], values[window]
            keep = v > 0
            t, v = t[keep], v[keep]
            inside = np.abs(v - cap) <= CONVERGENCE_TOLERANCE * cap
            settled = math.inf
            if inside.size and inside[-1]:
                outside = np.flatnonzero(~inside)
                first = 0 if outside.size == 0 else int(outside[-1]) + 1
                settled = float(t[first] - at_s)
            result[f"service{service}@{at_s:g}s"] = settled
    return result


def _in_bounds(value: float, spec: AssertionSpec) -> bool:
    if math.isnan(value):
        return False
    if spec.min is not None and value < spec.min:
        return False
    return spec.max is None or value <= spec.max


def _service(spec: AssertionSpec, scenario: Scenario) -> int | None:
    if spec.service is not None or spec.workload is None:
        return spec.service
    return scenario.workload(spec.workload).service


def _util_values(
    spec: AssertionSpec, scenario: Scenario, trace: TraceSet
) -> NDArray[np.float64]:
    scope = spec.link or spec.scope or "fabric"
    return trace.util_window(
        scope, _service(spec, scenario), spec.from_s, spec.to_s, spec.skip_zero
    )


def _util_mean(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    values = _util_values(spec, scenario, trace)
    return float(values.mean()) if values.size else math.nan


def _util_all(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    """The sample farthest outside the range, or the mean if none is outside."""
    values = _util_values(spec, scenario, trace)
    if values.size == 0:
        return math.nan
    lo = -math.inf if spec.min is None else spec.min
    hi = math.inf if spec.max is None else spec.max
    excess = np.maximum(np.maximum(lo - values, values - hi), 0.0)
    if excess.max() > 0:
        return float(values[int(np.argmax(excess))])
    return float(values.mean())


def _fcts(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> NDArray[np.float64]:
    return trace.fcts(workload=spec.workload, service=_service(spec, scenario),
                      from_s=spec.from_s, to_s=spec.to_s)


def _fct_p99(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    return percentile(_fcts(spec, scenario, trace), 99)


def _fct_max(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    fcts = _fcts(spec, scenario, trace)
    return float(fcts.max()) if fcts.size else math.nan


def _jain(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    scope = spec.link or spec.scope or "fabric"
    means = [
        trace.util_window(scope, s, spec.from_s, spec.to_s, spec.skip_zero)
        for s in spec.services
    ]
    if not means or any(m.size == 0 for m in means):
        return math.nan
    return jain_index([float(m.mean()) for m in means])


def _queue_p99(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    """Largest per-interval 99th-percentile queue length, bytes."""
    samples = trace.queue_window(spec.link, spec.from_s, spec.to_s)
    return max((q.p99_bytes for q in samples), default=0.0)


def _drop_fraction(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> float:
    samples = trace.queue_window(spec.link, spec.from_s, spec.to_s)
    offered = sum(q.enqueued + q.dropped for q in samples)
    if offered == 0:
        return 0.0
    return sum(q.dropped for q in samples) / offered


_METRICS: dict[str, Callable[[AssertionSpec, Scenario, TraceSet], float]] = {
    "util_mean": _util_mean,
    "util_all": _util_all,
    "fct_p99": _fct_p99,
    "fct_max": _fct_max,
    "jain": _jain,
    "queue_p99": _queue_p99,
    "drop_fraction": _drop_fraction,
}


def evaluate(spec: AssertionSpec, scenario: Scenario, trace: TraceSet) -> AssertionResult:
    """Compute one assertion's metric and compare it with its range.

    A metric with no samples (NaN) fails.
    """
    try:
        metric = _METRICS[spec.metric]
    except KeyError as e:
        raise ScenarioInvalid(f"Unknown metric {spec.metric!r}") from e
    value = metric(spec, scenario, trace)
    passed = _in_bounds(value, spec)
    logger.debug("%s = %g (%s)", spec.label, value, "ok" if passed else "FAILED")
    return AssertionResult(spec.label, value, passed, (spec.min, spec.max))
