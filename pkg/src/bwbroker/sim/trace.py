"""Simulation outputs and their CSV files.

Column layouts:

- ``util.csv``: time_s, scope, service, bits_per_s. Scopes are
  ``rack{r}_up``, ``rack{r}_down`` and ``fabric`` (all uplinks). Rows
  cover [time_s, time_s + sample interval).
- ``flows.csv``: flow, workload, service, src, dst, size_bytes, start_s,
  finish_s, fct_s, delivered_bytes. Unfinished transfers have ``inf``
  finish and FCT; long-lived transfers have ``inf`` size.
- ``alloc.csv``: time_s, scope, machine, service, direction, demand,
  allocation, limited.
- ``queues.csv``: time_s, link, max_bytes, p99_bytes, enqueued, marked,
  dropped. Only links that saw packets in the interval appear.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bwbroker.core.allocator import jain_index
from bwbroker.core.rack_broker import AllocationRecord
from bwbroker.sim.transport import FlowRecord

logger = logging.getLogger(__name__)

UTIL_COLUMNS = ("time_s", "scope", "service", "bits_per_s")
FLOW_COLUMNS = (
    "flow", "workload", "service", "src", "dst", "size_bytes",
    "start_s", "finish_s", "fct_s", "delivered_bytes",
)
ALLOC_COLUMNS = AllocationRecord._fields
QUEUE_COLUMNS = ("time_s", "link", "max_bytes", "p99_bytes", "enqueued", "marked", "dropped")


class UtilSample(NamedTuple):
    time_s: float
    scope: str
    service: int
    bits_per_s: float


class QueueSample(NamedTuple):
    time_s: float
    link: str
    max_bytes: int
    p99_bytes: float
    enqueued: int
    marked: int
    dropped: int


@dataclass(frozen=True)
class AssertionResult:
    label: str
    value: float
    passed: bool
    bounds: tuple[float | None, float | None] = (None, None)


def percentile(values: ArrayLike, q: float) -> float:
    """Nearest-rank percentile; infinite entries are kept as infinite.

    Returns NaN for an empty sample.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan
    return float(np.percentile(arr, q, method="higher"))


def rack_util_samples(
    start_s: float,
    interval_s: float,
    racks: int,
    services: Sequence[int],
    carried: Mapping[str, Mapping[int, float]],
) -> list[UtilSample]:
    """Per-service rates of every rack link plus the ``fabric`` total of all uplinks.

    ``carried`` maps link names to the bytes each service sent over the
    link during the interval.
    """
    samples: list[UtilSample] = []
    fabric: dict[int, float] = {}
    for rack in range(racks):
        for direction in ("up", "down"):
            name = f"rack{rack}_{direction}"
            link = carried.get(name, {})
            for service in services:
                nbytes = link.get(service, 0)
                samples.append(UtilSample(start_s, name, service, nbytes * 8.0 / interval_s))
                if direction == "up":
                    fabric[service] = fabric.get(service, 0) + nbytes
    samples.extend(
        UtilSample(start_s, "fabric", s, fabric.get(s, 0) * 8.0 / interval_s) for s in services
    )
    return samples


def _num(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


@dataclass
class TraceSet:
    """Everything a run produced."""

    scenario: str
    seed: int
    engine: str
    sample_interval_s: float
    util: list[UtilSample] = field(default_factory=list)
    flows: list[FlowRecord] = field(default_factory=list)
    alloc: list[AllocationRecord] = field(default_factory=list)
    queues: list[QueueSample] = field(default_factory=list)
    fabric_reverts: dict[int, float] = field(default_factory=dict)
    local_drops: dict[str, int] = field(default_factory=dict)
    convergence_s: dict[str, float] = field(default_factory=dict)
    assertions: list[AssertionResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.assertions)

    def util_series(
        self, scope: str, service: int | None = None
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Sample times and rates of one scope; all services summed when ``service`` is None."""
        totals: dict[float, float] = {}
        for sample in self.util:
            if sample.scope != scope or (service is not None and sample.service != service):
                continue
            totals[sample.time_s] = totals.get(sample.time_s, 0.0) + sample.bits_per_s
        times = np.array(sorted(totals))
        return times, np.array([totals[t] for t in times])

    def util_window(
        self,
        scope: str,
        service: int | None = None,
        from_s: float = 0.0,
        to_s: float = math.inf,
        skip_zero: bool = False,
    ) -> NDArray[np.float64]:
        times, values = self.util_series(scope, service)
        if times.size == 0:
            return values
        values = values[(times >= from_s) & (times < to_s)]
        return values[values > 0] if skip_zero else values

    def select_flows(
        self,
        workload: str | None = None,
        service: int | None = None,
        from_s: float = 0.0,
        to_s: float = math.inf,
    ) -> list[FlowRecord]:
        """Flows that started in [from_s, to_s)."""
        return [
            f for f in self.flows
            if (workload is None or f.workload == workload)
            and (service is None or f.service == service)
            and from_s <= f.start_s < to_s
        ]

    def fcts(self, **selection: Any) -> NDArray[np.float64]:
        return np.array([f.fct_s for f in self.select_flows(**selection)], dtype=np.float64)

    def queue_window(
        self, link: str | None = None, from_s: float = 0.0, to_s: float = math.inf
    ) -> list[QueueSample]:
        return [
            q for q in self.queues
            if (link is None or q.link == link) and from_s <= q.time_s < to_s
        ]

    def summary(self) -> dict[str, Any]:
        workloads: dict[str, Any] = {}
        for name in sorted({f.workload for f in self.flows}):
            flows = self.select_flows(workload=name)
            fct = np.array([f.fct_s for f in flows])
            finished = fct[np.isfinite(fct)]
            workloads[name] = {
                "flows": len(flows),
                "finished": int(finished.size),
                "mean_fct_s": float(finished.mean()) if finished.size else None,
                "p99_fct_s": _json_float(percentile(fct, 99)) if fct.size else None,
            }
        services = sorted({s.service for s in self.util if s.scope == "fabric"})
        means = {s: float(self.util_window("fabric", s).mean()) for s in services}
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "engine": self.engine,
            "workloads": workloads,
            "fabric_mean_bps": {str(s): v for s, v in means.items()},
            "jain_fabric_services": jain_index(list(means.values())) if means else None,
            "local_drops": dict(sorted(self.local_drops.items())),
            "fabric_reverts_s": {str(r): t for r, t in sorted(self.fabric_reverts.items())},
            "convergence_s": dict(sorted(self.convergence_s.items())),
            "assertions": [
                {"label": a.label, "value": _json_float(a.value), "passed": a.passed,
                 "min": a.bounds[0], "max": a.bounds[1]}
                for a in self.assertions
            ],
            "passed": self.passed,
        }

    def write(self, out_dir: str | Path, gnuplot: bool = False) -> list[Path]:
        """Write every output file into ``out_dir``; returns their paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [
            _write_csv(out / "util.csv", UTIL_COLUMNS,
                       ((_num(s.time_s), s.scope, s.service, _num(s.bits_per_s))
                        for s in self.util)),
            _write_csv(out / "flows.csv", FLOW_COLUMNS,
                       ((f.flow, f.workload, f.service, f.src, f.dst, _num(f.size_bytes),
                         _num(f.start_s), _num(f.finish_s), _num(f.fct_s), f.delivered_bytes)
                        for f in self.flows)),
            _write_csv(out / "alloc.csv", ALLOC_COLUMNS,
                       ((_num(r.time_s), r.scope, r.machine, r.service, r.direction,
                         _num(r.demand), _num(r.allocation), int(r.limited))
                        for r in self.alloc)),
            _write_csv(out / "queues.csv", QUEUE_COLUMNS,
                       ((_num(q.time_s), q.link, q.max_bytes, _num(q.p99_bytes),
                         q.enqueued, q.marked, q.dropped)
                        for q in self.queues)),
        ]
        summary_path = out / "summary.json"
        summary_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        written.append(summary_path)
        if gnuplot:
            plot_path = out / "plot.gp"
            plot_path.write_text(gnuplot_script(sorted({s.scope for s in self.util})))
            written.append(plot_path)
        logger.info("Wrote %d files to %s", len(written), out)
        return written


def _json_float(value: float) -> float | str:
    return value if math.isfinite(value) else str(value)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def gnuplot_script(scopes: Sequence[str]) -> str:
    """Companion gnuplot script plotting utilization per scope from ``util.csv``."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 'time (s)'",
        "set ylabel 'bits/s'",
        "set terminal pngcairo size 1000,600",
    ]
    for scope in scopes:
        lines.append(f"set output 'util_{scope}.png'")
        lines.append(
            f"plot 'util.csv' using 1:(strcol(2) eq '{scope}' ? $4 : 1/0):3 "
            f"with points palette title '{scope}'"
        )
    return "\n".join(lines) + "\n"
