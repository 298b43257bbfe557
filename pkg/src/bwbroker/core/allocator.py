"""Hierarchical weighted max-min allocation by water-filling.

Allocation runs in two passes over a policy tree. A bottom-up pass turns
measured leaf usage into aggregate demands, then a top-down pass splits
each node's allocation among its children with :func:`water_fill`.

Guarantees act as floors. Every service first receives up to its
guarantee (never more than it asks for); the water level then rises and
a service whose weighted share passes its guarantee grows with the level
until its demand or limit is met. Services whose demand is below their
fair share are satisfied exactly and are not rate limited.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bwbroker.core.policy import (
    Direction,
    Endpoint,
    LeafRuntime,
    PolicyTree,
    RuntimePolicy,
    effective_cap,
)
from bwbroker.errors import InconsistentTree, InfeasibleMins, MinExceedsMax, MissingLeafDemand
from bwbroker.utils.constants import DEMAND_HEADROOM, DEMAND_USE_FRACTION
from bwbroker.utils.units import UNLIMITED, MaxBandwidth, format_bandwidth

logger = logging.getLogger(__name__)

_SATISFIED_TOLERANCE_BPS = 1.0
"""An allocation within this of its demand counts as satisfied."""

_FEASIBILITY_SLACK = 1e-9


@dataclass(frozen=True)
class NodeAllocation:
    """Allocation of one node.

    Attributes:
        rate: Allocated bandwidth in bits/s.
        demand: Aggregated demand the rate was computed from.
        limited: True when the node gets less than its demand.
    """

    rate: float
    demand: float
    limited: bool


def _as_float_array(values: ArrayLike | Sequence[MaxBandwidth], name: str) -> NDArray[np.float64]:
    if isinstance(values, np.ndarray):
        return values.astype(np.float64, copy=False)
    converted = [np.inf if v is UNLIMITED else v for v in values]
    try:
        return np.asarray(converted, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ValueError(f"Invalid {name}: {e}") from e


def water_fill(
    demands: ArrayLike,
    weights: ArrayLike,
    mins: ArrayLike,
    maxes: ArrayLike | Sequence[MaxBandwidth],
    capacity: float,
) -> NDArray[np.float64]:
    """Weighted max-min allocation of ``capacity`` with guarantees and limits.

    Args:
        demands: Demand of each service in bits/s (``inf`` for unbounded).
        weights: Positive weight of each service.
        mins: Guaranteed bandwidth of each service.
        maxes: Limit of each service, numbers or UNLIMITED.
        capacity: Bandwidth to share.

    Returns:
        Allocation of each service in bits/s, in input order.

    Raises:
        InfeasibleMins: If the guarantees exceed the capacity.
        MinExceedsMax: If a guarantee is above its service's limit.
        ValueError: On mismatched lengths, negative demands or bad weights.
    """
    d = _as_float_array(demands, "demands")
    w = _as_float_array(weights, "weights")
    lo = _as_float_array(mins, "mins")
    hi = _as_float_array(maxes, "maxes")

    n = d.shape[0]
    if n == 0 or not (w.shape[0] == lo.shape[0] == hi.shape[0] == n):
        raise ValueError(
            f"water_fill needs equal, non-empty inputs; got {n}, {w.shape[0]}, "
            f"{lo.shape[0]}, {hi.shape[0]}"
        )
    if capacity < 0:
        raise ValueError(f"Negative capacity: {capacity}")
    if np.any(w <= 0):
        raise ValueError("Weights must be positive")
    if np.any(d < 0) or np.any(lo < 0):
        raise ValueError("Demands and guarantees must be non-negative")
    if np.any(lo > hi):
        i = int(np.argmax(lo > hi))
        raise MinExceedsMax(f"Service {i}: min {lo[i]:.0f} exceeds max {hi[i]:.0f}", node=i)
    total_min = float(lo.sum())
    if total_min > capacity * (1.0 + _FEASIBILITY_SLACK):
        logger.error("Guarantees %s exceed capacity %s",
                     format_bandwidth(total_min), format_bandwidth(capacity))
        raise InfeasibleMins(
            f"Guarantees {format_bandwidth(total_min)} exceed capacity {format_bandwidth(capacity)}"
        )
    return _fill(d, w, lo, hi, float(capacity))


def _fill(
    demand: NDArray[np.float64],
    weight: NDArray[np.float64],
    floor: NDArray[np.float64],
    cap: NDArray[np.float64],
    capacity: float,
) -> NDArray[np.float64]:
    top = np.minimum(np.minimum(demand, cap), capacity)
    bottom = np.minimum(floor, top)
    if top.sum() <= capacity:
        return top
    if bottom.any():
        level = _level_with_floors(bottom, top, weight, capacity)
    else:
        level = _level_without_floors(top, weight, capacity)
    logger.debug("water level %.6g over %d services", level, top.shape[0])
    return np.clip(weight * level, bottom, top)


def _level_without_floors(
    top: NDArray[np.float64], weight: NDArray[np.float64], capacity: float
) -> float:
    # Sweep services by the level at which they are satiated.
    satiate = top / weight
    order = np.argsort(satiate, kind="stable")
    satiate = satiate[order]
    top_sorted = top[order]
    weight_sorted = weight[order]
    below = np.concatenate(([0.0], np.cumsum(top_sorted)[:-1]))
    rising = np.cumsum(weight_sorted[::-1])[::-1]
    filled = below + satiate * rising
    k = min(int(np.searchsorted(filled, capacity, side="left")), filled.shape[0] - 1)
    return float((capacity - below[k]) / rising[k])


def _level_with_floors(
    bottom: NDArray[np.float64],
    top: NDArray[np.float64],
    weight: NDArray[np.float64],
    capacity: float,
) -> float:
    # Total allocation is piecewise linear in the level: a service starts
    # rising at bottom/w and stops at top/w.
    points = np.concatenate((bottom / weight, top / weight))
    slope_change = np.concatenate((weight, -weight))
    order = np.argsort(points, kind="stable")
    points = points[order]
    slope = np.cumsum(slope_change[order])
    filled = float(bottom.sum()) + np.concatenate(
        ([0.0], np.cumsum(slope[:-1] * np.diff(points)))
    )
    k = min(int(np.searchsorted(filled, capacity, side="left")), filled.shape[0] - 1)
    if k == 0 or slope[k - 1] <= 0:
        return float(points[k])
    return float(points[k - 1] + (capacity - filled[k - 1]) / slope[k - 1])


def aggregate_demands(tree: PolicyTree, leaf_demands: Mapping[int, float]) -> dict[int, float]:
    """Bottom-up pass: each node's demand is its children's total, within its max.

    Leaf demands are clamped to the leaf's own max.

    Raises:
        MissingLeafDemand: If a leaf has no entry in ``leaf_demands``.
    """
    demands: dict[int, float] = {}
    for nid in tree.post_order():
        node = tree.node(nid)
        kids = tree.children(nid)
        if kids:
            total = sum(demands[kid] for kid in kids)
        else:
            if nid not in leaf_demands:
                logger.error("No demand for leaf %s", node.label)
                raise MissingLeafDemand(nid)
            total = float(leaf_demands[nid])
            if total < 0:
                raise ValueError(f"Negative demand for leaf {node.label}: {total}")
        demands[nid] = min(total, node.cap)
    return demands


def distribute(tree: PolicyTree, aggregated: Mapping[int, float]) -> dict[int, NodeAllocation]:
    """Top-down pass: water-fill each node's allocation among its children.

    Raises:
        InconsistentTree: If ``aggregated`` does not cover the tree, or a
            node's children are guaranteed more than the node received.
    """
    missing = [node.id for node in tree.nodes if node.id not in aggregated]
    if missing:
        raise InconsistentTree(f"No aggregated demand for nodes {sorted(missing)}")

    root = tree.root
    root_node = tree.node(root)
    root_demand = float(aggregated[root])
    root_rate = min(float(tree.capacity), root_demand, root_node.cap)
    root_limited = root_rate < root_demand - _SATISFIED_TOLERANCE_BPS
    allocation = {root: NodeAllocation(root_rate, root_demand, root_limited)}

    pending = [root]
    while pending:
        nid = pending.pop()
        kids = tree.children(nid)
        if not kids:
            continue
        rate = allocation[nid].rate
        nodes = [tree.node(kid) for kid in kids]
        demand = np.array([aggregated[kid] for kid in kids], dtype=np.float64)
        weight = np.array([node.weight for node in nodes], dtype=np.float64)
        cap = np.array([node.cap for node in nodes], dtype=np.float64)
        floor = np.minimum(np.array([node.min_bw for node in nodes], dtype=np.float64), demand)
        if floor.sum() > rate * (1.0 + _FEASIBILITY_SLACK) + _SATISFIED_TOLERANCE_BPS:
            raise InconsistentTree(
                f"Children of {tree.node(nid).label} are guaranteed "
                f"{format_bandwidth(float(floor.sum()))} but it received {format_bandwidth(rate)}"
            )
        rates = _fill(demand, weight, floor, cap, rate)
        for kid, kid_rate, kid_demand in zip(kids, rates, demand):
            allocation[kid] = NodeAllocation(
                float(kid_rate),
                float(kid_demand),
                float(kid_rate) < float(kid_demand) - _SATISFIED_TOLERANCE_BPS,
            )
            pending.append(kid)
    return allocation


def compute_runtime_policy(tree: PolicyTree, leaf_demands: Mapping[int, float]) -> RuntimePolicy:
    """Runtime policy for every leaf of ``tree`` given measured leaf demands.

    Limited leaves are capped at their allocation. Leaves whose demand is
    met keep their static effective cap so they can ramp up.
    """
    return runtime_from_allocation(tree, distribute(tree, aggregate_demands(tree, leaf_demands)))


def runtime_from_allocation(
    tree: PolicyTree, allocation: Mapping[int, NodeAllocation]
) -> RuntimePolicy:
    leaves: dict[Endpoint, LeafRuntime] = {}
    for leaf in tree.leaves:
        alloc = allocation[leaf]
        capacity = alloc.rate if alloc.limited else float(effective_cap(tree, leaf))
        if tree.direction is Direction.TX:
            runtime = LeafRuntime(tx_capacity=capacity, tx_limited=alloc.limited)
        else:
            runtime = LeafRuntime(rx_capacity=capacity, rx_limited=alloc.limited)
        leaves[tree.endpoint(leaf)] = runtime
    return RuntimePolicy(leaves)


def leaf_demands_for(tree: PolicyTree, usage: Mapping[Endpoint, float]) -> dict[int, float]:
    """Key endpoint usage by leaf id; leaves without usage get zero demand."""
    return {leaf: float(usage.get(tree.endpoint(leaf), 0.0)) for leaf in tree.leaves}


def estimate_demand(
    measured: float,
    allocation: float | None,
    limited: bool,
    headroom: float = DEMAND_HEADROOM,
) -> float:
    """Demand of a leaf from its measured usage.

    A limited leaf cannot use more than its allocation, so when it uses
    most of it the demand is raised above the allocation to let it grow.
    """
    if limited and allocation is not None and measured >= DEMAND_USE_FRACTION * allocation:
        return max(measured, allocation * (1.0 + headroom))
    return measured


def jain_index(values: ArrayLike) -> float:
    """Jain's fairness index: 1 for equal shares, 1/n when one takes all."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return 1.0
    square_sum = float(np.sum(x * x))
    if square_sum == 0.0:
        return 1.0
    return float(np.sum(x) ** 2 / (x.size * square_sum))


def bench_water_fill(n: int, repeats: int = 5, seed: int = 0) -> float:
    """Best wall-clock seconds of one single-level water-fill over ``n`` services."""
    rng = np.random.default_rng(seed)
    capacity = float(n) * 1e6
    demands = rng.uniform(0.0, 4e6, size=n)
    weights = np.ones(n)
    mins = np.zeros(n)
    maxes = np.full(n, np.inf)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        water_fill(demands, weights, mins, maxes, capacity)
        best = min(best, time.perf_counter() - start)
    logger.info("water_fill n=%d best %.3f ms", n, best * 1e3)
    return best
