"""Tests for the hierarchical water-fill allocator."""

from __future__ import annotations

import math

import numpy as np
import pytest

from bwbroker.core.allocator import (
    aggregate_demands,
    bench_water_fill,
    compute_runtime_policy,
    distribute,
    estimate_demand,
    jain_index,
    water_fill,
)
from bwbroker.core.policy import (
    ContentionPoint,
    Endpoint,
    PolicyNode,
    PolicyTree,
    effective_cap,
    validate_tree,
)
from bwbroker.errors import InconsistentTree, InfeasibleMins, MinExceedsMax, MissingLeafDemand
from bwbroker.utils.constants import ALLOC_PRECISION_BPS, GBPS, MBPS
from bwbroker.utils.units import UNLIMITED

INF = math.inf
ORACLE_INSTANCES = 1000
ORACLE_STEP_BPS = 0.05 * MBPS
BENCH_N = 100_000
BENCH_BUDGET_S = 0.020

VM1, VM2, DFS1, DFS2 = 11, 12, 21, 22


@pytest.fixture
def vm_dfs_tree() -> PolicyTree:
    """VM capped at 1Gb/s and DFS guaranteed 6Gb/s, capped at 8Gb/s, on a 10Gb/s rack."""
    return PolicyTree(
        ContentionPoint.RACK_UP,
        10 * GBPS,
        (
            PolicyNode(1, name="root"),
            PolicyNode(10, parent=1, max_bw=1 * GBPS, name="VM"),
            PolicyNode(20, parent=1, min_bw=6 * GBPS, max_bw=8 * GBPS, name="DFS"),
            PolicyNode(VM1, parent=10, machine=1, service=10, name="VM1"),
            PolicyNode(VM2, parent=10, machine=2, service=10, name="VM2"),
            PolicyNode(DFS1, parent=20, machine=1, service=20, name="DFS1"),
            PolicyNode(DFS2, parent=20, machine=2, service=20, name="DFS2"),
        ),
    )


class TestWaterFill:
    """Single-level weighted max-min with floors and limits."""

    def test_progressive_filling_example(self) -> None:
        alloc = water_fill([2 * GBPS, 4 * GBPS, 10 * GBPS], [1, 1, 1], [0, 0, 0],
                           [UNLIMITED] * 3, 10 * GBPS)
        np.testing.assert_allclose(alloc, [2 * GBPS, 4 * GBPS, 4 * GBPS])

    def test_no_contention_gives_demand(self) -> None:
        demands = [1 * GBPS, 2 * GBPS, 3 * GBPS]
        alloc = water_fill(demands, [1, 2, 3], [0, 0, 0], [UNLIMITED] * 3, 10 * GBPS)
        np.testing.assert_allclose(alloc, demands)

    def test_weights_split_excess(self) -> None:
        alloc = water_fill([INF, INF], [1, 3], [0, 0], [INF, INF], 8 * GBPS)
        np.testing.assert_allclose(alloc, [2 * GBPS, 6 * GBPS])

    def test_max_limits_service(self) -> None:
        alloc = water_fill([INF, INF], [1, 1], [0, 0], [1 * GBPS, UNLIMITED], 10 * GBPS)
        np.testing.assert_allclose(alloc, [1 * GBPS, 9 * GBPS])

    def test_guarantee_is_a_floor(self) -> None:
        # A capped at 30, B guaranteed 30, 60 to share: both get 30.
        alloc = water_fill([INF, INF], [1, 1], [0, 30 * GBPS], [30 * GBPS, INF], 60 * GBPS)
        np.testing.assert_allclose(alloc, [30 * GBPS, 30 * GBPS])

    def test_guarantee_capped_by_demand(self) -> None:
        alloc = water_fill([1 * GBPS, INF], [1, 1], [5 * GBPS, 0], [INF, INF], 10 * GBPS)
        np.testing.assert_allclose(alloc, [1 * GBPS, 9 * GBPS])

    def test_level_reaches_above_floor(self) -> None:
        alloc = water_fill([INF, INF, INF], [1, 1, 1], [4 * GBPS, 0, 0], [INF] * 3, 9 * GBPS)
        np.testing.assert_allclose(alloc, [4 * GBPS, 2.5 * GBPS, 2.5 * GBPS])

    def test_conservation(self) -> None:
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 20))
            demands = rng.uniform(0, 5 * GBPS, n)
            maxes = rng.uniform(1 * GBPS, 6 * GBPS, n)
            capacity = float(rng.uniform(1 * GBPS, 40 * GBPS))
            alloc = water_fill(demands, rng.uniform(0.5, 3, n), np.zeros(n), maxes, capacity)
            expected = min(capacity, float(np.minimum(demands, maxes).sum()))
            assert alloc.sum() == pytest.approx(expected, rel=1e-9)
            assert np.all(alloc <= np.minimum(demands, maxes) * (1 + 1e-12))

    def test_order_invariance(self) -> None:
        rng = np.random.default_rng(4)
        demands = rng.uniform(0, 5 * GBPS, 12)
        weights = rng.uniform(0.5, 3, 12)
        mins = np.full(12, 0.2 * GBPS)
        maxes = rng.uniform(1 * GBPS, 6 * GBPS, 12)
        alloc = water_fill(demands, weights, mins, maxes, 20 * GBPS)
        perm = rng.permutation(12)
        permuted = water_fill(demands[perm], weights[perm], mins[perm], maxes[perm], 20 * GBPS)
        np.testing.assert_allclose(permuted, alloc[perm])

    def test_idempotent(self) -> None:
        rng = np.random.default_rng(5)
        demands = rng.uniform(0, 5 * GBPS, 10)
        args = (np.ones(10), np.zeros(10), np.full(10, INF), 20 * GBPS)
        first = water_fill(demands, *args)
        np.testing.assert_allclose(water_fill(first, *args), first)

    def test_infeasible_mins(self) -> None:
        with pytest.raises(InfeasibleMins, match="exceed capacity"):
            water_fill([INF, INF], [1, 1], [6 * GBPS, 5 * GBPS], [INF, INF], 10 * GBPS)

    def test_min_exceeds_max(self) -> None:
        with pytest.raises(MinExceedsMax):
            water_fill([INF], [1], [2 * GBPS], [1 * GBPS], 10 * GBPS)

    @pytest.mark.parametrize(
        "args",
        [
            ([], [], [], [], 1.0),
            ([1.0, 2.0], [1.0], [0.0, 0.0], [INF, INF], 1.0),
            ([1.0], [0.0], [0.0], [INF], 1.0),
            ([-1.0], [1.0], [0.0], [INF], 1.0),
        ],
    )
    def test_bad_input(self, args: tuple) -> None:
        with pytest.raises(ValueError):
            water_fill(*args)

    def test_performance_100k(self) -> None:
        best = bench_water_fill(BENCH_N, repeats=5)
        assert best <= BENCH_BUDGET_S

    def test_near_linear_scaling(self) -> None:
        small = bench_water_fill(1_000, repeats=5)
        large = bench_water_fill(BENCH_N, repeats=5)
        # 100x the services; n log n plus fixed overhead stays well under 1000x.
        assert large < 1000 * max(small, 1e-5)


class TestAggregateDemands:
    def test_cap_binds(self) -> None:
        tree = PolicyTree(ContentionPoint.RACK_UP, 10 * GBPS, (
            PolicyNode(1), PolicyNode(2, parent=1, max_bw=1 * GBPS),
            PolicyNode(3, parent=2), PolicyNode(4, parent=2),
        ))
        demands = aggregate_demands(tree, {3: 0.7 * GBPS, 4: 0.9 * GBPS})
        assert demands[2] == 1 * GBPS

    def test_sum(self) -> None:
        tree = PolicyTree(ContentionPoint.RACK_UP, 10 * GBPS, (
            PolicyNode(1), PolicyNode(2, parent=1, max_bw=1 * GBPS),
            PolicyNode(3, parent=2), PolicyNode(4, parent=2),
        ))
        demands = aggregate_demands(tree, {3: 0.2 * GBPS, 4: 0.3 * GBPS})
        assert demands[2] == pytest.approx(0.5 * GBPS)
        assert demands[1] == pytest.approx(0.5 * GBPS)

    def test_missing_leaf(self, vm_dfs_tree: PolicyTree) -> None:
        with pytest.raises(MissingLeafDemand, match=str(DFS2)) as info:
            aggregate_demands(vm_dfs_tree, {VM1: 1.0, VM2: 1.0, DFS1: 1.0})
        assert info.value.leaf == DFS2

    def test_negative_demand(self, vm_dfs_tree: PolicyTree) -> None:
        with pytest.raises(ValueError, match="Negative demand"):
            aggregate_demands(vm_dfs_tree, {VM1: -1.0, VM2: 1.0, DFS1: 1.0, DFS2: 1.0})


class TestDistribute:
    """Top-down pass over the VM/DFS rack policy."""

    def test_all_active(self, vm_dfs_tree: PolicyTree) -> None:
        demands = {VM1: INF, VM2: INF, DFS1: INF, DFS2: INF}
        alloc = distribute(vm_dfs_tree, aggregate_demands(vm_dfs_tree, demands))
        expected = {VM1: 0.5 * GBPS, VM2: 0.5 * GBPS, DFS1: 4 * GBPS, DFS2: 4 * GBPS}
        for leaf, rate in expected.items():
            assert abs(alloc[leaf].rate - rate) <= ALLOC_PRECISION_BPS
            assert alloc[leaf].limited

    def test_dfs2_idle(self, vm_dfs_tree: PolicyTree) -> None:
        demands = {VM1: INF, VM2: INF, DFS1: INF, DFS2: 0.0}
        alloc = distribute(vm_dfs_tree, aggregate_demands(vm_dfs_tree, demands))
        assert abs(alloc[DFS1].rate - 8 * GBPS) <= ALLOC_PRECISION_BPS
        assert alloc[DFS2].rate == 0.0
        assert not alloc[DFS2].limited

    def test_single_child(self) -> None:
        tree = PolicyTree(ContentionPoint.RACK_UP, 10 * GBPS, (
            PolicyNode(1, max_bw=4 * GBPS), PolicyNode(2, parent=1, max_bw=3 * GBPS),
        ))
        alloc = distribute(tree, aggregate_demands(tree, {2: 5 * GBPS}))
        assert alloc[2].rate == 3 * GBPS

    def test_inconsistent_tree(self, vm_dfs_tree: PolicyTree) -> None:
        with pytest.raises(InconsistentTree, match="No aggregated demand"):
            distribute(vm_dfs_tree, {1: 1.0})

    def test_siblings_within_parent(self, vm_dfs_tree: PolicyTree) -> None:
        demands = {VM1: 3 * GBPS, VM2: 0.1 * GBPS, DFS1: 9 * GBPS, DFS2: 2 * GBPS}
        alloc = distribute(vm_dfs_tree, aggregate_demands(vm_dfs_tree, demands))
        for parent in (1, 10, 20):
            kids = vm_dfs_tree.children(parent)
            assert sum(alloc[k].rate for k in kids) <= alloc[parent].rate + 1.0

    def test_matches_progressive_filling_oracle(self) -> None:
        rng = np.random.default_rng(2024)
        for _ in range(ORACLE_INSTANCES):
            tree, demands = _random_instance(rng)
            alloc = distribute(tree, aggregate_demands(tree, demands))
            expected = _oracle(tree, demands)
            for leaf in tree.leaves:
                assert abs(alloc[leaf].rate - expected[leaf]) <= ALLOC_PRECISION_BPS


class TestRuntimePolicy:
    def test_idle_leaves_keep_static_caps(self, vm_dfs_tree: PolicyTree) -> None:
        policy = compute_runtime_policy(vm_dfs_tree, {leaf: 0.0 for leaf in vm_dfs_tree.leaves})
        for leaf in vm_dfs_tree.leaves:
            runtime = policy[vm_dfs_tree.endpoint(leaf)]
            assert runtime.tx_capacity == effective_cap(vm_dfs_tree, leaf)
            assert not runtime.limited

    def test_limited_leaf_gets_allocation(self, vm_dfs_tree: PolicyTree) -> None:
        demands = {VM1: INF, VM2: INF, DFS1: INF, DFS2: INF}
        policy = compute_runtime_policy(vm_dfs_tree, demands)
        runtime = policy[Endpoint(1, 20)]
        assert runtime.tx_limited
        assert runtime.tx_capacity == pytest.approx(4 * GBPS)

    def test_never_above_static_caps(self, vm_dfs_tree: PolicyTree) -> None:
        rng = np.random.default_rng(9)
        for _ in range(20):
            demands = {leaf: float(rng.uniform(0, 10 * GBPS)) for leaf in vm_dfs_tree.leaves}
            policy = compute_runtime_policy(vm_dfs_tree, demands)
            for leaf in vm_dfs_tree.leaves:
                cap = policy[vm_dfs_tree.endpoint(leaf)].tx_capacity
                assert cap is not None and cap <= effective_cap(vm_dfs_tree, leaf)


class TestEstimateDemand:
    def test_headroom_for_limited_leaf(self) -> None:
        assert estimate_demand(0.95e9, 1e9, limited=True) == pytest.approx(1.1e9)

    def test_measured_above_headroom(self) -> None:
        assert estimate_demand(1.5e9, 1e9, limited=True) == 1.5e9

    def test_underused_allocation(self) -> None:
        assert estimate_demand(0.5e9, 1e9, limited=True) == 0.5e9

    def test_unlimited_leaf(self) -> None:
        assert estimate_demand(0.99e9, 1e9, limited=False) == 0.99e9
        assert estimate_demand(0.99e9, None, limited=True) == 0.99e9


class TestJainIndex:
    def test_equal_shares(self) -> None:
        assert jain_index([3.0, 3.0, 3.0]) == pytest.approx(1.0)

    def test_one_takes_all(self) -> None:
        assert jain_index([5.0, 0.0, 0.0, 0.0]) == pytest.approx(0.25)

    def test_degenerate(self) -> None:
        assert jain_index([]) == 1.0
        assert jain_index([0.0, 0.0]) == 1.0


def _random_instance(rng: np.random.Generator) -> tuple[PolicyTree, dict[int, float]]:
    """A valid tree with at most six leaves and random guarantees, limits and weights."""
    capacity = int(rng.uniform(20, 50) * MBPS)
    parents: dict[int, int | None] = {1: None}
    internal = [1]
    for node_id in range(2, 2 + int(rng.integers(0, 3))):
        parents[node_id] = internal[int(rng.integers(len(internal)))]
        internal.append(node_id)
    first_leaf = len(parents) + 1
    for node_id in range(first_leaf, first_leaf + int(rng.integers(1, 7))):
        parents[node_id] = internal[int(rng.integers(len(internal)))]
    children: dict[int, list[int]] = {}
    for node_id, parent in parents.items():
        if parent is not None:
            children.setdefault(parent, []).append(node_id)

    mins: dict[int, int] = {1: 0}
    root_max = UNLIMITED if rng.random() < 0.5 else int(rng.uniform(10, 60) * MBPS)
    maxes: dict[int, int | object] = {1: root_max}
    pending = [1]
    while pending:
        node_id = pending.pop()
        kids = children.get(node_id, [])
        if node_id == 1:
            budget = capacity if root_max is UNLIMITED else min(capacity, int(root_max))
        else:
            budget = mins[node_id]
        shares = rng.dirichlet(np.ones(len(kids) + 1)) if kids else []
        guaranteed = rng.random() < 0.6
        for kid, share in zip(kids, shares):
            mins[kid] = int(budget * share) if guaranteed else 0
            limited = rng.random() < 0.4
            maxes[kid] = int(mins[kid] + rng.uniform(0, 30) * MBPS) if limited else UNLIMITED
            pending.append(kid)
    nodes = tuple(
        PolicyNode(
            node_id,
            parent=parent,
            min_bw=mins[node_id],
            max_bw=maxes[node_id],  # type: ignore[arg-type]
            weight=float(rng.integers(1, 4)),
        )
        for node_id, parent in parents.items()
    )
    tree = PolicyTree(ContentionPoint.RACK_UP, capacity, nodes)
    assert validate_tree(tree).ok
    demands: dict[int, float] = {}
    for leaf in tree.leaves:
        pick = rng.random()
        if pick < 0.15:
            demands[leaf] = 0.0
        elif pick < 0.35:
            demands[leaf] = INF
        else:
            demands[leaf] = float(rng.uniform(0, 30) * MBPS)
    return tree, demands


def _oracle(tree: PolicyTree, leaf_demands: dict[int, float]) -> dict[int, float]:
    """Hierarchical allocation by brute-force progressive filling in small steps.

    Each child first receives its guarantee (never more than it asks
    for); the rest is handed out in steps of ``ORACLE_STEP_BPS * weight``,
    always to the unsatisfied child with the lowest rate per weight.
    """
    demand: dict[int, float] = {}

    def aggregate(node_id: int) -> float:
        kids = tree.children(node_id)
        total = sum(aggregate(k) for k in kids) if kids else leaf_demands[node_id]
        demand[node_id] = min(total, tree.node(node_id).cap)
        return demand[node_id]

    root = tree.root
    aggregate(root)
    rate = {root: min(float(tree.capacity), demand[root], tree.node(root).cap)}
    pending = [root]
    while pending:
        parent = pending.pop()
        kids = list(tree.children(parent))
        if not kids:
            continue
        top = [min(demand[k], tree.node(k).cap, rate[parent]) for k in kids]
        alloc = [min(float(tree.node(k).min_bw), t) for k, t in zip(kids, top)]
        weight = [tree.node(k).weight for k in kids]
        left = rate[parent] - sum(alloc)
        while left > 1e-6:
            growing = [i for i in range(len(kids)) if alloc[i] < top[i] - 1e-6]
            if not growing:
                break
            i = min(growing, key=lambda j: (alloc[j] / weight[j], j))
            step = min(ORACLE_STEP_BPS * weight[i], top[i] - alloc[i], left)
            alloc[i] += step
            left -= step
        for kid, value in zip(kids, alloc):
            rate[kid] = value
            pending.append(kid)
    return {leaf: rate[leaf] for leaf in tree.leaves}
