"""Tests for policy trees, validation and runtime policies."""

from __future__ import annotations

import pytest

from bwbroker.core.policy import (
    ContentionPoint,
    Direction,
    Endpoint,
    LeafRuntime,
    PolicyNode,
    PolicyTree,
    RuntimePolicy,
    ViolationKind,
    effective_cap,
    enforced_rate,
    static_runtime_policy,
    validate_tree,
)
from bwbroker.errors import (
    CycleDetected,
    GuaranteeOvercommit,
    MinExceedsMax,
    OrphanNode,
    PolicyError,
    UnknownLeaf,
)
from bwbroker.utils.constants import GBPS
from bwbroker.utils.units import UNLIMITED

CAPACITY = 10 * GBPS


def _tree(*nodes: PolicyNode, capacity: int = CAPACITY) -> PolicyTree:
    return PolicyTree(ContentionPoint.RACK_UP, capacity, nodes)


@pytest.fixture
def dfs_tree() -> PolicyTree:
    """DFS guaranteed 6Gb/s next to an unguaranteed VM service."""
    return _tree(
        PolicyNode(1, name="root"),
        PolicyNode(2, parent=1, min_bw=6 * GBPS, name="DFS"),
        PolicyNode(3, parent=1, name="VM"),
    )


class TestValidateTree:
    """Structural and admission rules."""

    def test_guarantees_within_capacity_ok(self, dfs_tree: PolicyTree) -> None:
        result = validate_tree(dfs_tree)
        assert result.ok
        result.raise_for_violations()

    def test_guarantee_overcommit(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1, min_bw=6 * GBPS),
            PolicyNode(3, parent=1, min_bw=5 * GBPS),
        )
        result = validate_tree(tree)
        assert result.kinds() == {ViolationKind.GUARANTEE_OVERCOMMIT}
        assert result.violations[0].node == 1
        with pytest.raises(GuaranteeOvercommit, match="above its capacity"):
            result.raise_for_violations()

    def test_inner_guarantee_must_cover_children(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1, min_bw=2 * GBPS),
            PolicyNode(3, parent=2, min_bw=2 * GBPS),
            PolicyNode(4, parent=2, min_bw=1 * GBPS),
        )
        result = validate_tree(tree)
        assert result.kinds() == {ViolationKind.GUARANTEE_OVERCOMMIT}
        assert result.violations[0].node == 2

    def test_min_exceeds_max(self) -> None:
        tree = _tree(PolicyNode(1), PolicyNode(2, parent=1, min_bw=8 * GBPS, max_bw=6 * GBPS))
        result = validate_tree(tree)
        assert result.kinds() == {ViolationKind.MIN_EXCEEDS_MAX}
        with pytest.raises(MinExceedsMax, match="exceeds max") as info:
            result.raise_for_violations()
        assert info.value.node == 2

    def test_orphan_node(self) -> None:
        result = validate_tree(_tree(PolicyNode(1), PolicyNode(2, parent=99)))
        assert result.kinds() == {ViolationKind.ORPHAN_NODE}
        with pytest.raises(OrphanNode, match="unknown parent 99"):
            result.raise_for_violations()

    def test_cycle_detected(self) -> None:
        tree = _tree(PolicyNode(1), PolicyNode(2, parent=3), PolicyNode(3, parent=2))
        result = validate_tree(tree)
        assert ViolationKind.CYCLE_DETECTED in result.kinds()
        with pytest.raises(CycleDetected, match=r"\[2, 3\]"):
            result.raise_for_violations()

    def test_every_violation_reported(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1),
            PolicyNode(2, parent=1, weight=0.0),
            PolicyNode(4),
        )
        kinds = validate_tree(tree).kinds()
        assert kinds == {
            ViolationKind.DUPLICATE_ID,
            ViolationKind.NON_POSITIVE_WEIGHT,
            ViolationKind.MULTIPLE_ROOTS,
        }

    def test_empty_tree(self) -> None:
        result = validate_tree(_tree())
        assert result.kinds() == {ViolationKind.EMPTY_TREE}
        with pytest.raises(PolicyError):
            result.raise_for_violations()

    def test_pure(self, dfs_tree: PolicyTree) -> None:
        bad = _tree(PolicyNode(1), PolicyNode(2, parent=1, min_bw=11 * GBPS))
        assert validate_tree(dfs_tree) == validate_tree(dfs_tree)
        assert validate_tree(bad) == validate_tree(bad)

    def test_policy_errors_are_value_errors(self) -> None:
        tree = _tree(PolicyNode(1), PolicyNode(2, parent=99))
        with pytest.raises(ValueError):
            validate_tree(tree).raise_for_violations()


class TestEffectiveCap:
    """Most constrained maximum along the path to the root."""

    def test_leaf_cap_binds(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1, max_bw=5 * GBPS),
            PolicyNode(3, parent=2, max_bw=1 * GBPS),
        )
        assert effective_cap(tree, 3) == 1 * GBPS

    def test_parent_cap_binds(self) -> None:
        tree = _tree(
            PolicyNode(1), PolicyNode(2, parent=1, max_bw=5 * GBPS), PolicyNode(3, parent=2)
        )
        assert effective_cap(tree, 3) == 5 * GBPS

    def test_capacity_binds(self) -> None:
        tree = _tree(PolicyNode(1), PolicyNode(2, parent=1))
        assert tree.node(2).max_bw is UNLIMITED
        assert effective_cap(tree, 2) == CAPACITY

    def test_unknown_leaf(self, dfs_tree: PolicyTree) -> None:
        with pytest.raises(UnknownLeaf, match="99"):
            effective_cap(dfs_tree, 99)

    def test_monotone_in_ancestor_max(self) -> None:
        caps = []
        for parent_max in (9, 7, 5, 3, 1):
            tree = _tree(
                PolicyNode(1),
                PolicyNode(2, parent=1, max_bw=parent_max * GBPS),
                PolicyNode(3, parent=2, max_bw=4 * GBPS),
            )
            caps.append(effective_cap(tree, 3))
        assert caps == sorted(caps, reverse=True)

    def test_at_least_guarantee(self, dfs_tree: PolicyTree) -> None:
        for leaf in dfs_tree.leaves:
            assert effective_cap(dfs_tree, leaf) >= dfs_tree.node(leaf).min_bw


class TestPolicyTree:
    def test_structure(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(3, parent=1),
            PolicyNode(2, parent=1),
            PolicyNode(4, parent=2),
        )
        assert tree.root == 1
        assert tree.children(1) == (2, 3)
        assert tree.leaves == (3, 4)
        assert list(tree.ancestors(4)) == [2, 1]
        assert tree.post_order() == [4, 2, 3, 1]

    def test_direction_from_contention_point(self) -> None:
        up = PolicyTree(ContentionPoint.RACK_UP, CAPACITY, (PolicyNode(1),))
        down = PolicyTree(ContentionPoint.RACK_DOWN, CAPACITY, (PolicyNode(1),))
        assert up.direction is Direction.TX
        assert down.direction is Direction.RX

    def test_endpoints(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1, machine=4, service=7),
            PolicyNode(3, parent=1),
        )
        assert tree.endpoint(2) == Endpoint(4, 7)
        assert tree.endpoint(3) == Endpoint(0, 3)
        assert tree.leaf_for(Endpoint(4, 7)) == 2
        assert tree.leaf_for(Endpoint(4, 8)) is None

    def test_with_service_cap_caps_topmost_node(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1, service=7),
            PolicyNode(3, parent=2, machine=0, service=7, max_bw=4 * GBPS),
            PolicyNode(4, parent=2, machine=1, service=7),
        )
        capped = tree.with_service_cap(7, 2 * GBPS)
        assert capped.node(2).max_bw == 2 * GBPS
        assert capped.node(3).max_bw == 4 * GBPS
        assert capped.node(4).max_bw is UNLIMITED
        assert effective_cap(capped, 3) == 2 * GBPS
        assert tree.node(2).max_bw is UNLIMITED

    def test_with_service_cap_never_raises_max(self) -> None:
        tree = _tree(PolicyNode(1), PolicyNode(2, parent=1, service=7, max_bw=1 * GBPS))
        assert tree.with_service_cap(7, 3 * GBPS).node(2).max_bw == 1 * GBPS

    def test_with_service_cap_holds_guarantee(self) -> None:
        tree = _tree(PolicyNode(1), PolicyNode(2, parent=1, service=7, min_bw=3 * GBPS))
        capped = tree.with_service_cap(7, 1 * GBPS)
        assert capped.node(2).max_bw == 3 * GBPS
        assert validate_tree(capped).ok


class TestRuntimePolicy:
    def test_static_runtime_policy(self) -> None:
        tree = _tree(
            PolicyNode(1),
            PolicyNode(2, parent=1, max_bw=3 * GBPS, machine=0, service=5),
            PolicyNode(3, parent=1, machine=1, service=5),
        )
        policy = static_runtime_policy(tree)
        assert policy[Endpoint(0, 5)] == LeafRuntime(tx_capacity=3 * GBPS)
        assert policy[Endpoint(1, 5)].tx_capacity == CAPACITY
        assert policy[Endpoint(1, 5)].rx_capacity is None
        assert not policy[Endpoint(1, 5)].limited

    def test_merge_takes_tighter(self) -> None:
        a = RuntimePolicy({Endpoint(0, 1): LeafRuntime(tx_capacity=5.0, tx_limited=True)})
        b = RuntimePolicy({
            Endpoint(0, 1): LeafRuntime(tx_capacity=3.0, rx_capacity=2.0),
            Endpoint(1, 1): LeafRuntime(rx_capacity=7.0),
        })
        merged = a.merge(b)
        assert merged[Endpoint(0, 1)] == LeafRuntime(3.0, 2.0, tx_limited=True)
        assert merged[Endpoint(1, 1)].rx_capacity == 7.0
        assert list(merged) == [Endpoint(0, 1), Endpoint(1, 1)]
        assert len(merged.for_machine(1)) == 1

    def test_enforced_rate_is_minimum(self) -> None:
        policy = RuntimePolicy({
            Endpoint(0, 1): LeafRuntime(tx_capacity=3 * GBPS),
            Endpoint(0, 2): LeafRuntime(tx_capacity=5 * GBPS),
            Endpoint(0, 3): LeafRuntime(rx_capacity=1 * GBPS),
        })
        endpoints = [Endpoint(0, 1), Endpoint(0, 2), Endpoint(0, 3)]
        assert enforced_rate(policy, endpoints, Direction.TX) == 3 * GBPS
        assert enforced_rate(policy, endpoints, Direction.RX) == 1 * GBPS
        assert enforced_rate(policy, [Endpoint(9, 9)], Direction.TX) == float("inf")
