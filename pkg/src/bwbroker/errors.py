"""Exception hierarchy.

Errors caused by bad input also derive from :class:`ValueError`.
"""

from __future__ import annotations


class BwBrokerError(Exception):
    """Base class for all bwbroker errors."""


# --- Policy ---
class PolicyError(BwBrokerError, ValueError):
    """A policy tree breaks one of its structural or admission rules."""

    def __init__(self, message: str, node: int | None = None) -> None:
        super().__init__(message)
        self.node = node


class CycleDetected(PolicyError):
    pass


class GuaranteeOvercommit(PolicyError):
    pass


class MinExceedsMax(PolicyError):
    pass


class OrphanNode(PolicyError):
    pass


class UnknownLeaf(PolicyError):
    pass


# --- Allocation ---
class InfeasibleMins(BwBrokerError, ValueError):
    """Guarantees add up to more than the capacity being shared."""


class MissingLeafDemand(BwBrokerError, ValueError):
    def __init__(self, leaf: int) -> None:
        super().__init__(f"No demand for leaf {leaf}")
        self.leaf = leaf


class InconsistentTree(BwBrokerError, ValueError):
    """Aggregated demands do not belong to the tree being distributed."""


# --- Shaping ---
class PacketLargerThanBurst(BwBrokerError, ValueError):
    pass


class NonPositiveRate(BwBrokerError, ValueError):
    pass


# --- Brokers ---
class UnknownMachine(BwBrokerError, ValueError):
    pass


class UnknownRack(BwBrokerError, ValueError):
    pass


class EmptyRack(BwBrokerError, ValueError):
    pass


class MalformedReport(BwBrokerError, ValueError):
    pass


# --- Latency ---
class InvalidEnvelope(BwBrokerError, ValueError):
    pass


class UnsortedTrace(BwBrokerError, ValueError):
    pass


class RhoTooSmall(BwBrokerError, ValueError):
    pass


class InvalidProbability(BwBrokerError, ValueError):
    pass


# --- Simulation ---
class ScenarioInvalid(BwBrokerError, ValueError):
    pass


class UnknownLink(BwBrokerError, ValueError):
    pass
