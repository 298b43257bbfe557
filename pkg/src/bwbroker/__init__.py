"""
bwbroker: hierarchical bandwidth sharing for multi-tenant datacenters.

Policy trees with guarantees, limits and weights; weighted max-min
allocation; per-host rate meters and limiters; rack and fabric brokers;
latency bounds; and a deterministic simulator to check them end to end.
"""

from __future__ import annotations

__version__ = "0.1.0-dev"

from bwbroker.core.policy import ContentionPoint, PolicyNode, PolicyTree, validate_tree
from bwbroker.core.allocator import distribute, aggregate_demands, water_fill
from bwbroker.core.machine_shaper import MachineShaper, RateLimiter, RateMeter
from bwbroker.core.rack_broker import RackBroker
from bwbroker.core.fabric_broker import FabricBroker
from bwbroker.core.latency import ArrivalEnvelope, Mm1Model, fct_bound, mm1_fct_quantile
from bwbroker.data.config import Scenario, load_policy, load_scenario
from bwbroker.sim.runner import run

__all__ = [
    "__version__",
    "ContentionPoint",
    "PolicyNode",
    "PolicyTree",
    "validate_tree",
    "distribute",
    "aggregate_demands",
    "water_fill",
    "MachineShaper",
    "RateLimiter",
    "RateMeter",
    "RackBroker",
    "FabricBroker",
    "ArrivalEnvelope",
    "Mm1Model",
    "fct_bound",
    "mm1_fct_quantile",
    "Scenario",
    "load_policy",
    "load_scenario",
    "run",
]
