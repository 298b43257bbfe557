"""Tunable parameters of shapers and brokers."""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

from bwbroker.errors import ScenarioInvalid
from bwbroker.utils.constants import (
    CONTROL_FACTOR_FLOOR,
    DEFAULT_BURST_BYTES,
    DEMAND_HEADROOM,
    EWHA_GAIN,
    FABRIC_INTERVAL_S,
    FABRIC_TIMEOUT_S,
    FEEDBACK_SAMPLE_BYTES,
    LIMITER_EXPIRY_RACK_INTERVALS,
    METER_ALPHA,
    METER_INTERVAL_S,
    NS_PER_S,
    RACK_INTERVAL_S,
    RACK_TIMEOUT_S,
    RATE_FLOOR_BPS,
    SHARE_GROUP_SIZE,
)
from bwbroker.utils.units import parse_bandwidth

logger = logging.getLogger(__name__)


def seconds_to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


@dataclass(frozen=True)
class BrokerParams:
    """Shaper and broker parameters with the defaults used in evaluation.

    Attributes:
        meter_interval_s: Rate meter interval T.
        alpha: Meter aggressiveness.
        factor_floor: Smallest per-interval multiplicative step of a meter.
        rate_floor_bps: Lowest advertised rate.
        feedback_sample_bytes: Bytes between feedback packets.
        ewha_sharing: Share destination limiters and smooth their feedback.
        ewha_gain: Gain of the harmonic average used when sharing.
        share_group_size: Destinations per shared limiter.
        burst_bytes: Token bucket depth of sender limiters.
        rack_interval_s: Rack broker period.
        rack_timeout_s: Peer and watchdog timeout at the rack level.
        fabric_interval_s: Fabric broker period.
        fabric_timeout_s: Rack fallback timeout for fabric limits.
        demand_headroom: Growth allowance for limited leaves.
    """

    meter_interval_s: float = METER_INTERVAL_S
    alpha: float = METER_ALPHA
    factor_floor: float = CONTROL_FACTOR_FLOOR
    rate_floor_bps: float = RATE_FLOOR_BPS
    feedback_sample_bytes: int = FEEDBACK_SAMPLE_BYTES
    ewha_sharing: bool = False
    ewha_gain: float = EWHA_GAIN
    share_group_size: int = SHARE_GROUP_SIZE
    burst_bytes: int = DEFAULT_BURST_BYTES
    rack_interval_s: float = RACK_INTERVAL_S
    rack_timeout_s: float = RACK_TIMEOUT_S
    fabric_interval_s: float = FABRIC_INTERVAL_S
    fabric_timeout_s: float = FABRIC_TIMEOUT_S
    demand_headroom: float = DEMAND_HEADROOM

    def __post_init__(self) -> None:
        positive = (
            "meter_interval_s", "rack_interval_s", "rack_timeout_s",
            "fabric_interval_s", "fabric_timeout_s", "rate_floor_bps",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0 < self.ewha_gain < 1:
            raise ValueError(f"ewha_gain must be in (0, 1), got {self.ewha_gain}")
        if not 0 < self.factor_floor <= 1:
            raise ValueError(f"factor_floor must be in (0, 1], got {self.factor_floor}")
        if self.feedback_sample_bytes <= 0 or self.burst_bytes <= 0 or self.share_group_size <= 0:
            raise ValueError("Byte sizes and group sizes must be positive")
        if self.demand_headroom < 0:
            raise ValueError(f"demand_headroom must be non-negative, got {self.demand_headroom}")

    @property
    def limiter_expiry_s(self) -> float:
        return LIMITER_EXPIRY_RACK_INTERVALS * self.rack_interval_s

    @property
    def meter_interval_ns(self) -> int:
        return seconds_to_ns(self.meter_interval_s)

    @property
    def rack_interval_ns(self) -> int:
        return seconds_to_ns(self.rack_interval_s)

    @property
    def fabric_interval_ns(self) -> int:
        return seconds_to_ns(self.fabric_interval_s)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> BrokerParams:
        """Build parameters from a scenario ``params`` object.

        Raises:
            ScenarioInvalid: On unknown keys or out-of-range values.
        """
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            logger.error("Unknown broker parameters: %s", unknown)
            raise ScenarioInvalid(f"Unknown broker parameters: {unknown}")
        values: dict[str, Any] = dict(data)
        if "rate_floor_bps" in values:
            values["rate_floor_bps"] = float(parse_bandwidth(values["rate_floor_bps"]))
        try:
            return cls(**values)
        except (TypeError, ValueError) as e:
            raise ScenarioInvalid(f"Invalid broker parameters: {e}") from e
