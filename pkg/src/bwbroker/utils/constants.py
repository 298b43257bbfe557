from __future__ import annotations

"""Default parameters for shaping, brokering and simulation.

Bandwidths are in bits per second, sizes in bytes, durations in seconds
unless the name says otherwise. Simulation time is integer nanoseconds.
"""

# --- Units ---
KBPS: int = 1_000
"""One kilobit per second in bits/s."""

MBPS: int = 1_000_000
"""One megabit per second in bits/s."""

GBPS: int = 1_000_000_000
"""One gigabit per second in bits/s."""

NS_PER_S: int = 1_000_000_000
"""Nanoseconds per second (simulation clock resolution)."""

NS_PER_US: int = 1_000
"""Nanoseconds per microsecond."""

# --- Allocation ---
ALLOC_PRECISION_BPS: float = 1.0 * MBPS
"""Precision at which demands and allocations are compared."""

DEMAND_HEADROOM: float = 0.10
"""Fraction added to the allocation of a limited leaf that is using it."""

DEMAND_USE_FRACTION: float = 0.90
"""Share of its allocation a limited leaf must use to receive headroom."""

# --- Machine shaper ---
METER_INTERVAL_S: float = 200e-6
"""Default rate meter interval T."""

EXPERIMENT_METER_INTERVAL_S: float = 500e-6
"""Meter interval used by the convergence and latency experiments."""

METER_ALPHA: float = 0.5
"""Aggressiveness of the meter control equation."""

CONTROL_FACTOR_FLOOR: float = 0.5
"""Lowest multiplicative step a meter may take in one interval."""

RATE_FLOOR_BPS: float = 1.0 * MBPS
"""Lowest rate a meter advertises, so silent senders can restart."""

FEEDBACK_SAMPLE_BYTES: int = 10_000
"""A feedback packet is generated every time this many bytes arrive."""

EWHA_GAIN: float = 1.0 / 8.0
"""Gain of the exponentially weighted harmonic average."""

DEFAULT_BURST_BYTES: int = 64_000
"""Token bucket depth for throughput services."""

LATENCY_BURST_RPC_MULTIPLE: int = 10
"""Latency-sensitive services get a burst of this many RPCs."""

LIMITER_EXPIRY_RACK_INTERVALS: int = 10
"""Destination limiters without feedback for this many rack intervals are dropped."""

SHARE_GROUP_SIZE: int = 32
"""Destinations sharing one limiter when sharing is on (a /27 subnet)."""

FEEDBACK_BYTES: int = 16
"""Size of a serialized feedback packet."""

# --- Brokers ---
RACK_INTERVAL_S: float = 1.0
"""Rack broker period T_rack."""

RACK_TIMEOUT_S: float = 5.0
"""Peers silent for longer than this are dropped from rack allocation."""

FABRIC_INTERVAL_S: float = 10.0
"""Fabric broker period T_fabric."""

FABRIC_TIMEOUT_S: float = 50.0
"""Racks revert to static policy after hearing nothing for this long."""

REPORT_MAGIC: int = 0x45455132
"""Magic number opening every usage report ("EEQ2" in ASCII)."""

REPORT_HEADER_BYTES: int = 16
"""Magic, sender id and timestamp."""

REPORT_ENTRY_BYTES: int = 8
"""Service id (u32) plus utilization (f32)."""

# --- Network simulation ---
MSS_BYTES: int = 1500
"""Packet size used for all data packets."""

ECN_THRESHOLD_BYTES: int = 80_000
"""Queue occupancy above which arriving packets are ECN-marked."""

QUEUE_LIMIT_BYTES: int = 1_000_000
"""Hard queue limit; packets that do not fit are dropped."""

PROPAGATION_DELAY_NS: int = 10_000
"""Per-hop propagation delay."""

INITIAL_WINDOW_SEGMENTS: int = 2
"""Initial congestion window."""

MAX_WINDOW_SEGMENTS: int = 256
"""Upper bound on the congestion window."""

NIC_RATE_BPS: int = 10 * GBPS
"""Default host NIC rate."""

RACK_UPLINK_BPS: int = 80 * GBPS
"""Default aggregate uplink per rack."""

RACKS: int = 9
"""Racks in the default topology."""

HOSTS_PER_RACK: int = 10
"""Hosts per rack in the default topology."""

SPINE_LINKS: int = 8
"""Spine links per rack; the uplink rate is split evenly across them."""

MIN_RTO_S: float = 0.2
"""Retransmission timeout for a lost packet."""

SAMPLE_INTERVAL_S: float = 1.0
"""Spacing of utilization and queue samples in traces."""

FLUID_STEPS_PER_RACK_INTERVAL: int = 10
"""Time steps of the fluid engine per rack broker interval."""
