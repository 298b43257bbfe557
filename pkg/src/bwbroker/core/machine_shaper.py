"""Per-host enforcement: receiver rate meters and sender token buckets.

Each receiving service runs a rate meter. Every interval the meter
compares the bytes that arrived with its capacity and moves its
advertised rate R towards the value that makes the two equal, backing off
further when packets were ECN-marked. Senders learn R through feedback
packets sampled from the data they send, and install a token-bucket
limiter per destination under a per-service root limiter whose rate is
set by the brokers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from bwbroker.core.allocator import compute_runtime_policy, estimate_demand, leaf_demands_for
from bwbroker.core.params import BrokerParams, seconds_to_ns
from bwbroker.core.policy import Direction, Endpoint, PolicyTree, RuntimePolicy, effective_cap
from bwbroker.errors import NonPositiveRate, PacketLargerThanBurst
from bwbroker.utils.constants import (
    CONTROL_FACTOR_FLOOR,
    DEFAULT_BURST_BYTES,
    EWHA_GAIN,
    EXPERIMENT_METER_INTERVAL_S,
    FEEDBACK_SAMPLE_BYTES,
    LATENCY_BURST_RPC_MULTIPLE,
    METER_ALPHA,
    METER_INTERVAL_S,
    NS_PER_S,
    RATE_FLOOR_BPS,
)
from bwbroker.utils.units import format_bandwidth

logger = logging.getLogger(__name__)

_MAX_IDLE_UPDATES = 64
"""Idle intervals replayed when a meter wakes up; R reaches line rate long before."""

_TOKEN_SLACK_BYTES = 1e-6


@dataclass(frozen=True)
class FeedbackPacket:
    """Rate feedback from a receiver's meter to one sender.

    Attributes:
        src: Host the feedback is sent to (the source of the sampled packet).
        meter_service: Service whose meter produced the feedback.
        advertised: Rate the sender may use towards the meter's host, bits/s.
        meter_host: Host running the meter.
    """

    src: int
    meter_service: int
    advertised: float
    meter_host: int = 0

    def __post_init__(self) -> None:
        if not self.advertised > 0:
            raise NonPositiveRate(f"Feedback advertises {self.advertised} b/s")


@dataclass
class RateMeter:
    """Receiver-side meter for one service.

    Attributes:
        capacity: Capacity C the meter tries to fill, bits/s.
        line_rate: Upper bound on the advertised rate.
        interval_s: Control interval T.
        alpha: Aggressiveness of the control equation.
        rate: Advertised rate R; starts at the capacity.
        rate_floor: Lower bound on R.
        factor_floor: Smallest multiplicative step per interval.
        sample_bytes: Bytes between feedback packets.
    """

    capacity: float
    line_rate: float
    interval_s: float = METER_INTERVAL_S
    alpha: float = METER_ALPHA
    rate: float = 0.0
    rate_floor: float = RATE_FLOOR_BPS
    factor_floor: float = CONTROL_FACTOR_FLOOR
    sample_bytes: int = FEEDBACK_SAMPLE_BYTES
    service: int = 0
    host: int = 0
    bytes_this_interval: float = 0.0
    packets_this_interval: int = 0
    marked_this_interval: int = 0
    received_total: int = 0
    interval_start_ns: int = 0

    def __post_init__(self) -> None:
        if self.capacity <= 0 or self.line_rate <= 0:
            raise NonPositiveRate(
                f"Meter needs positive capacity and line rate, "
                f"got {self.capacity} and {self.line_rate}"
            )
        if self.interval_s <= 0:
            raise ValueError(f"Meter interval must be positive, got {self.interval_s}")
        if self.rate <= 0:
            self.rate = self.capacity
        self.rate = min(max(self.rate, self.rate_floor), self.line_rate)

    @property
    def interval_ns(self) -> int:
        return seconds_to_ns(self.interval_s)

    @property
    def utilization(self) -> float:
        """Arrival rate y over the current interval, bits/s."""
        return self.bytes_this_interval * 8.0 / self.interval_s

    @property
    def marked_fraction(self) -> float:
        """Fraction of packets ECN-marked in the current interval."""
        if self.packets_this_interval == 0:
            return 0.0
        return self.marked_this_interval / self.packets_this_interval

    def update(self) -> float:
        """Close the interval: apply the control equation and reset counters.

        R <- R * (1 - alpha * (y - C) / C - marked * beta / 2), with the step
        held at or above ``factor_floor`` and R kept within
        [rate_floor, line_rate].
        """
        y = self.utilization
        factor = 1.0 - self.alpha * (y - self.capacity) / self.capacity
        if self.marked_this_interval > 0:
            factor -= self.marked_fraction / 2.0
        factor = max(factor, self.factor_floor)
        self.rate = min(max(self.rate * factor, self.rate_floor), self.line_rate)
        self.bytes_this_interval = 0.0
        self.packets_this_interval = 0
        self.marked_this_interval = 0
        return self.rate

    def advance(self, now_ns: int) -> None:
        """Run every interval that ended before ``now_ns``.

        Intervals with no arrivals are replayed as idle updates, which is
        what a timer-driven meter would have done.
        """
        step = self.interval_ns
        elapsed = (now_ns - self.interval_start_ns) // step
        if elapsed <= 0:
            return
        self.update()
        for _ in range(min(elapsed - 1, _MAX_IDLE_UPDATES)):
            if self.rate >= self.line_rate:
                break
            self.update()
        self.interval_start_ns += elapsed * step

    def on_packet_received(
        self,
        src: int,
        pkt_bytes: int,
        ecn_marked: bool,
        now_ns: int | None = None,
        sender_weight: float = 1.0,
    ) -> list[FeedbackPacket]:
        """Account one arriving packet; return the feedback it triggers.

        One feedback packet is produced for every ``sample_bytes`` boundary
        the cumulative byte count crosses. The advertised rate is R scaled
        by the weight the sender stamped on the packet.
        """
        if now_ns is not None:
            self.advance(now_ns)
        self.bytes_this_interval += pkt_bytes
        self.packets_this_interval += 1
        if ecn_marked:
            self.marked_this_interval += 1
        before = self.received_total // self.sample_bytes
        self.received_total += pkt_bytes
        crossings = self.received_total // self.sample_bytes - before
        if crossings == 0:
            return []
        advertised = sender_weight * self.rate
        return [
            FeedbackPacket(src=src, meter_service=self.service, advertised=advertised,
                           meter_host=self.host)
            for _ in range(crossings)
        ]

    def set_capacity(self, capacity: float) -> None:
        self.capacity = max(capacity, self.rate_floor)

    def set_interval(self, interval_s: float) -> None:
        if interval_s <= 0:
            raise ValueError(f"Meter interval must be positive, got {interval_s}")
        self.interval_s = interval_s


def ewha_update(current: float, feedback: float, gain: float = EWHA_GAIN) -> float:
    """Exponentially weighted harmonic average step.

    Equivalent to an exponential moving average of 1/R, so a stream of
    feedback settles near the harmonic mean of its values.

    Raises:
        NonPositiveRate: If either rate is not positive.
        ValueError: If ``gain`` is outside (0, 1).
    """
    if current <= 0 or feedback <= 0:
        raise NonPositiveRate(f"EWHA needs positive rates, got {current} and {feedback}")
    if not 0 < gain < 1:
        raise ValueError(f"EWHA gain must be in (0, 1), got {gain}")
    return feedback * current / ((1.0 - gain) * feedback + gain * current)


@dataclass
class TokenBucket:
    """Token bucket over bytes with an integer-nanosecond clock."""

    rate: float
    burst: int
    tokens: float = -1.0
    last_refill_ns: int = 0

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise NonPositiveRate(f"Token bucket rate must be positive, got {self.rate}")
        if self.tokens < 0:
            self.tokens = float(self.burst)

    def refill(self, now_ns: int) -> None:
        if now_ns > self.last_refill_ns:
            gained = self.rate * (now_ns - self.last_refill_ns) / (8.0 * NS_PER_S)
            self.tokens = min(float(self.burst), self.tokens + gained)
            self.last_refill_ns = now_ns

    def wait_ns(self, nbytes: int) -> int:
        """Time until ``nbytes`` tokens are available, assuming a fresh refill."""
        deficit = nbytes - self.tokens
        if deficit <= _TOKEN_SLACK_BYTES:
            return 0
        return max(1, math.ceil(deficit * 8.0 * NS_PER_S / self.rate - 1e-9))

    def consume(self, nbytes: int) -> None:
        self.tokens = max(0.0, self.tokens - nbytes)

    def set_rate(self, rate: float, now_ns: int) -> None:
        if rate <= 0:
            raise NonPositiveRate(f"Token bucket rate must be positive, got {rate}")
        self.refill(now_ns)
        self.rate = rate


@dataclass(frozen=True)
class Allowed:
    """The packet may leave now; tokens have been taken."""


@dataclass(frozen=True)
class DelayUntil:
    """The packet must wait until ``time_ns``."""

    time_ns: int


SendDecision = Union[Allowed, DelayUntil]

ALLOWED = Allowed()


@dataclass
class _DestinationLimiter:
    bucket: TokenBucket
    last_feedback_ns: int


@dataclass
class RateLimiter:
    """Sender-side limiter hierarchy of one service.

    The root bucket enforces the broker-assigned service cap; a child
    bucket per destination (or per destination group when sharing)
    enforces the rate advertised by that destination's meter.

    Attributes:
        rate: Root rate in bits/s.
        burst: Bucket depth in bytes, for the root and every child.
        service: Service the limiter belongs to.
        expiry_ns: Children without feedback for this long are dropped.
        share_group: Destinations per child limiter.
        ewha_gain: Smooth feedback into a child with this gain; None overwrites.
    """

    rate: float
    burst: int = DEFAULT_BURST_BYTES
    service: int = 0
    expiry_ns: int = 10 * NS_PER_S
    share_group: int = 1
    ewha_gain: float | None = None
    root: TokenBucket = field(init=False)
    children: dict[int, _DestinationLimiter] = field(default_factory=dict, init=False)

    def __post_init__(self) -> None:
        if self.burst <= 0:
            raise ValueError(f"Burst must be positive, got {self.burst}")
        self.root = TokenBucket(rate=self.rate, burst=self.burst)

    def _key(self, dst: int) -> int:
        return dst // self.share_group

    def set_rate(self, rate: float, now_ns: int) -> None:
        """Install a new service cap from the broker."""
        self.rate = rate
        self.root.set_rate(rate, now_ns)

    def child_rate(self, dst: int) -> float | None:
        child = self.children.get(self._key(dst))
        return None if child is None else child.bucket.rate

    def on_feedback(self, fb: FeedbackPacket, now_ns: int = 0) -> RateLimiter:
        """Create or update the child limiter towards the feedback's origin."""
        key = self._key(fb.meter_host)
        child = self.children.get(key)
        if child is None:
            bucket = TokenBucket(rate=fb.advertised, burst=self.burst, last_refill_ns=now_ns)
            self.children[key] = _DestinationLimiter(bucket, now_ns)
            logger.debug("service %d: limiter to %d at %s", self.service, fb.meter_host,
                         format_bandwidth(fb.advertised))
            return self
        if self.ewha_gain is not None:
            rate = ewha_update(child.bucket.rate, fb.advertised, self.ewha_gain)
        else:
            rate = fb.advertised
        child.bucket.set_rate(rate, now_ns)
        child.last_feedback_ns = max(child.last_feedback_ns, now_ns)
        return self

    def collect_garbage(self, now_ns: int) -> int:
        """Drop children that have not heard feedback within the expiry."""
        stale = [
            key for key, child in self.children.items()
            if now_ns - child.last_feedback_ns > self.expiry_ns
        ]
        for key in stale:
            del self.children[key]
        if stale:
            logger.debug("service %d: expired %d destination limiters", self.service, len(stale))
        return len(stale)

    def try_send(self, dst: int, pkt_bytes: int, now_ns: int) -> SendDecision:
        """Take tokens for a packet to ``dst`` or say when it may leave.

        Raises:
            PacketLargerThanBurst: If the packet can never fit in the bucket.
        """
        if pkt_bytes > self.burst:
            raise PacketLargerThanBurst(
                f"{pkt_bytes}B packet exceeds {self.burst}B burst of service {self.service}"
            )
        key = self._key(dst)
        child = self.children.get(key)
        if child is not None and now_ns - child.last_feedback_ns > self.expiry_ns:
            del self.children[key]
            child = None
        self.root.refill(now_ns)
        wait = self.root.wait_ns(pkt_bytes)
        if child is not None:
            child.bucket.refill(now_ns)
            wait = max(wait, child.bucket.wait_ns(pkt_bytes))
        if wait > 0:
            return DelayUntil(now_ns + wait)
        self.root.consume(pkt_bytes)
        if child is not None:
            child.bucket.consume(pkt_bytes)
        return ALLOWED


def default_burst_bytes(rpc_bytes: int | None = None) -> int:
    """Limiter burst: 64kB, or room for ten RPCs for latency-sensitive services."""
    if rpc_bytes is None:
        return DEFAULT_BURST_BYTES
    return max(DEFAULT_BURST_BYTES, LATENCY_BURST_RPC_MULTIPLE * rpc_bytes)


@dataclass
class MachineShaper:
    """All shaping state of one host.

    Holds the per-service root limiters and rate meters, byte counters
    for usage reports, the machine-level static policies, and the
    runtime caps installed by the rack broker. The effective cap of a
    service is the tighter of its machine-level and rack-level caps.
    """

    host: int
    line_rate: float
    params: BrokerParams = field(default_factory=BrokerParams)
    tx_tree: PolicyTree | None = None
    rx_tree: PolicyTree | None = None
    bursts: dict[int, int] = field(default_factory=dict)
    limiters: dict[int, RateLimiter] = field(default_factory=dict, init=False)
    meters: dict[int, RateMeter] = field(default_factory=dict, init=False)
    last_install_ns: int | None = field(default=None, init=False)
    _tx_bytes: dict[int, float] = field(default_factory=dict, init=False, repr=False)
    _rx_bytes: dict[int, float] = field(default_factory=dict, init=False, repr=False)
    _machine: dict[Direction, RuntimePolicy] = field(default_factory=dict, init=False, repr=False)
    _rack: dict[Direction, dict[int, float]] = field(default_factory=dict, init=False, repr=False)

    def _tree(self, direction: Direction) -> PolicyTree | None:
        return self.tx_tree if direction is Direction.TX else self.rx_tree

    def static_cap(self, service: int, direction: Direction) -> float:
        tree = self._tree(direction)
        if tree is not None:
            leaf = tree.leaf_for(Endpoint(self.host, service))
            if leaf is not None:
                return min(float(effective_cap(tree, leaf)), self.line_rate)
        return self.line_rate

    def cap(self, service: int, direction: Direction) -> float:
        """Cap currently enforced for ``service`` in ``direction``.

        The rate floor lifts broker-computed caps only; a static maximum
        below the floor is enforced as configured.
        """
        static = self.static_cap(service, direction)
        dynamic = self._rack.get(direction, {}).get(service, math.inf)
        policy = self._machine.get(direction)
        if policy is not None:
            runtime = policy.get(Endpoint(self.host, service))
            if runtime is not None:
                value = runtime.capacity(direction)
                if value is not None:
                    dynamic = min(dynamic, value)
        floor = self.params.rate_floor_bps
        if static <= 0:
            return floor
        return min(static, max(dynamic, floor))

    def sender_weight(self, service: int) -> float:
        if self.tx_tree is not None:
            leaf = self.tx_tree.leaf_for(Endpoint(self.host, service))
            if leaf is not None:
                return self.tx_tree.node(leaf).weight
        return 1.0

    def limiter(self, service: int) -> RateLimiter:
        limiter = self.limiters.get(service)
        if limiter is None:
            limiter = RateLimiter(
                rate=self.cap(service, Direction.TX),
                burst=self.bursts.get(service, self.params.burst_bytes),
                service=service,
                expiry_ns=seconds_to_ns(self.params.limiter_expiry_s),
                share_group=self.params.share_group_size if self.params.ewha_sharing else 1,
                ewha_gain=self.params.ewha_gain if self.params.ewha_sharing else None,
            )
            self.limiters[service] = limiter
        return limiter

    def meter(self, service: int) -> RateMeter:
        meter = self.meters.get(service)
        if meter is None:
            meter = RateMeter(
                capacity=self.cap(service, Direction.RX),
                line_rate=self.line_rate,
                interval_s=self.params.meter_interval_s,
                alpha=self.params.alpha,
                rate_floor=self.params.rate_floor_bps,
                factor_floor=self.params.factor_floor,
                sample_bytes=self.params.feedback_sample_bytes,
                service=service,
                host=self.host,
            )
            self.meters[service] = meter
        return meter

    def record_tx(self, service: int, nbytes: float) -> None:
        self._tx_bytes[service] = self._tx_bytes.get(service, 0) + nbytes

    def record_rx(self, service: int, nbytes: float) -> None:
        self._rx_bytes[service] = self._rx_bytes.get(service, 0) + nbytes

    def take_usage(self, interval_s: float) -> tuple[dict[int, float], dict[int, float]]:
        """Per-service tx and rx rates since the last call, in bits/s; resets counters."""
        tx = {s: b * 8.0 / interval_s for s, b in sorted(self._tx_bytes.items()) if b > 0}
        rx = {s: b * 8.0 / interval_s for s, b in sorted(self._rx_bytes.items()) if b > 0}
        self._tx_bytes.clear()
        self._rx_bytes.clear()
        return tx, rx

    def refresh_machine_policy(
        self, tx_usage: dict[int, float], rx_usage: dict[int, float], now_ns: int
    ) -> None:
        """Recompute machine-level caps from local usage and apply them."""
        for direction, usage in ((Direction.TX, tx_usage), (Direction.RX, rx_usage)):
            tree = self._tree(direction)
            if tree is None:
                continue
            previous = self._machine.get(direction)
            demand: dict[Endpoint, float] = {}
            for endpoint in tree.endpoints():
                measured = 0.0
                if endpoint.machine == self.host:
                    measured = usage.get(endpoint.service, 0.0)
                runtime = previous.get(endpoint) if previous is not None else None
                if runtime is None:
                    demand[endpoint] = measured
                    continue
                demand[endpoint] = estimate_demand(
                    measured,
                    runtime.capacity(direction),
                    runtime.tx_limited if direction is Direction.TX else runtime.rx_limited,
                    self.params.demand_headroom,
                )
            self._machine[direction] = compute_runtime_policy(tree, leaf_demands_for(tree, demand))
        self._apply(now_ns)

    def install_rack_policy(self, policy: RuntimePolicy, now_ns: int) -> None:
        """Install rack-level caps for this host's endpoints."""
        tx: dict[int, float] = {}
        rx: dict[int, float] = {}
        for endpoint, runtime in policy.leaves.items():
            if endpoint.machine != self.host:
                continue
            if runtime.tx_capacity is not None:
                tx[endpoint.service] = runtime.tx_capacity
            if runtime.rx_capacity is not None:
                rx[endpoint.service] = runtime.rx_capacity
        self._rack = {Direction.TX: tx, Direction.RX: rx}
        self.last_install_ns = now_ns
        self._apply(now_ns)

    def revert_to_static(self, now_ns: int) -> None:
        self._rack.clear()
        self.last_install_ns = None
        self._apply(now_ns)

    def watchdog(self, now_ns: int) -> bool:
        """Revert to static policy when the rack broker has gone quiet."""
        if self.last_install_ns is None:
            return False
        if now_ns - self.last_install_ns < seconds_to_ns(self.params.rack_timeout_s):
            return False
        logger.warning("host %d: no rack policy for %.1fs, reverting to static policy",
                       self.host, (now_ns - self.last_install_ns) / NS_PER_S)
        self.revert_to_static(now_ns)
        return True

    def local_tick(
        self, now_ns: int, interval_s: float
    ) -> tuple[dict[int, float], dict[int, float]]:
        """Periodic host housekeeping; returns the usage measured over the interval."""
        tx, rx = self.take_usage(interval_s)
        self.refresh_machine_policy(tx, rx, now_ns)
        self.watchdog(now_ns)
        for limiter in self.limiters.values():
            limiter.collect_garbage(now_ns)
        return tx, rx

    def _apply(self, now_ns: int) -> None:
        for service, limiter in self.limiters.items():
            limiter.set_rate(self.cap(service, Direction.TX), now_ns)
        for service, meter in self.meters.items():
            meter.set_capacity(self.cap(service, Direction.RX))


def meter_convergence(
    k_senders: int,
    capacity: float,
    interval_s: float = EXPERIMENT_METER_INTERVAL_S,
    alpha: float = METER_ALPHA,
    iterations: int = 60,
    weights: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Advertised rate of one meter fed by ``k_senders`` that obey it exactly.

    Every sender transmits at weight * R for a whole interval, so the
    meter sees sum(weights) * R. Returns R before the first interval and
    after each of ``iterations`` intervals.
    """
    if k_senders < 1:
        raise ValueError(f"Need at least one sender, got {k_senders}")
    w = np.ones(k_senders) if weights is None else np.asarray(weights, dtype=np.float64)
    total_weight = float(w.sum())
    meter = RateMeter(capacity=capacity, line_rate=capacity, interval_s=interval_s, alpha=alpha)
    history = [meter.rate]
    for _ in range(iterations):
        meter.bytes_this_interval = total_weight * meter.rate * interval_s / 8.0
        meter.packets_this_interval = k_senders
        history.append(meter.update())
    return np.asarray(history)


def iterations_to_converge(
    history: ArrayLike, target: float, tolerance: float = 1e-4
) -> int | None:
    """First index after which every value stays within ``tolerance`` of ``target``."""
    values = np.asarray(history, dtype=np.float64)
    close = np.abs(values - target) <= tolerance * abs(target)
    if values.size == 0 or not close[-1]:
        return None
    far = np.flatnonzero(~close)
    return 0 if far.size == 0 else int(far[-1] + 1)
