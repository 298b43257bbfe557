"""Tests for rate meters, token-bucket limiters and the host shaper."""

from __future__ import annotations

import numpy as np
import pytest

from bwbroker.core.machine_shaper import (
    ALLOWED,
    DelayUntil,
    FeedbackPacket,
    MachineShaper,
    RateLimiter,
    RateMeter,
    TokenBucket,
    default_burst_bytes,
    ewha_update,
    iterations_to_converge,
    meter_convergence,
)
from bwbroker.core.params import BrokerParams
from bwbroker.core.policy import (
    ContentionPoint,
    Direction,
    Endpoint,
    LeafRuntime,
    PolicyNode,
    PolicyTree,
    RuntimePolicy,
)
from bwbroker.errors import NonPositiveRate, PacketLargerThanBurst
from bwbroker.utils.constants import (
    EXPERIMENT_METER_INTERVAL_S,
    GBPS,
    MBPS,
    MSS_BYTES,
    NS_PER_S,
)

CAPACITY = 10 * GBPS
CONVERGENCE_ITERATIONS = 30
CONVERGENCE_TOLERANCE = 1e-4
MS = NS_PER_S // 1000


class TestRateMeter:
    """Control law of the receiver meter."""

    def test_starts_at_capacity(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY)
        assert meter.rate == CAPACITY

    def test_underused_link_raises_rate(self) -> None:
        meter = RateMeter(capacity=5 * GBPS, line_rate=CAPACITY, rate=2 * GBPS, interval_s=1e-3)
        meter.bytes_this_interval = 2.5 * GBPS * 1e-3 / 8
        meter.update()
        # y = C/2: R <- R * (1 + alpha/2)
        assert meter.rate == pytest.approx(2.5 * GBPS)

    def test_overload_backs_off(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, interval_s=1e-3)
        meter.bytes_this_interval = 1.2 * CAPACITY * 1e-3 / 8
        meter.update()
        assert meter.rate == pytest.approx(0.9 * CAPACITY)
        assert meter.bytes_this_interval == 0.0

    def test_factor_floor(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, interval_s=1e-3)
        meter.bytes_this_interval = 100 * CAPACITY * 1e-3 / 8
        meter.update()
        assert meter.rate == pytest.approx(0.5 * CAPACITY)

    def test_ecn_marks_back_off(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, interval_s=1e-3)
        meter.bytes_this_interval = CAPACITY * 1e-3 / 8
        meter.packets_this_interval = 10
        meter.marked_this_interval = 4
        meter.update()
        assert meter.rate == pytest.approx(0.8 * CAPACITY)

    def test_rate_floor_and_line_rate(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, rate_floor=1 * GBPS,
                          interval_s=1e-3, factor_floor=0.01)
        for _ in range(20):
            meter.bytes_this_interval = 100 * CAPACITY * 1e-3 / 8
            meter.update()
        assert meter.rate == 1 * GBPS
        for _ in range(20):
            meter.update()
        assert meter.rate == CAPACITY

    def test_feedback_every_sample_bytes(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, sample_bytes=10_000,
                          service=3, host=7)
        feedback = []
        for _ in range(20):
            feedback += meter.on_packet_received(src=2, pkt_bytes=MSS_BYTES, ecn_marked=False)
        assert len(feedback) == 3
        assert feedback[0] == FeedbackPacket(src=2, meter_service=3, advertised=CAPACITY,
                                             meter_host=7)

    def test_feedback_scaled_by_weight(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, sample_bytes=1000)
        (fb,) = meter.on_packet_received(src=0, pkt_bytes=1000, ecn_marked=False,
                                         sender_weight=0.5)
        assert fb.advertised == pytest.approx(0.5 * CAPACITY)

    def test_advance_replays_idle_intervals(self) -> None:
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, rate=1 * GBPS, interval_s=1e-3)
        meter.advance(3 * MS + 1)
        assert meter.interval_start_ns == 3 * MS
        assert meter.rate == pytest.approx(1 * GBPS * 1.5**3)

    def test_invalid(self) -> None:
        with pytest.raises(NonPositiveRate):
            RateMeter(capacity=0.0, line_rate=CAPACITY)
        with pytest.raises(ValueError, match="interval"):
            RateMeter(capacity=CAPACITY, line_rate=CAPACITY, interval_s=0.0)


class TestMeterConvergence:
    """K senders obeying one meter settle at C/K."""

    @pytest.mark.parametrize("k", [2, 10, 100])
    def test_converges_within_30_iterations(self, k: int) -> None:
        history = meter_convergence(k, CAPACITY, interval_s=EXPERIMENT_METER_INTERVAL_S)
        iterations = iterations_to_converge(history, CAPACITY / k, CONVERGENCE_TOLERANCE)
        assert iterations is not None
        assert iterations <= CONVERGENCE_ITERATIONS

    def test_weighted_senders(self) -> None:
        history = meter_convergence(2, CAPACITY, weights=[1.0, 3.0])
        assert history[-1] == pytest.approx(CAPACITY / 4, rel=CONVERGENCE_TOLERANCE)

    @pytest.mark.parametrize("k", [2, 10, 100])
    def test_stable_after_convergence(self, k: int) -> None:
        history = meter_convergence(k, CAPACITY, iterations=200)
        settled = history[CONVERGENCE_ITERATIONS:]
        assert settled.max() - settled.min() < 0.01 * CAPACITY

    def test_stable_under_measurement_noise(self) -> None:
        k = 100
        rng = np.random.default_rng(7)
        meter = RateMeter(capacity=CAPACITY, line_rate=CAPACITY, interval_s=1e-3)
        rates = []
        for _ in range(200):
            arrival = k * meter.rate * (1.0 + rng.uniform(-0.02, 0.02))
            meter.bytes_this_interval = arrival * 1e-3 / 8
            meter.packets_this_interval = k
            rates.append(meter.update())
        settled = np.asarray(rates[CONVERGENCE_ITERATIONS:])
        assert settled.max() - settled.min() < 0.01 * CAPACITY
        assert settled.mean() == pytest.approx(CAPACITY / k, rel=0.02)

    def test_iterations_to_converge(self) -> None:
        assert iterations_to_converge([5.0, 3.0, 1.0, 1.0], 1.0) == 2
        assert iterations_to_converge([1.0, 1.0], 1.0) == 0
        assert iterations_to_converge([1.0, 2.0], 1.0) is None

    def test_needs_a_sender(self) -> None:
        with pytest.raises(ValueError, match="at least one sender"):
            meter_convergence(0, CAPACITY)


class TestEwha:
    def test_settles_near_harmonic_mean(self) -> None:
        rate = 1.0 * GBPS
        for _ in range(500):
            for value in (1.0 * GBPS, 3.0 * GBPS):
                rate = ewha_update(rate, value, gain=0.01)
        assert rate == pytest.approx(1.5 * GBPS, rel=0.02)

    def test_fixed_point(self) -> None:
        assert ewha_update(2 * GBPS, 2 * GBPS) == pytest.approx(2 * GBPS)

    def test_invalid(self) -> None:
        with pytest.raises(NonPositiveRate):
            ewha_update(0.0, 1.0)
        with pytest.raises(ValueError, match="gain"):
            ewha_update(1.0, 1.0, gain=1.0)


class TestTokenBucket:
    def test_burst_then_wait(self) -> None:
        bucket = TokenBucket(rate=8 * MBPS, burst=3000)
        bucket.consume(3000)
        # 1500 bytes at 1 byte/us
        assert bucket.wait_ns(1500) == 1500 * 1000
        bucket.refill(1500 * 1000)
        assert bucket.wait_ns(1500) == 0

    def test_tokens_capped_at_burst(self) -> None:
        bucket = TokenBucket(rate=8 * MBPS, burst=3000)
        bucket.refill(NS_PER_S)
        assert bucket.tokens == 3000

    def test_non_positive_rate(self) -> None:
        with pytest.raises(NonPositiveRate):
            TokenBucket(rate=0.0, burst=1500)


class TestRateLimiter:
    """Root and per-destination buckets of one service."""

    def test_root_limits(self) -> None:
        limiter = RateLimiter(rate=8 * MBPS, burst=MSS_BYTES)
        assert limiter.try_send(1, MSS_BYTES, 0) is ALLOWED
        decision = limiter.try_send(1, MSS_BYTES, 0)
        assert decision == DelayUntil(1500 * 1000)
        assert limiter.try_send(1, MSS_BYTES, 1500 * 1000) is ALLOWED

    def test_child_limits_destination(self) -> None:
        limiter = RateLimiter(rate=1 * GBPS, burst=MSS_BYTES)
        limiter.on_feedback(FeedbackPacket(src=0, meter_service=1, advertised=8 * MBPS,
                                           meter_host=5))
        assert limiter.child_rate(5) == 8 * MBPS
        assert limiter.try_send(5, MSS_BYTES, 0) is ALLOWED
        assert isinstance(limiter.try_send(5, MSS_BYTES, 1000), DelayUntil)
        assert limiter.try_send(6, MSS_BYTES, 20_000) is ALLOWED

    def test_feedback_overwrites_without_sharing(self) -> None:
        limiter = RateLimiter(rate=1 * GBPS)
        for rate in (100 * MBPS, 300 * MBPS):
            limiter.on_feedback(FeedbackPacket(0, 1, rate, meter_host=4), now_ns=0)
        assert limiter.child_rate(4) == 300 * MBPS

    def test_shared_limiter_uses_ewha(self) -> None:
        limiter = RateLimiter(rate=1 * GBPS, share_group=32, ewha_gain=0.5)
        limiter.on_feedback(FeedbackPacket(0, 1, 100 * MBPS, meter_host=33))
        limiter.on_feedback(FeedbackPacket(0, 1, 300 * MBPS, meter_host=40))
        assert limiter.child_rate(63) == pytest.approx(ewha_update(100 * MBPS, 300 * MBPS, 0.5))
        assert limiter.child_rate(64) is None

    def test_expired_children_collected(self) -> None:
        limiter = RateLimiter(rate=1 * GBPS, expiry_ns=10 * MS)
        limiter.on_feedback(FeedbackPacket(0, 1, 8 * MBPS, meter_host=5), now_ns=0)
        assert limiter.collect_garbage(5 * MS) == 0
        assert limiter.collect_garbage(11 * MS) == 1
        assert limiter.child_rate(5) is None

    def test_packet_larger_than_burst(self) -> None:
        limiter = RateLimiter(rate=1 * GBPS, burst=1000)
        with pytest.raises(PacketLargerThanBurst, match="1500B"):
            limiter.try_send(1, MSS_BYTES, 0)

    def test_long_run_rate(self) -> None:
        limiter = RateLimiter(rate=12 * MBPS, burst=MSS_BYTES)
        now, sent = 0, 0
        while now < NS_PER_S:
            decision = limiter.try_send(1, MSS_BYTES, now)
            if isinstance(decision, DelayUntil):
                now = decision.time_ns
            else:
                sent += 1
        assert sent * MSS_BYTES * 8 == pytest.approx(12 * MBPS, rel=0.01)

    def test_default_burst(self) -> None:
        assert default_burst_bytes() == 64_000
        assert default_burst_bytes(20_000) == 200_000


@pytest.fixture
def shaper() -> MachineShaper:
    """Host 0 with a machine tx policy: service 1 capped at 2Gb/s, service 2 uncapped."""
    tree = PolicyTree(
        ContentionPoint.MACHINE_TX,
        CAPACITY,
        (
            PolicyNode(100),
            PolicyNode(1, parent=100, max_bw=2 * GBPS, machine=0, service=1, weight=2.0),
            PolicyNode(2, parent=100, machine=0, service=2),
        ),
    )
    params = BrokerParams(rack_timeout_s=5.0, rate_floor_bps=1 * MBPS)
    return MachineShaper(host=0, line_rate=CAPACITY, params=params, tx_tree=tree)


class TestMachineShaper:
    """Machine, rack and fallback caps of one host."""

    def test_static_caps(self, shaper: MachineShaper) -> None:
        assert shaper.cap(1, Direction.TX) == 2 * GBPS
        assert shaper.cap(2, Direction.TX) == CAPACITY
        assert shaper.cap(9, Direction.RX) == CAPACITY
        assert shaper.sender_weight(1) == 2.0
        assert shaper.sender_weight(9) == 1.0

    def test_rack_cap_is_tighter(self, shaper: MachineShaper) -> None:
        rack = RuntimePolicy({
            Endpoint(0, 1): LeafRuntime(tx_capacity=5 * GBPS),
            Endpoint(0, 2): LeafRuntime(tx_capacity=3 * GBPS, rx_capacity=4 * GBPS),
            Endpoint(1, 2): LeafRuntime(tx_capacity=1 * GBPS),
        })
        limiter = shaper.limiter(2)
        shaper.install_rack_policy(rack, now_ns=0)
        assert shaper.cap(1, Direction.TX) == 2 * GBPS
        assert shaper.cap(2, Direction.TX) == 3 * GBPS
        assert shaper.cap(2, Direction.RX) == 4 * GBPS
        assert limiter.rate == 3 * GBPS

    def test_rate_floor(self, shaper: MachineShaper) -> None:
        shaper.install_rack_policy(RuntimePolicy({Endpoint(0, 2): LeafRuntime(tx_capacity=0.0)}), 0)
        assert shaper.cap(2, Direction.TX) == 1 * MBPS

    def test_static_max_below_floor_is_enforced(self) -> None:
        tree = PolicyTree(
            ContentionPoint.MACHINE_TX,
            10 * MBPS,
            (PolicyNode(100), PolicyNode(1, parent=100, max_bw=450_000, machine=0, service=1)),
        )
        params = BrokerParams(rate_floor_bps=1 * MBPS)
        shaper = MachineShaper(host=0, line_rate=10 * MBPS, params=params, tx_tree=tree)
        assert shaper.cap(1, Direction.TX) == 450_000
        shaper.install_rack_policy(RuntimePolicy({Endpoint(0, 1): LeafRuntime(tx_capacity=0.0)}), 0)
        assert shaper.cap(1, Direction.TX) == 450_000
        assert shaper.limiter(1).rate == 450_000

    def test_machine_policy_from_usage(self, shaper: MachineShaper) -> None:
        shaper.record_tx(1, 2 * GBPS / 8)
        shaper.record_tx(2, 9 * GBPS / 8)
        tx, rx = shaper.take_usage(1.0)
        assert tx == {1: pytest.approx(2 * GBPS), 2: pytest.approx(9 * GBPS)}
        assert rx == {}
        shaper.refresh_machine_policy(tx, rx, now_ns=0)
        assert shaper.cap(1, Direction.TX) == pytest.approx(2 * GBPS)
        assert shaper.cap(2, Direction.TX) == pytest.approx(8 * GBPS)
        assert shaper.take_usage(1.0) == ({}, {})

    def test_watchdog_reverts(self, shaper: MachineShaper) -> None:
        rack = RuntimePolicy({Endpoint(0, 2): LeafRuntime(tx_capacity=3 * GBPS)})
        shaper.install_rack_policy(rack, now_ns=0)
        assert not shaper.watchdog(4 * NS_PER_S)
        assert shaper.cap(2, Direction.TX) == 3 * GBPS
        assert shaper.watchdog(5 * NS_PER_S)
        assert shaper.cap(2, Direction.TX) == CAPACITY
        assert not shaper.watchdog(20 * NS_PER_S)

    def test_meter_follows_rx_cap(self, shaper: MachineShaper) -> None:
        meter = shaper.meter(2)
        assert meter.capacity == CAPACITY
        rack = RuntimePolicy({Endpoint(0, 2): LeafRuntime(rx_capacity=4 * GBPS)})
        shaper.install_rack_policy(rack, now_ns=0)
        assert meter.capacity == 4 * GBPS
        assert meter.interval_s == shaper.params.meter_interval_s

    def test_local_tick(self, shaper: MachineShaper) -> None:
        shaper.record_rx(2, 1000.0)
        tx, rx = shaper.local_tick(now_ns=NS_PER_S, interval_s=1.0)
        assert tx == {}
        assert rx == {2: 8000.0}


def test_meter_rates_are_arrays() -> None:
    history = meter_convergence(4, CAPACITY, iterations=5)
    assert isinstance(history, np.ndarray)
    assert history.shape == (6,)
    assert history[0] == CAPACITY
