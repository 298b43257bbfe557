"""Latency bounds for shaped traffic and the M/M/1 baseline.

A source is (sigma, rho)-regulated when the bits it delivers in any
window [t1, t2] are at most sigma + rho * C * (t2 - t1). Any flow of Z
bits through a work-conserving FIFO queue of capacity C fed only by such
traffic then completes within (sigma + Z) / (C * (1 - rho)).
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import expon

from bwbroker.errors import InvalidEnvelope, InvalidProbability, RhoTooSmall, UnsortedTrace

logger = logging.getLogger(__name__)

_DIVERGENCE_RHO = 0.95
"""Loads above this make the bound grow without limit."""

_RATE_SLACK = 1e-9


@dataclass(frozen=True)
class ArrivalEnvelope:
    """A (sigma, rho) arrival constraint.

    Attributes:
        sigma: Burst allowance in bits.
        rho: Long-run fraction of the capacity, in (0, 1).
        capacity: Reference capacity C in bits/s.
    """

    sigma: float
    rho: float
    capacity: float

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise InvalidEnvelope(f"sigma must be non-negative, got {self.sigma}")
        if not 0 < self.rho < 1:
            raise InvalidEnvelope(f"rho must be in (0, 1), got {self.rho}")
        if self.capacity <= 0:
            raise InvalidEnvelope(f"capacity must be positive, got {self.capacity}")

    @property
    def rate(self) -> float:
        """Sustained rate rho * C in bits/s."""
        return self.rho * self.capacity


@dataclass(frozen=True)
class Mm1Model:
    """M/M/1 queue of flows.

    Attributes:
        mu: Service rate in flows per second.
        rho: Offered load, in [0, 1).
    """

    mu: float
    rho: float

    def __post_init__(self) -> None:
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must be in [0, 1), got {self.rho}")

    @property
    def sojourn(self) -> Any:
        """Frozen scipy distribution of the time a flow spends in the system."""
        return expon(scale=1.0 / (self.mu * (1.0 - self.rho)))


@dataclass(frozen=True)
class Satisfied:
    """The trace respects the envelope."""


@dataclass(frozen=True)
class ViolatedAt:
    """Window (t1, t2), in seconds, with the largest excess over the envelope."""

    t1: float
    t2: float
    excess_bits: float


EnvelopeCheck = Union[Satisfied, ViolatedAt]


def fct_bound(env: ArrivalEnvelope, z_bits: float) -> float:
    """Worst-case completion time in seconds of a ``z_bits`` flow under ``env``.

    Raises:
        InvalidEnvelope: If ``z_bits`` is negative.
    """
    if z_bits < 0:
        raise InvalidEnvelope(f"Flow size must be non-negative, got {z_bits}")
    if env.rho > _DIVERGENCE_RHO:
        logger.warning("rho=%.3f is close to 1; the bound diverges", env.rho)
    return (env.sigma + z_bits) / (env.capacity * (1.0 - env.rho))


def sigma_from_convergence(
    iterations: int, interval_s: float, capacity: float, burst_bits: float = 0.0
) -> float:
    """Burst a shaped source can emit while its meter converges.

    The source may send at up to capacity for ``iterations`` meter
    intervals, plus one limiter burst.
    """
    if iterations < 0 or interval_s < 0 or burst_bits < 0:
        raise InvalidEnvelope("Convergence iterations, interval and burst must be non-negative")
    return capacity * iterations * interval_s + burst_bits


def fct_bound_from_convergence(
    iterations: int,
    interval_s: float,
    capacity: float,
    rho: float,
    z_bits: float,
    burst_bits: float = 0.0,
) -> float:
    sigma = sigma_from_convergence(iterations, interval_s, capacity, burst_bits)
    return fct_bound(ArrivalEnvelope(sigma, rho, capacity), z_bits)


def _as_trace(trace: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    arr = np.asarray(trace, dtype=np.float64)
    if arr.size == 0:
        return np.empty(0), np.empty(0)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"Trace must be (time, bits) pairs, got shape {arr.shape}")
    times, bits = arr[:, 0], arr[:, 1]
    if np.any(np.diff(times) < 0):
        i = int(np.argmax(np.diff(times) < 0))
        logger.error("Trace goes back in time at index %d", i + 1)
        raise UnsortedTrace(f"Trace time decreases at index {i + 1}: {times[i]} -> {times[i + 1]}")
    if np.any(bits < 0):
        raise ValueError("Trace arrivals must be non-negative")
    return times, bits


def _backlog_scan(
    times: NDArray[np.float64], bits: NDArray[np.float64], rate: float
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    # Bits in [t_i, t_j] minus rate * (t_j - t_i), maximised over i <= j:
    # (A_j - rate*t_j) - min_{i<=j} (A_{i-1} - rate*t_i).
    cumulative = np.cumsum(bits)
    before = cumulative - bits
    start = before - rate * times
    end = cumulative - rate * times
    running_min = np.minimum.accumulate(start)
    # Index of the window start achieving the running minimum.
    is_new_min = start <= running_min
    start_index = np.maximum.accumulate(np.where(is_new_min, np.arange(times.size), 0))
    return end - running_min, start_index


def check_envelope(trace: ArrayLike, env: ArrivalEnvelope) -> EnvelopeCheck:
    """Check a (time, bits) arrival trace against ``env`` over every window.

    Returns the window with the largest excess when the trace violates
    the envelope.

    Raises:
        UnsortedTrace: If times decrease.
    """
    times, bits = _as_trace(trace)
    if times.size == 0:
        return Satisfied()
    backlog, start_index = _backlog_scan(times, bits, env.rate)
    j = int(np.argmax(backlog))
    excess = float(backlog[j]) - env.sigma
    if excess <= 1e-9 * max(env.sigma, 1.0):
        return Satisfied()
    i = int(start_index[j])
    return ViolatedAt(float(times[i]), float(times[j]), excess)


def fit_sigma(trace: ArrayLike, rho: float, capacity: float) -> float:
    """Smallest sigma for which ``trace`` is (sigma, rho)-regulated at ``capacity``.

    Raises:
        RhoTooSmall: If the trace's long-run rate exceeds rho * capacity.
        UnsortedTrace: If times decrease.
    """
    times, bits = _as_trace(trace)
    if times.size == 0:
        return 0.0
    rate = rho * capacity
    span = float(times[-1] - times[0])
    if span > 0:
        # The last arrival ends the measurement span and is not part of it.
        long_run = float(bits[:-1].sum()) / span
        if long_run > rate * (1.0 + _RATE_SLACK):
            logger.error("Trace rate %.6g b/s exceeds rho*C %.6g b/s", long_run, rate)
            raise RhoTooSmall(f"Trace rate {long_run:.6g} b/s exceeds rho*C = {rate:.6g} b/s")
    backlog, _ = _backlog_scan(times, bits, rate)
    return max(float(backlog.max()), 0.0)


def mm1_fct_quantile(model: Mm1Model, p: float) -> float:
    """The ``p`` quantile of flow completion time in an M/M/1 queue, seconds.

    Raises:
        InvalidProbability: Unless 0 <= p < 1.
    """
    if not 0 <= p < 1:
        raise InvalidProbability(f"Quantile must be in [0, 1), got {p}")
    return float(model.sojourn.ppf(p))


def mm1_fct_cdf(model: Mm1Model, t: ArrayLike) -> NDArray[np.float64]:
    """P(FCT <= t) in an M/M/1 queue."""
    return np.asarray(model.sojourn.cdf(t), dtype=np.float64)


@dataclass(frozen=True)
class BoundRow:
    """One bound-versus-measured comparison."""

    rho: float
    z_bits: float
    bound_s: float
    measured_s: float | None = None

    @property
    def holds(self) -> bool | None:
        if self.measured_s is None:
            return None
        return self.measured_s <= self.bound_s


def bound_table(
    sigma: float,
    capacity: float,
    rhos: Iterable[float],
    sizes_bits: Sequence[float],
    measured: Mapping[tuple[float, float], float] | None = None,
) -> list[BoundRow]:
    """Bounds for every (rho, size) pair, joined with measured p99 FCTs if given."""
    rows = []
    for rho in rhos:
        env = ArrivalEnvelope(sigma, rho, capacity)
        for z in sizes_bits:
            observed = None if measured is None else measured.get((rho, z))
            rows.append(BoundRow(rho, z, fct_bound(env, z), observed))
    return rows


def format_bound_table(rows: Sequence[BoundRow]) -> str:
    lines = [f"{'rho':>6} {'size':>12} {'bound_ms':>10} {'measured_ms':>12}"]
    for row in rows:
        measured = "-" if row.measured_s is None else f"{row.measured_s * 1e3:.2f}"
        lines.append(
            f"{row.rho:>6.2f} {row.z_bits / 8:>11.0f}B {row.bound_s * 1e3:>10.2f} {measured:>12}"
        )
    return "\n".join(lines)
