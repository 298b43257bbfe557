"""Tests for the packet-level engine."""

from __future__ import annotations

from typing import Any

import numpy as np
import pytest

from bwbroker.data.config import parse_scenario
from bwbroker.sim.packet import PacketEngine
from bwbroker.utils.constants import MBPS

RPC_BYTES = 15_000


def _scenario(workloads: list[dict[str, Any]], **overrides: Any) -> dict[str, Any]:
    data: dict[str, Any] = {
        "name": "packet_small",
        "engine": "packet",
        "seed": 4,
        "horizon_s": 3,
        "brokers": False,
        "shaping": False,
        "topology": {"racks": 2, "hosts_per_rack": 1, "nic_rate": "10Mb/s",
                     "uplink_rate": "10Mb/s"},
        "workloads": workloads,
    }
    data.update(overrides)
    return data


class TestPacketEngine:
    def test_rpcs_finish(self) -> None:
        rpc = {"name": "R", "kind": "rpc", "service": 1, "src": 0, "dst": 1,
               "size_bytes": RPC_BYTES, "load": 0.2, "capacity": "10Mb/s"}
        trace = PacketEngine(parse_scenario(_scenario([rpc]))).run()
        assert trace.engine == "packet"
        early = trace.select_flows(workload="R", to_s=2.5)
        assert len(early) > 10
        assert all(f.finished for f in early)
        fct = trace.fcts(workload="R", to_s=2.5)
        # never faster than serializing the RPC on the sender's link
        assert np.all(fct >= RPC_BYTES * 8 / (10 * MBPS))
        assert all(f.delivered_bytes == RPC_BYTES for f in early)

    def test_long_lived_fills_link(self) -> None:
        flow = {"name": "L", "kind": "long_lived", "service": 1, "src": 0, "dst": 1}
        trace = PacketEngine(parse_scenario(_scenario([flow]))).run()
        rates = trace.util_window("rack0_up", 1, from_s=1.0)
        assert rates.size == 2
        assert np.all(rates >= 0.9 * 10 * MBPS)
        assert np.all(rates <= 10 * MBPS * 1.01)

    def test_two_flows_share_a_bottleneck(self) -> None:
        flows = [
            {"name": "A", "kind": "long_lived", "service": 1, "src": 0, "dst": 2},
            {"name": "B", "kind": "long_lived", "service": 2, "src": 1, "dst": 3},
        ]
        topology = {"racks": 2, "hosts_per_rack": 2, "nic_rate": "10Mb/s",
                    "uplink_rate": "10Mb/s"}
        scenario = parse_scenario(_scenario(flows, topology=topology, horizon_s=10))
        trace = PacketEngine(scenario).run()
        a = float(trace.util_window("rack0_up", 1, from_s=2.0).mean())
        b = float(trace.util_window("rack0_up", 2, from_s=2.0).mean())
        assert 0.7 <= a / b <= 1.43
        assert a + b >= 0.9 * 10 * MBPS
        delivered = {f.workload: f.delivered_bytes for f in trace.flows}
        assert 0.7 <= delivered["A"] / delivered["B"] <= 1.43

    def test_limiter_caps_constant_rate_source(self) -> None:
        udp = {"name": "U", "kind": "udp", "service": 1, "src": 0, "dst": 1, "rate": "10Mb/s"}
        policy = {
            "host": 0,
            "contention_point": "MachineTx",
            "capacity": "10Mb/s",
            "nodes": [{"id": 1}, {"id": 2, "parent": 1, "service": 1, "machine": 0,
                                  "max": "2Mb/s"}],
        }
        scenario = parse_scenario(_scenario([udp], shaping=True, policies=[policy]))
        trace = PacketEngine(scenario).run()
        rates = trace.util_window("rack0_up", 1, from_s=1.0)
        np.testing.assert_allclose(rates, 2 * MBPS, rtol=0.05)
        assert trace.local_drops["U"] > 0

    def test_unshaped_source_has_no_local_drops(self) -> None:
        udp = {"name": "U", "kind": "udp", "service": 1, "src": 0, "dst": 1, "rate": "5Mb/s"}
        trace = PacketEngine(parse_scenario(_scenario([udp]))).run()
        assert trace.local_drops == {}
        np.testing.assert_allclose(trace.util_window("rack0_up", 1, from_s=1.0), 5 * MBPS,
                                   rtol=0.01)

    def test_queue_samples(self) -> None:
        flow = {"name": "L", "kind": "long_lived", "service": 1, "src": 0, "dst": 1}
        trace = PacketEngine(parse_scenario(_scenario([flow]))).run()
        host_tx = trace.queue_window("host0_tx")
        assert host_tx
        assert sum(q.marked for q in host_tx) > 0

    @pytest.mark.parametrize("seed", [1, 2])
    def test_same_seed_same_flows(self, seed: int) -> None:
        rpc = {"name": "R", "kind": "rpc", "service": 1, "src": 0, "dst": 1,
               "size_bytes": RPC_BYTES, "load": 0.3, "capacity": "10Mb/s"}
        runs = [
            PacketEngine(parse_scenario(_scenario([rpc], seed=seed, horizon_s=1))).run()
            for _ in range(2)
        ]
        assert [f.fct_s for f in runs[0].flows] == [f.fct_s for f in runs[1].flows]
